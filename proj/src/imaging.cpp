#include "cdssl/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace cdssl::imaging {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kVolumeMagic[4] = {'C', 'D', 'V', 'L'};
constexpr uint32_t kVolumeVersion = 1;

// Smooth step from 1 (inside) to 0 (outside) across an edge of given width.
double soft_inside(double signed_dist, double width) {
  return 1.0 / (1.0 + std::exp(signed_dist / width));
}

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated volume container");
  return v;
}

}  // namespace

VolumeGrid::VolumeGrid(std::array<int, 3> d, std::array<double, 3> s, Orientation o)
    : dims(d), spacing_mm(s), orientation(o) {
  for (int k = 0; k < 3; ++k)
    if (d[k] < 1) throw std::invalid_argument("volume dimensions must be >= 1");
  data.assign(static_cast<size_t>(d[0]) * d[1] * d[2], 0.0);
}

void VolumeGrid::validate() const {
  for (int k = 0; k < 3; ++k) {
    if (dims[k] < 1) throw std::invalid_argument("volume dimensions must be >= 1");
    if (!(spacing_mm[k] > 0.0)) throw std::invalid_argument("voxel spacing must be positive");
  }
  if (data.size() != static_cast<size_t>(dims[0]) * dims[1] * dims[2])
    throw std::invalid_argument("volume buffer does not match its dimensions");
}

size_t MaskGrid::count() const {
  return static_cast<size_t>(std::count(data.begin(), data.end(), uint8_t{1}));
}

std::string to_string(SliceMode m) { return m == SliceMode::center ? "center" : "five"; }

SliceMode slice_mode_from_string(const std::string& s) {
  if (s == "center") return SliceMode::center;
  if (s == "five") return SliceMode::five;
  throw std::invalid_argument("unknown slice mode '" + s + "'");
}

PhantomSample synthesize_volume(const PhantomParams& p, uint64_t seed) {
  for (int k = 0; k < 3; ++k) {
    if (p.dims[k] < 1) throw std::invalid_argument("phantom shape must be positive");
    if (!(p.spacing_mm[k] > 0.0)) throw std::invalid_argument("phantom spacing must be positive");
  }
  Rng rng(seed);
  PhantomSample out;
  out.rho_mm = uniform(rng, p.rho_min_mm, p.rho_max_mm);
  const double label_noise = p.label_noise_sd > 0.0 ? normal(rng, 0.0, p.label_noise_sd) : 0.0;
  out.label = std::clamp(p.signal_coef * out.rho_mm + label_noise, 0.0, 18.0);

  const std::array<double, 3> extent = {p.dims[0] * p.spacing_mm[0], p.dims[1] * p.spacing_mm[1],
                                        p.dims[2] * p.spacing_mm[2]};
  const double inplane = std::min(extent[0], extent[1]);
  const std::array<double, 3> center = {extent[0] / 2 + uniform(rng, -3.0, 3.0),
                                        extent[1] / 2 + uniform(rng, -3.0, 3.0), extent[2] / 2};
  const double rx = p.head_radius_frac * inplane * uniform(rng, 0.92, 1.05);
  const double ry = p.head_radius_frac * inplane * uniform(rng, 0.95, 1.1);
  const double rz = std::max(extent[2] * 1.5, rx);
  const double gain = uniform(rng, 0.8, 1.2);
  const double tissue = uniform(rng, 0.5, 0.6);

  const std::array<double, 3> cav_center = {center[0] + uniform(rng, -2.0, 2.0),
                                            center[1] + uniform(rng, -2.0, 2.0), center[2]};
  const std::array<double, 3> cav_axes = {out.rho_mm, out.rho_mm * 1.15, out.rho_mm + 30.0};

  struct Wave {
    double kx, ky, kz, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double theta = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double k = 2 * std::numbers::pi / p.structure_scale_mm;
    waves.push_back({k * std::cos(theta), k * std::sin(theta), k * uniform(rng, -0.3, 0.3),
                     uniform(rng, 0.0, 2 * std::numbers::pi)});
  }
  struct Blob {
    double x, y, z, r, amp;
  };
  std::vector<Blob> blobs;
  const int n_blobs = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int i = 0; i < n_blobs; ++i) {
    const double ang = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double rad = uniform(rng, 0.55, 0.8);
    blobs.push_back({center[0] + rad * rx * std::cos(ang), center[1] + rad * ry * std::sin(ang),
                     center[2] + uniform(rng, -8.0, 8.0), uniform(rng, 3.0, 7.0), uniform(rng, 0.15, 0.35)});
  }

  const bool flipped = uniform(rng, 0.0, 1.0) < p.other_orientation_prob;
  VolumeGrid v(p.dims, p.spacing_mm, flipped ? Orientation::OTHER : Orientation::RAS_PLUS);
  for (int x = 0; x < p.dims[0]; ++x) {
    for (int y = 0; y < p.dims[1]; ++y) {
      for (int z = 0; z < p.dims[2]; ++z) {
        const double px = (x + 0.5) * p.spacing_mm[0];
        const double py = (y + 0.5) * p.spacing_mm[1];
        const double pz = (z + 0.5) * p.spacing_mm[2];
        const double dx = (px - center[0]) / rx, dy = (py - center[1]) / ry, dz = (pz - center[2]) / rz;
        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        const double edge = 1.5 / rx;
        const double head = soft_inside(d - 1.0, edge);
        const double brain = soft_inside(d - 0.88, edge);

        double texture = 0.0;
        for (const auto& w : waves) texture += std::cos(w.kx * px + w.ky * py + w.kz * pz + w.phase);
        double val = head * (1.0 - brain) * 1.0 + brain * (tissue + p.texture_amplitude * texture / 3.0);

        for (const auto& b : blobs) {
          const double r = std::sqrt((px - b.x) * (px - b.x) + (py - b.y) * (py - b.y) + (pz - b.z) * (pz - b.z));
          val += brain * b.amp * soft_inside(r - b.r, 1.0);
        }

        const double cx = (px - cav_center[0]) / cav_axes[0];
        const double cy = (py - cav_center[1]) / cav_axes[1];
        const double cz = (pz - cav_center[2]) / cav_axes[2];
        const double cd = std::sqrt(cx * cx + cy * cy + cz * cz);
        const double cavity = brain * soft_inside((cd - 1.0) * cav_axes[0], 0.8);
        val = val * (1.0 - cavity) + 0.12 * cavity;

        val = gain * val + (p.image_noise_sd > 0.0 ? normal(rng, 0.0, p.image_noise_sd) : 0.0);
        const int sx = flipped ? p.dims[0] - 1 - x : x;
        const int sy = flipped ? p.dims[1] - 1 - y : y;
        v.at(sx, sy, z) = val;
      }
    }
  }
  out.volume = std::move(v);
  return out;
}

VolumeGrid reorient_ras(const VolumeGrid& v) {
  v.validate();
  if (v.orientation == Orientation::RAS_PLUS) return v;
  // OTHER is stored as LPS: x and y reversed.
  VolumeGrid out(v.dims, v.spacing_mm, Orientation::RAS_PLUS);
  for (int x = 0; x < v.dims[0]; ++x)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int z = 0; z < v.dims[2]; ++z) out.at(x, y, z) = v.at(v.dims[0] - 1 - x, v.dims[1] - 1 - y, z);
  return out;
}

VolumeGrid resample_isotropic(const VolumeGrid& v) {
  v.validate();
  std::array<int, 3> nd{};
  for (int k = 0; k < 3; ++k) nd[k] = std::max(1, round_half_up(v.dims[k] * v.spacing_mm[k]));
  VolumeGrid out(nd, {1.0, 1.0, 1.0}, v.orientation);

  // Per-axis source index and weight for each output index.
  struct Tap {
    int i0, i1;
    double w;
  };
  std::array<std::vector<Tap>, 3> taps;
  for (int k = 0; k < 3; ++k) {
    taps[k].resize(nd[k]);
    for (int i = 0; i < nd[k]; ++i) {
      double src = (i + 0.5) / v.spacing_mm[k] - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(v.dims[k] - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, v.dims[k] - 1);
      taps[k][i] = {i0, i1, src - i0};
    }
  }
  for (int x = 0; x < nd[0]; ++x) {
    const Tap tx = taps[0][x];
    for (int y = 0; y < nd[1]; ++y) {
      const Tap ty = taps[1][y];
      for (int z = 0; z < nd[2]; ++z) {
        const Tap tz = taps[2][z];
        auto lerp_z = [&](int xi, int yi) {
          const double a = v.at(xi, yi, tz.i0);
          return tz.w == 0.0 ? a : a + tz.w * (v.at(xi, yi, tz.i1) - a);
        };
        auto lerp_yz = [&](int xi) {
          const double a = lerp_z(xi, ty.i0);
          return ty.w == 0.0 ? a : a + ty.w * (lerp_z(xi, ty.i1) - a);
        };
        const double a = lerp_yz(tx.i0);
        out.at(x, y, z) = tx.w == 0.0 ? a : a + tx.w * (lerp_yz(tx.i1) - a);
      }
    }
  }
  return out;
}

double otsu_threshold(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("otsu_threshold on empty input");
  auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn_it, hi = *mx_it;
  if (hi == lo) return hi;
  constexpr int kBins = 256;
  const double width = (hi - lo) / kBins;
  std::array<double, kBins> hist{};
  for (double v : values) hist[std::clamp(static_cast<int>((v - lo) / width), 0, kBins - 1)] += 1.0;

  double total = 0.0, sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) {
    total += hist[b];
    sum_all += b * hist[b];
  }
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_t = 0;
  for (int t = 0; t < kBins - 1; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return lo + width * (best_t + 1);
}

MaskGrid compute_brain_mask(const VolumeGrid& v) {
  v.validate();
  const double thr = otsu_threshold(v.data);
  const size_t n = v.voxels();
  std::vector<int32_t> label(n, -1);
  for (size_t i = 0; i < n; ++i)
    if (v.data[i] > thr) label[i] = 0;

  const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  int next = 1, best_label = 0;
  size_t best_size = 0;
  std::deque<size_t> queue;
  for (size_t seed = 0; seed < n; ++seed) {
    if (label[seed] != 0) continue;
    const int cur = next++;
    size_t size = 0;
    label[seed] = cur;
    queue.push_back(seed);
    while (!queue.empty()) {
      const size_t i = queue.front();
      queue.pop_front();
      ++size;
      const int z = static_cast<int>(i % nz);
      const int y = static_cast<int>((i / nz) % ny);
      const int x = static_cast<int>(i / (static_cast<size_t>(nz) * ny));
      auto visit = [&](int xx, int yy, int zz) {
        if (xx < 0 || yy < 0 || zz < 0 || xx >= nx || yy >= ny || zz >= nz) return;
        const size_t j = v.index(xx, yy, zz);
        if (label[j] == 0) {
          label[j] = cur;
          queue.push_back(j);
        }
      };
      visit(x - 1, y, z);
      visit(x + 1, y, z);
      visit(x, y - 1, z);
      visit(x, y + 1, z);
      visit(x, y, z - 1);
      visit(x, y, z + 1);
    }
    if (size > best_size) {
      best_size = size;
      best_label = cur;
    }
  }
  if (best_size == 0) throw std::runtime_error("empty foreground: no voxel above the Otsu threshold");

  MaskGrid m;
  m.dims = v.dims;
  m.data.resize(n);
  for (size_t i = 0; i < n; ++i) m.data[i] = label[i] == best_label ? 1 : 0;
  return m;
}

VolumeGrid preprocess_volume(const VolumeGrid& input) {
  VolumeGrid v = resample_isotropic(reorient_ras(input));
  auto [mn_it, mx_it] = std::minmax_element(v.data.begin(), v.data.end());
  const double lo = *mn_it, hi = *mx_it;
  if (!(hi > lo)) throw std::runtime_error("degenerate intensity range");
  for (double& x : v.data) x = (x - lo) / (hi - lo);

  const MaskGrid mask = compute_brain_mask(v);
  double sum = 0.0;
  size_t count = 0;
  for (size_t i = 0; i < v.voxels(); ++i)
    if (mask.data[i]) {
      sum += v.data[i];
      ++count;
    }
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (size_t i = 0; i < v.voxels(); ++i)
    if (mask.data[i]) ss += (v.data[i] - mean) * (v.data[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(count));
  if (!(sd > 0.0)) throw std::runtime_error("degenerate intensity range inside the brain mask");
  for (double& x : v.data) x = (x - mean) / sd;
  return v;
}

std::vector<int> slice_indices(int depth, SliceMode mode) {
  if (depth < 1) throw std::invalid_argument("slice depth must be >= 1");
  const int c = depth / 2;
  if (mode == SliceMode::center) return {c};
  if (depth < 21) throw std::invalid_argument("five-slice mode needs axial depth >= 21, got " + std::to_string(depth));
  return {c - 10, c - 5, c, c + 5, c + 10};
}

SliceStack extract_slices(const VolumeGrid& v, SliceMode mode, const std::string& subject_id) {
  v.validate();
  SliceStack stack;
  stack.mode = mode;
  for (int k : slice_indices(v.dims[2], mode)) {
    Image2D plane(v.dims[0], v.dims[1]);
    for (int x = 0; x < v.dims[0]; ++x)
      for (int y = 0; y < v.dims[1]; ++y) plane.at(x, y) = v.at(x, y, k);
    SliceImage s;
    s.image = crop_or_pad(plane);
    s.subject_id = subject_id;
    s.slice_index = k;
    stack.slices.push_back(std::move(s));
  }
  return stack;
}

Image2D crop_or_pad(const Image2D& img, int rows, int cols) {
  if (img.empty()) throw std::invalid_argument("crop_or_pad on empty image");
  Image2D out(rows, cols, 0.0);
  // Source offset: positive = crop start, negative = pad before.
  auto offset = [](int n, int target) { return n >= target ? (n - target) / 2 : -((target - n + 1) / 2); };
  const int r0 = offset(img.rows, rows), c0 = offset(img.cols, cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = r + r0;
    if (sr < 0 || sr >= img.rows) continue;
    for (int c = 0; c < cols; ++c) {
      const int sc = c + c0;
      if (sc < 0 || sc >= img.cols) continue;
      out.at(r, c) = img.at(sr, sc);
    }
  }
  return out;
}

Image2D synthesize_generic_image(uint64_t seed, double* label) {
  Rng rng(seed);
  Image2D img(kSliceSize, kSliceSize);
  const double gx = uniform(rng, -1.0, 1.0), gy = uniform(rng, -1.0, 1.0), base = uniform(rng, -0.5, 0.5);
  for (int r = 0; r < kSliceSize; ++r)
    for (int c = 0; c < kSliceSize; ++c)
      img.at(r, c) = base + 0.5 * (gx * r + gy * c) / kSliceSize;

  const int n_objects = std::uniform_int_distribution<int>(2, 8)(rng);
  for (int o = 0; o < n_objects; ++o) {
    const int kind = std::uniform_int_distribution<int>(0, 3)(rng);
    const double cr = uniform(rng, 20, kSliceSize - 20), cc = uniform(rng, 20, kSliceSize - 20);
    const double size = uniform(rng, 6, 45);
    const double aspect = uniform(rng, 0.6, 1.6);
    const double amp = uniform(rng, 0.5, 1.5) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
    const double thickness = uniform(rng, 2.0, 0.5 * size + 2.0);
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int r_lo = std::max(0, static_cast<int>(cr - 2 * size)), r_hi = std::min(kSliceSize, static_cast<int>(cr + 2 * size) + 1);
    const int c_lo = std::max(0, static_cast<int>(cc - 2 * size)), c_hi = std::min(kSliceSize, static_cast<int>(cc + 2 * size) + 1);
    for (int r = r_lo; r < r_hi; ++r) {
      for (int c = c_lo; c < c_hi; ++c) {
        const double u = (r - cr) * ca + (c - cc) * sa;
        const double w = (-(r - cr) * sa + (c - cc) * ca) * aspect;
        double inside = 0.0;
        switch (kind) {
          case 0: inside = soft_inside(std::hypot(r - cr, c - cc) - size, 1.0); break;  // disk
          case 1: {  // ring
            const double d = std::hypot(r - cr, c - cc);
            inside = soft_inside(d - size, 1.0) * (1.0 - soft_inside(d - (size - thickness), 1.0));
            break;
          }
          case 2: inside = soft_inside(std::max(std::abs(u), std::abs(w)) - size, 1.0); break;  // rectangle
          default: inside = soft_inside(std::hypot(u, w) - size, 1.0); break;                 // ellipse
        }
        img.at(r, c) += amp * inside;
      }
    }
  }
  for (double& x : img.data) x += normal(rng, 0.0, 0.05);
  standardize_image(img);
  if (label) *label = static_cast<double>(n_objects);
  return img;
}

void standardize_image(Image2D& img) {
  if (img.empty()) return;
  double sum = 0.0;
  for (double x : img.data) sum += x;
  const double mean = sum / static_cast<double>(img.size());
  double ss = 0.0;
  for (double x : img.data) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(img.size()));
  if (sd == 0.0) return;
  for (double& x : img.data) x = (x - mean) / sd;
}

Image2D average_pool(const Image2D& img, int factor) {
  if (factor < 1 || img.rows % factor || img.cols % factor)
    throw std::invalid_argument("average_pool: image size not divisible by the pooling factor");
  if (factor == 1) return img;
  Image2D out(img.rows / factor, img.cols / factor);
  const double inv = 1.0 / (factor * factor);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) {
      double s = 0.0;
      for (int dr = 0; dr < factor; ++dr)
        for (int dc = 0; dc < factor; ++dc) s += img.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = s * inv;
    }
  return out;
}

void write_volume(const std::filesystem::path& path, const VolumeGrid& v) {
  v.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write volume: " + path.string());
  out.write(kVolumeMagic, 4);
  put(out, kVolumeVersion);
  for (int d : v.dims) put(out, static_cast<int32_t>(d));
  for (double s : v.spacing_mm) put(out, s);
  put(out, static_cast<uint32_t>(v.orientation));
  std::vector<float> buf(v.data.begin(), v.data.end());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

VolumeGrid read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("volume not found: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kVolumeMagic, 4) != 0) throw std::runtime_error("not a volume container: " + path.string());
  if (get<uint32_t>(in) != kVolumeVersion) throw std::runtime_error("unsupported volume container version");
  VolumeGrid v;
  for (int& d : v.dims) d = get<int32_t>(in);
  for (double& s : v.spacing_mm) s = get<double>(in);
  const uint32_t o = get<uint32_t>(in);
  if (o > 1) throw std::runtime_error("invalid orientation code");
  v.orientation = static_cast<Orientation>(o);
  for (int d : v.dims)
    if (d < 1) throw std::runtime_error("invalid volume dimensions");
  std::vector<float> buf(static_cast<size_t>(v.dims[0]) * v.dims[1] * v.dims[2]);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated volume container");
  v.data.assign(buf.begin(), buf.end());
  v.validate();
  return v;
}

void write_image_f32(const std::filesystem::path& path, const Image2D& img) {
  VolumeGrid v({img.rows, img.cols, 1}, {1.0, 1.0, 1.0});
  v.data = img.data;
  write_volume(path, v);
}

Image2D read_image_f32(const std::filesystem::path& path) {
  VolumeGrid v = read_volume(path);
  if (v.dims[2] != 1) throw std::runtime_error("container holds a 3D volume, not an image");
  Image2D img(v.dims[0], v.dims[1]);
  img.data = v.data;
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image2D& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path.string());
  out << "P5\n" << img.cols << ' ' << img.rows << "\n255\n";
  double lo = 0.0, hi = 0.0;
  if (!img.empty()) {
    auto [a, b] = std::minmax_element(img.data.begin(), img.data.end());
    lo = *a;
    hi = *b;
  }
  std::vector<unsigned char> px(img.size());
  for (size_t i = 0; i < img.size(); ++i)
    px[i] = hi > lo ? static_cast<unsigned char>(std::lround(255.0 * (img.data[i] - lo) / (hi - lo))) : 0;
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace cdssl::imaging
