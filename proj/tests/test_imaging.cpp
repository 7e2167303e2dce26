#include <doctest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include "cdssl/imaging.hpp"
#include "cdssl/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cdssl;
using namespace cdssl::imaging;

namespace {

std::pair<double, double> masked_moments(const VolumeGrid& v, const MaskGrid& m) {
  double s = 0, ss = 0;
  size_t n = 0;
  for (size_t i = 0; i < v.voxels(); ++i)
    if (m.data[i]) {
      s += v.data[i];
      ++n;
    }
  const double mean = s / n;
  for (size_t i = 0; i < v.voxels(); ++i)
    if (m.data[i]) ss += (v.data[i] - mean) * (v.data[i] - mean);
  return {mean, std::sqrt(ss / n)};
}

}  // namespace

TEST_CASE("phantom determinism and label model") {
  PhantomParams p;
  const auto a = synthesize_volume(p, 11), b = synthesize_volume(p, 11), c = synthesize_volume(p, 12);
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.label == b.label);
  CHECK(a.volume.data != c.volume.data);

  p.label_noise_sd = 0.0;
  for (uint64_t s = 0; s < 20; ++s) {
    const auto x = synthesize_volume(p, s);
    CHECK(x.label == std::clamp(p.signal_coef * x.rho_mm, 0.0, 18.0));
  }

  PhantomParams tiny;
  tiny.dims = {4, 4, 4};
  tiny.label_noise_sd = 6.0;  // push the clamp
  std::vector<double> rho, lab;
  for (uint64_t s = 0; s < 1000; ++s) {
    const auto x = synthesize_volume(tiny, s);
    CHECK(x.label >= 0.0);
    CHECK(x.label <= 18.0);
  }
  PhantomParams def;
  def.dims = {4, 4, 4};
  for (uint64_t s = 0; s < 500; ++s) {
    const auto x = synthesize_volume(def, s);
    rho.push_back(x.rho_mm);
    lab.push_back(x.label);
  }
  CHECK(metrics::pearson_r(lab, rho) >= 0.9);

  PhantomParams bad;
  bad.dims = {0, 4, 4};
  CHECK_THROWS(synthesize_volume(bad, 1));
}

TEST_CASE("resampling") {
  VolumeGrid v({5, 4, 3}, {1, 1, 1});
  for (size_t i = 0; i < v.voxels(); ++i) v.data[i] = std::sin(0.7 * i);
  CHECK(resample_isotropic(v).data == v.data);

  VolumeGrid w({32, 32, 32}, {2, 2, 2});
  for (size_t i = 0; i < w.voxels(); ++i) w.data[i] = 1.5;
  const auto r = resample_isotropic(w);
  CHECK(r.dims == std::array<int, 3>{64, 64, 64});
  for (double x : r.data) CHECK(x == 1.5);

  VolumeGrid flipped({3, 2, 1}, {1, 1, 1}, Orientation::OTHER);
  for (size_t i = 0; i < flipped.voxels(); ++i) flipped.data[i] = static_cast<double>(i);
  const auto ras = reorient_ras(flipped);
  CHECK(ras.orientation == Orientation::RAS_PLUS);
  CHECK(ras.at(0, 0, 0) == flipped.at(2, 1, 0));
  CHECK(reorient_ras(ras).data == ras.data);
}

TEST_CASE("otsu and brain mask match the brute-force oracles") {
  for (uint64_t s : {1, 2, 3}) {
    PhantomParams p;
    p.dims = {16, 16, 16};
    p.spacing_mm = {6, 6, 6};
    const auto v = synthesize_volume(p, s).volume;
    const double thr = otsu_threshold(v.data);
    CHECK(thr == doctest::Approx(oracle::otsu(v.data)).epsilon(1e-12));
    std::vector<uint8_t> fg(v.voxels());
    for (size_t i = 0; i < v.voxels(); ++i) fg[i] = v.data[i] > thr;
    CHECK(compute_brain_mask(v).data == oracle::largest_component(fg, v.dims));
  }

  VolumeGrid cube({10, 10, 10}, {1, 1, 1});
  for (int x = 3; x < 7; ++x)
    for (int y = 3; y < 7; ++y)
      for (int z = 3; z < 7; ++z) cube.at(x, y, z) = 1.0;
  const auto m = compute_brain_mask(cube);
  CHECK(m.count() == 64);
  for (size_t i = 0; i < cube.voxels(); ++i) CHECK(m.data[i] == (cube.data[i] > 0.5));

  // two components: a 100-voxel slab and a 10-voxel rod
  VolumeGrid two({20, 20, 20}, {1, 1, 1});
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 10; ++y) two.at(x, y, 0) = 1.0;
  for (int z = 5; z < 15; ++z) two.at(15, 15, z) = 1.0;
  const auto m2 = compute_brain_mask(two);
  CHECK(m2.count() == 100);
  CHECK(m2.data[two.index(15, 15, 10)] == 0);

  VolumeGrid flat({3, 3, 3}, {1, 1, 1});
  CHECK_THROWS(compute_brain_mask(flat));
}

TEST_CASE("preprocess z-scores inside the mask and is idempotent") {
  PhantomParams p;
  p.dims = {20, 20, 8};
  const auto raw = synthesize_volume(p, 5).volume;
  const auto v = preprocess_volume(raw);
  CHECK(v.spacing_mm == std::array<double, 3>{1, 1, 1});
  CHECK(v.orientation == Orientation::RAS_PLUS);
  const auto [mean, sd] = masked_moments(v, compute_brain_mask(v));
  CHECK(std::abs(mean) < 1e-9);
  CHECK(std::abs(sd - 1.0) < 1e-9);

  const auto again = preprocess_volume(v);
  double worst = 0.0;
  for (size_t i = 0; i < v.voxels(); ++i) worst = std::max(worst, std::abs(again.data[i] - v.data[i]));
  CHECK(worst < 1e-9);

  VolumeGrid flat({4, 4, 4}, {1, 1, 1});
  CHECK_THROWS(preprocess_volume(flat));
}

TEST_CASE("slice indices and extraction") {
  CHECK(slice_indices(64, SliceMode::five) == std::vector<int>{22, 27, 32, 37, 42});
  CHECK(slice_indices(64, SliceMode::center) == std::vector<int>{32});
  CHECK(slice_indices(21, SliceMode::five).front() == 0);
  CHECK_THROWS(slice_indices(20, SliceMode::five));
  CHECK(slice_indices(1, SliceMode::center) == std::vector<int>{0});

  VolumeGrid v({30, 40, 64}, {1, 1, 1});
  for (int z = 0; z < 64; ++z)
    for (int x = 0; x < 30; ++x)
      for (int y = 0; y < 40; ++y) v.at(x, y, z) = z;
  const auto st = extract_slices(v, SliceMode::five, "s");
  REQUIRE(st.slices.size() == 5);
  for (const auto& s : st.slices) {
    CHECK(s.image.rows == kSliceSize);
    CHECK(s.image.cols == kSliceSize);
    CHECK(s.subject_id == "s");
    CHECK(s.image.at(112, 112) == s.slice_index);
  }
}

TEST_CASE("crop_or_pad") {
  Image2D img(300, 200);
  for (int r = 0; r < 300; ++r)
    for (int c = 0; c < 200; ++c) img.at(r, c) = r * 1000 + c + 1;
  const auto out = crop_or_pad(img);
  CHECK(out.rows == 224);
  CHECK(out.cols == 224);
  CHECK(out.at(0, 12) == 38 * 1000 + 1);     // first kept row is 38
  CHECK(out.at(223, 12) == 261 * 1000 + 1);  // last kept row is 261
  CHECK(out.at(0, 11) == 0.0);
  CHECK(out.at(0, 211) == 200.0 + 38000);
  CHECK(out.at(0, 212) == 0.0);

  const auto one = crop_or_pad(Image2D(1, 1, 7.0));
  CHECK(one.at(112, 112) == 7.0);
  double sum = 0;
  for (double x : one.data) sum += x;
  CHECK(sum == 7.0);

  CHECK(crop_or_pad(out) == out);
  CHECK_THROWS(crop_or_pad(Image2D()));
}

TEST_CASE("image io round trips") {
  const auto dir = testutil::scratch("imaging_io");
  PhantomParams p;
  p.dims = {6, 5, 4};
  const auto v = synthesize_volume(p, 3).volume;
  write_volume(dir / "v.cdvl", v);
  const auto back = read_volume(dir / "v.cdvl");
  CHECK(back.dims == v.dims);
  CHECK(back.spacing_mm == v.spacing_mm);
  CHECK(back.orientation == v.orientation);
  for (size_t i = 0; i < v.voxels(); ++i) CHECK(back.data[i] == static_cast<double>(static_cast<float>(v.data[i])));

  {
    std::ofstream(dir / "junk.cdvl") << "nope";
  }
  CHECK_THROWS(read_volume(dir / "junk.cdvl"));
}

TEST_CASE("generic images") {
  double la = 0, lb = 0;
  const auto a = synthesize_generic_image(4, &la), b = synthesize_generic_image(4, &lb);
  CHECK(a == b);
  CHECK(la == lb);
  CHECK(la >= 2);
  CHECK(a.rows == kSliceSize);
  auto z = a;
  standardize_image(z);
  double s = 0;
  for (double x : z.data) s += x;
  CHECK(std::abs(s / z.size()) < 1e-9);
  const auto pooled = average_pool(Image2D(4, 4, 2.0), 2);
  CHECK(pooled == Image2D(2, 2, 2.0));
}
