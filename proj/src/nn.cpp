#include "cdssl/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "cdssl/imaging.hpp"

namespace cdssl::nn {

namespace {

int conv_out(int n) { return (n + 2 - 3) / 2 + 1; }

RowMatrix im2col(const Tensor& x, int ho, int wo) {
  RowMatrix col(static_cast<Eigen::Index>(x.c) * 9, static_cast<Eigen::Index>(ho) * wo);
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col.row((ci * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * 2 - 1 + ky;
          double* row = dst + static_cast<size_t>(oy) * wo;
          if (iy < 0 || iy >= x.h) {
            std::fill(row, row + wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * 2 - 1 + kx;
            row[ox] = (ix < 0 || ix >= x.w) ? 0.0 : x.at(ci, iy, ix);
          }
        }
      }
    }
  }
  return col;
}

void col2im_add(const RowMatrix& dcol, Tensor& dx, int ho, int wo) {
  for (int ci = 0; ci < dx.c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = dcol.row((ci * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * 2 - 1 + ky;
          if (iy < 0 || iy >= dx.h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * 2 - 1 + kx;
            if (ix >= 0 && ix < dx.w) dx.at(ci, iy, ix) += src[static_cast<size_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

void he_init(Param& p, int fan_in, Rng& rng, double sd = -1.0) {
  const double s = sd > 0.0 ? sd : std::sqrt(2.0 / fan_in);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value[i] = normal(rng, 0.0, s);
}

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("truncated weight blob");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

Param::Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
  Eigen::Index count = 1;
  for (int d : shape) count *= d;
  value = VectorXd::Zero(count);
  grad = VectorXd::Zero(count);
}

nlohmann::json to_json(const EncoderSpec& s) {
  return {{"in_channels", s.in_channels}, {"input_size", s.input_size}, {"input_pool", s.input_pool}, {"widths", s.widths}};
}

EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.input_size = j.value("input_size", s.input_size);
  s.input_pool = j.value("input_pool", s.input_pool);
  if (j.contains("widths")) s.widths = j.at("widths").get<std::vector<int>>();
  return s;
}

Encoder::Encoder(const EncoderSpec& spec, uint64_t seed) : spec_(spec) {
  if (spec.in_channels < 1 || spec.widths.empty() || spec.input_pool < 1 || spec.input_size % spec.input_pool)
    throw std::invalid_argument("invalid encoder spec");
  Rng rng(seed);
  int cin = spec.in_channels;
  for (size_t l = 0; l < spec.widths.size(); ++l) {
    const int cout = spec.widths[l];
    if (cout < 1) throw std::invalid_argument("encoder widths must be positive");
    const std::string base = "conv" + std::to_string(l + 1);
    Param w(base + ".weight", {cout, cin, 3, 3});
    he_init(w, cin * 9, rng);
    params_.push_back(std::move(w));
    params_.emplace_back(base + ".bias", std::vector<int>{cout});
    cin = cout;
  }
}

std::vector<std::string> Encoder::layer_tags() const {
  std::vector<std::string> tags;
  for (int l = 0; l < num_layers(); ++l) tags.push_back("conv" + std::to_string(l + 1));
  return tags;
}

int Encoder::layer_index(const std::string& tag) const {
  const auto tags = layer_tags();
  for (size_t i = 0; i < tags.size(); ++i)
    if (tags[i] == tag) return static_cast<int>(i);
  return -1;
}

Image2D Encoder::stem(const Image2D& slice) const {
  if (slice.rows != spec_.input_size || slice.cols != spec_.input_size)
    throw std::invalid_argument("encoder expects " + std::to_string(spec_.input_size) + "x" +
                                std::to_string(spec_.input_size) + " slices, got " + std::to_string(slice.rows) +
                                "x" + std::to_string(slice.cols));
  return imaging::average_pool(slice, spec_.input_pool);
}

Tensor Encoder::prepare_input(const Image2D& img) const {
  const int n = spec_.model_input_size();
  if (img.rows != n || img.cols != n)
    throw std::invalid_argument("model input must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                                std::to_string(img.rows) + "x" + std::to_string(img.cols));
  Tensor t(spec_.in_channels, n, n);
  for (int c = 0; c < spec_.in_channels; ++c)
    std::memcpy(t.data.data() + static_cast<size_t>(c) * n * n, img.data.data(), sizeof(double) * n * n);
  return t;
}

VectorXd Encoder::forward(const Tensor& x, Trace* trace) const {
  if (x.c != spec_.in_channels) throw std::invalid_argument("input channel count does not match the encoder stem");
  if (trace) {
    trace->inputs.clear();
    trace->acts.clear();
  }
  Tensor cur = x;
  for (int l = 0; l < num_layers(); ++l) {
    const int cout = spec_.widths[l];
    const int ho = conv_out(cur.h), wo = conv_out(cur.w);
    const RowMatrix col = im2col(cur, ho, wo);
    Eigen::Map<const RowMatrix> W(params_[2 * l].value.data(), cout, cur.c * 9);
    Tensor out(cout, ho, wo);
    Eigen::Map<RowMatrix> o(out.data.data(), cout, static_cast<Eigen::Index>(ho) * wo);
    o.noalias() = W * col;
    o.colwise() += params_[2 * l + 1].value;
    out.data = out.data.cwiseMax(0.0);
    if (trace) trace->inputs.push_back(std::move(cur));
    cur = std::move(out);
    if (trace) trace->acts.push_back(cur);
  }
  const Eigen::Index p = static_cast<Eigen::Index>(cur.h) * cur.w;
  Eigen::Map<const RowMatrix> a(cur.data.data(), cur.c, p);
  return a.rowwise().mean();
}

void Encoder::backward(const Trace& trace, const VectorXd& dfeat, std::vector<Tensor>* act_grads, bool accumulate) {
  const int L = num_layers();
  if (static_cast<int>(trace.acts.size()) != L) throw std::invalid_argument("encoder trace is incomplete");
  if (act_grads) act_grads->assign(L, Tensor{});

  const Tensor& last = trace.acts.back();
  Tensor dact(last.c, last.h, last.w);
  {
    const Eigen::Index p = static_cast<Eigen::Index>(last.h) * last.w;
    Eigen::Map<RowMatrix> d(dact.data.data(), last.c, p);
    d = (dfeat / static_cast<double>(p)).replicate(1, p);
  }
  for (int l = L - 1; l >= 0; --l) {
    const Tensor& act = trace.acts[l];
    const Tensor& in = trace.inputs[l];
    if (act_grads) (*act_grads)[l] = dact;
    const int cout = act.c;
    const Eigen::Index p = static_cast<Eigen::Index>(act.h) * act.w;
    RowMatrix dpre = Eigen::Map<const RowMatrix>(dact.data.data(), cout, p);
    Eigen::Map<const RowMatrix> a(act.data.data(), cout, p);
    dpre = (a.array() > 0.0).select(dpre, 0.0);

    const bool need_dx = l > 0;
    if (!accumulate && !need_dx) break;
    const RowMatrix col = im2col(in, act.h, act.w);
    Eigen::Map<const RowMatrix> W(params_[2 * l].value.data(), cout, in.c * 9);
    if (accumulate) {
      Eigen::Map<RowMatrix> dW(params_[2 * l].grad.data(), cout, in.c * 9);
      dW.noalias() += dpre * col.transpose();
      params_[2 * l + 1].grad += dpre.rowwise().sum();
    }
    if (need_dx) {
      const RowMatrix dcol = W.transpose() * dpre;
      Tensor dx(in.c, in.h, in.w);
      col2im_add(dcol, dx, act.h, act.w);
      dact = std::move(dx);
    }
  }
}

Linear::Linear(int in, int out, const std::string& name, uint64_t seed, double init_sd) : in_(in), out_(out) {
  if (in < 1 || out < 1) throw std::invalid_argument("linear layer dimensions must be positive");
  Rng rng(seed);
  Param w(name + ".weight", {out, in});
  he_init(w, in, rng, init_sd);
  params_.push_back(std::move(w));
  params_.emplace_back(name + ".bias", std::vector<int>{out});
}

VectorXd Linear::forward(const VectorXd& x) const {
  Eigen::Map<const RowMatrix> W(params_[0].value.data(), out_, in_);
  return W * x + params_[1].value;
}

VectorXd Linear::backward(const VectorXd& x, const VectorXd& dy) {
  Eigen::Map<RowMatrix> dW(params_[0].grad.data(), out_, in_);
  dW.noalias() += dy * x.transpose();
  params_[1].grad += dy;
  Eigen::Map<const RowMatrix> W(params_[0].value.data(), out_, in_);
  return W.transpose() * dy;
}

ProjectionHead::ProjectionHead(int in, int hidden, int out, uint64_t seed)
    : first_(in, hidden, "proj.fc1", derive_seed(seed, 1)), second_(hidden, out, "proj.fc2", derive_seed(seed, 2)) {}

VectorXd ProjectionHead::forward(const VectorXd& x, Cache* cache) const {
  VectorXd pre = first_.forward(x);
  VectorXd h = pre.cwiseMax(0.0);
  VectorXd out = second_.forward(h);
  if (cache) {
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(h);
  }
  return out;
}

VectorXd ProjectionHead::backward(const VectorXd& x, const Cache& cache, const VectorXd& dy) {
  VectorXd dh = second_.backward(cache.hidden, dy);
  dh = (cache.hidden_pre.array() > 0.0).select(dh, 0.0);
  return first_.backward(x, dh);
}

std::vector<Param*> ProjectionHead::param_ptrs() {
  std::vector<Param*> out;
  for (auto& p : first_.params()) out.push_back(&p);
  for (auto& p : second_.params()) out.push_back(&p);
  return out;
}

std::vector<Param> ProjectionHead::snapshot() const {
  std::vector<Param> out = first_.params();
  out.insert(out.end(), second_.params().begin(), second_.params().end());
  return out;
}

void ProjectionHead::restore(const std::vector<Param>& params) {
  std::vector<Param> a(params.begin(), params.begin() + 2), b(params.begin() + 2, params.end());
  load_params(first_.params(), a);
  load_params(second_.params(), b);
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.empty()) {
    for (const Param* p : params) {
      m_.push_back(VectorXd::Zero(p->size()));
      v_.push_back(VectorXd::Zero(p->size()));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * p.grad;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * p.grad.cwiseAbs2();
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

std::vector<Param*> param_ptrs(std::vector<Param>& params) {
  std::vector<Param*> out;
  for (auto& p : params) out.push_back(&p);
  return out;
}

void zero_grad(const std::vector<Param*>& params) {
  for (Param* p : params) p->grad.setZero();
}

std::string serialize_params(const std::vector<Param>& params) {
  std::string out;
  put(out, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    put(out, static_cast<uint32_t>(p.name.size()));
    out += p.name;
    put(out, static_cast<uint32_t>(p.shape.size()));
    for (int d : p.shape) put(out, static_cast<uint32_t>(d));
    out.append(reinterpret_cast<const char*>(p.value.data()), sizeof(double) * static_cast<size_t>(p.value.size()));
  }
  return out;
}

std::vector<Param> deserialize_params(const std::string& blob) {
  size_t pos = 0;
  const uint32_t count = take<uint32_t>(blob, pos);
  std::vector<Param> out;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = take<uint32_t>(blob, pos);
    if (pos + len > blob.size()) throw std::runtime_error("truncated weight blob");
    std::string name = blob.substr(pos, len);
    pos += len;
    const uint32_t rank = take<uint32_t>(blob, pos);
    std::vector<int> shape;
    for (uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(take<uint32_t>(blob, pos)));
    Param p(std::move(name), std::move(shape));
    const size_t bytes = sizeof(double) * static_cast<size_t>(p.value.size());
    if (pos + bytes > blob.size()) throw std::runtime_error("truncated weight blob");
    std::memcpy(p.value.data(), blob.data() + pos, bytes);
    pos += bytes;
    out.push_back(std::move(p));
  }
  if (pos != blob.size()) throw std::runtime_error("trailing bytes in weight blob");
  return out;
}

void load_params(std::vector<Param>& dst, const std::vector<Param>& src) {
  const size_t n = std::min(dst.size(), src.size());
  for (size_t i = 0; i < n; ++i) {
    if (dst[i].name != src[i].name || dst[i].shape != src[i].shape) {
      auto dims = [](const std::vector<int>& s) {
        std::string out;
        for (size_t k = 0; k < s.size(); ++k) out += (k ? "x" : "") + std::to_string(s[k]);
        return out;
      };
      throw std::invalid_argument("shape mismatch at layer '" + dst[i].name + "': expected " + dims(dst[i].shape) +
                                  ", checkpoint has '" + src[i].name + "' " + dims(src[i].shape));
    }
  }
  if (dst.size() != src.size())
    throw std::invalid_argument("shape mismatch at layer '" +
                                (dst.size() > n ? dst[n].name : src[n].name) + "': tensor count differs (" +
                                std::to_string(dst.size()) + " vs " + std::to_string(src.size()) + ")");
  for (size_t i = 0; i < n; ++i) dst[i].value = src[i].value;
}

bool all_finite(const std::vector<Param>& params) {
  for (const auto& p : params)
    if (!p.value.allFinite()) return false;
  return true;
}

}  // namespace cdssl::nn
