#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cdssl/common.hpp"

namespace cdssl::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Param {
  std::string name;
  std::vector<int> shape;
  VectorXd value;
  VectorXd grad;

  Param() = default;
  Param(std::string n, std::vector<int> s);
  Eigen::Index size() const { return value.size(); }
};

/// Channel-major (c, h, w) feature tensor.
struct Tensor {
  int c = 0, h = 0, w = 0;
  VectorXd data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), data(VectorXd::Zero(static_cast<Eigen::Index>(c_) * h_ * w_)) {}
  double& at(int ch, int y, int x) { return data[(static_cast<Eigen::Index>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const { return data[(static_cast<Eigen::Index>(ch) * h + y) * w + x]; }
};

/// 3x3 / stride-2 / pad-1 convolutional encoder with ReLU after every block
/// and global average pooling. The fixed stem average-pools a 224x224 slice
/// by `input_pool` before the first convolution.
struct EncoderSpec {
  int in_channels = 1;
  int input_size = 224;
  int input_pool = 4;
  std::vector<int> widths{8, 16, 32};

  int model_input_size() const { return input_size / input_pool; }
  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

nlohmann::json to_json(const EncoderSpec& s);
EncoderSpec encoder_spec_from_json(const nlohmann::json& j);

class Encoder {
 public:
  struct Trace {
    std::vector<Tensor> inputs;  // input of each conv block
    std::vector<Tensor> acts;    // post-ReLU output of each conv block
  };

  Encoder() = default;
  Encoder(const EncoderSpec& spec, uint64_t seed);

  const EncoderSpec& spec() const { return spec_; }
  int feature_dim() const { return spec_.widths.back(); }
  int num_layers() const { return static_cast<int>(spec_.widths.size()); }

  /// "conv1".."convN"; every tag names a spatial block.
  std::vector<std::string> layer_tags() const;
  int layer_index(const std::string& tag) const;  // -1 when unknown

  /// Applies the fixed pooling stem to a standardized slice.
  Image2D stem(const Image2D& slice) const;

  /// Model-resolution image to input tensor; a single-channel image is
  /// replicated when the encoder expects more channels.
  Tensor prepare_input(const Image2D& model_image) const;

  VectorXd forward(const Tensor& x, Trace* trace = nullptr) const;

  /// Backpropagates dL/dfeatures. Parameter gradients accumulate into
  /// params().grad unless `accumulate` is false; per-block activation
  /// gradients are written to `act_grads` when given.
  void backward(const Trace& trace, const VectorXd& dfeat, std::vector<Tensor>* act_grads = nullptr,
                bool accumulate = true);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

 private:
  EncoderSpec spec_;
  std::vector<Param> params_;  // conv{i}.weight (cout x cin*9), conv{i}.bias
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, const std::string& name, uint64_t seed, double init_sd = -1.0);

  VectorXd forward(const VectorXd& x) const;
  /// Accumulates gradients; returns dL/dx.
  VectorXd backward(const VectorXd& x, const VectorXd& dy);

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  Param& weight() { return params_[0]; }
  Param& bias() { return params_[1]; }
  const Param& weight() const { return params_[0]; }
  const Param& bias() const { return params_[1]; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

 private:
  int in_ = 0, out_ = 0;
  std::vector<Param> params_;  // weight (out x in, row-major), bias
};

/// Linear -> ReLU -> Linear projection head.
class ProjectionHead {
 public:
  struct Cache {
    VectorXd hidden_pre;
    VectorXd hidden;
  };

  ProjectionHead() = default;
  ProjectionHead(int in, int hidden, int out, uint64_t seed);

  VectorXd forward(const VectorXd& x, Cache* cache = nullptr) const;
  VectorXd backward(const VectorXd& x, const Cache& cache, const VectorXd& dy);

  std::vector<Param*> param_ptrs();
  std::vector<Param> snapshot() const;
  void restore(const std::vector<Param>& params);
  int out_dim() const { return second_.out_dim(); }

 private:
  Linear first_, second_;
};

/// Adam with bias correction; state is keyed by position in the parameter list.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<Param*>& params);
  double learning_rate() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<VectorXd> m_, v_;
};

std::vector<Param*> param_ptrs(std::vector<Param>& params);
void zero_grad(const std::vector<Param*>& params);

// Weight blob: u32 count, then per tensor u32 name length, name, u32 rank,
// rank x u32 dims, f64 values (little-endian).
std::string serialize_params(const std::vector<Param>& params);
std::vector<Param> deserialize_params(const std::string& blob);

/// Copies values into `dst`, matching by position. Throws naming the first
/// tensor whose name or shape differs.
void load_params(std::vector<Param>& dst, const std::vector<Param>& src);

bool all_finite(const std::vector<Param>& params);

}  // namespace cdssl::nn
