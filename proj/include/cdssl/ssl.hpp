#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdssl/augment.hpp"
#include "cdssl/checkpoint.hpp"
#include "cdssl/losses.hpp"
#include "cdssl/nn.hpp"

namespace cdssl::ssl {

enum class Method { simclr, barlow_twins, swav };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
/// Short tag used in stage names: simclr, blt, swav.
std::string method_tag(Method m);

struct SslConfig {
  Method method = Method::simclr;
  double temperature = 0.5;        // NT-Xent temperature
  double lambda = 5e-3;            // Barlow Twins off-diagonal weight
  int prototypes = 32;             // SwAV
  double epsilon = 0.05;           // SwAV Sinkhorn entropy
  int sinkhorn_iters = 3;          // SwAV
  double swav_temperature = 0.1;   // SwAV softmax temperature
  int projection_dim = 32;
  int hidden_dim = 64;
  std::string optimizer = "adam";
  double learning_rate = 1e-4;
  int epochs = 10;
  int batch_size = 32;
  AugmentPolicy augment;

  /// Throws when a method-specific field is out of range.
  void validate() const;
};

nlohmann::json to_json(const SslConfig& c);
SslConfig ssl_config_from_json(const nlohmann::json& j);

/// Images at model resolution (after the encoder stem) with optional labels.
struct SliceSet {
  std::vector<Image2D> images;
  std::vector<double> labels;
  std::vector<std::string> ids;

  size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

struct StageInfo {
  std::string stage_name;
  std::string dataset_tag;
  std::string config_hash;
};

/// Loss of one batch of view pairs with gradients w.r.t. the embeddings.
LossResult batch_loss(const SslConfig& cfg, const Eigen::MatrixXd& z_a, const Eigen::MatrixXd& z_b,
                      const Eigen::MatrixXd& prototypes);

/// Optional per-epoch hook: (epoch, train_loss, val_loss).
using EpochCallback = std::function<void(int, double, double)>;

/// Trains encoder + projection head with the configured objective and keeps
/// the epoch with minimum validation loss. With epochs = 0 the encoder is
/// returned unchanged. The new stage is appended to the provenance chain.
Checkpoint pretrain(const std::optional<Checkpoint>& init, const nn::EncoderSpec& spec, const SliceSet& train,
                    const SliceSet& val, const SslConfig& cfg, const StageInfo& stage, uint64_t seed,
                    const EpochCallback& on_epoch = {}, int threads = 1);

/// Builds an encoder from a checkpoint's spec and weights.
nn::Encoder encoder_from_checkpoint(const Checkpoint& ckpt);

/// Runs fn(i) for i in [0, n) over up to `threads` workers.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

}  // namespace cdssl::ssl
