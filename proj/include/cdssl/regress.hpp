#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdssl/checkpoint.hpp"
#include "cdssl/imaging.hpp"
#include "cdssl/nn.hpp"
#include "cdssl/ssl.hpp"

namespace cdssl::regress {

enum class InitKind { random, supervised_generic, ssl_checkpoint };

std::string to_string(InitKind k);

struct InitScheme {
  InitKind kind = InitKind::random;
  std::optional<Checkpoint> checkpoint;
};

struct FinetuneConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  int batch_size = 16;
  double head_init_sd = 0.01;
};

nlohmann::json to_json(const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
};

struct RegressorModel {
  nn::Encoder encoder;
  nn::Linear head;
  std::vector<EpochLog> training_log;  // entry 0 is the untrained state
  bool empty_trained = false;          // set when fine-tuning ran zero epochs
  int best_epoch = 0;
  double best_val_mse = 0.0;
  std::vector<StageDescriptor> provenance;

  /// Scalar output for one model-resolution image.
  double forward(const Image2D& model_image) const;
};

/// Encoder initialization for fine-tuning. A checkpoint's weights are copied
/// bitwise; the random scheme draws weights from `seed`. A 3-channel
/// checkpoint stem stays 3-channel and single-channel data is replicated.
nn::Encoder init_backbone(const InitScheme& scheme, const nn::EncoderSpec& spec, uint64_t seed);

/// Full fine-tuning under MSE. The head bias starts at the mean training
/// label; the epoch with minimum validation MSE is kept (training MSE when
/// no validation data is given).
RegressorModel finetune_regressor(nn::Encoder encoder, const ssl::SliceSet& train, const ssl::SliceSet& val,
                                  const FinetuneConfig& cfg, uint64_t seed,
                                  std::vector<StageDescriptor> provenance = {},
                                  const std::string& stage_hash = {});

/// One prediction per standardized 224x224 slice.
std::vector<double> predict(const RegressorModel& model, const std::vector<imaging::SliceImage>& images);

/// One prediction per model-resolution image.
std::vector<double> predict_inputs(const RegressorModel& model, const std::vector<Image2D>& images);

/// Subject-level prediction = mean over that subject's slices; keyed by id.
std::map<std::string, double> aggregate_by_subject(const std::vector<std::string>& ids,
                                                   const std::vector<double>& predictions);

/// MSE of a batch and its gradient w.r.t. the predictions.
double mse_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target, Eigen::VectorXd* grad = nullptr);

/// Label-supervised pretraining on a labeled generic corpus; the result is an
/// encoder checkpoint usable as a "supervised_generic" initialization.
Checkpoint pretrain_supervised(const std::optional<Checkpoint>& init, const nn::EncoderSpec& spec,
                               const ssl::SliceSet& train, const ssl::SliceSet& val, const FinetuneConfig& cfg,
                               const ssl::StageInfo& stage, uint64_t seed);

Checkpoint to_checkpoint(const RegressorModel& model, uint64_t seed, const std::string& config_hash);
RegressorModel from_checkpoint(const Checkpoint& ckpt);

}  // namespace cdssl::regress
