#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdssl/cohort.hpp"
#include "cdssl/imaging.hpp"
#include "cdssl/nn.hpp"
#include "cdssl/regress.hpp"
#include "cdssl/ssl.hpp"

namespace cdssl::pipeline {

struct StudySpec {
  std::string name;
  cohort::StudyRoles roles;
  int subjects = 0;
};

struct DataConfig {
  uint64_t seed = 7;  // cohort, phantoms and splits; training seeds are separate
  imaging::PhantomParams phantom;
  std::vector<StudySpec> studies;
  int generic_images = 400;
  double generic_val_fraction = 0.1;
  double amyloid_positive_rate = 0.9;
  double missing_field_rate = 0.02;
  int mmse_min = 19;
  imaging::SliceMode ssl_slicing = imaging::SliceMode::five;
  imaging::SliceMode finetune_slicing = imaging::SliceMode::center;
  bool write_volumes = false;
};

/// One pretraining stage. dataset is "generic" or "indomain"; method is an
/// SSL method or "supervised" (label regression on the generic corpus).
struct StageConfig {
  std::string name;
  std::string dataset;
  std::string method;
  ssl::SslConfig ssl;
  regress::FinetuneConfig supervised;

  bool is_supervised() const { return method == "supervised"; }
};

struct EvalConfig {
  int histogram_bins = 20;
  int saliency_images = 2;
  std::string saliency_layer;  // empty = last spatial block
};

struct ExperimentConfig {
  uint64_t seed = 1;
  std::string output_dir = "run";
  int threads = 1;
  DataConfig data;
  cohort::SplitConfig splits;
  nn::EncoderSpec encoder;
  std::vector<StageConfig> stages;
  regress::FinetuneConfig finetune;
  EvalConfig eval;

  regress::InitKind init_kind() const;
  /// Stage names in provenance order.
  std::vector<std::string> stage_names() const;
};

/// Default studies: two labeled fine-tune studies, one unlabeled SSL-only
/// study and one out-study test set.
std::vector<StudySpec> default_studies();

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Hash of the canonical serialized config.
std::string full_config_hash(const ExperimentConfig& c);

}  // namespace cdssl::pipeline
