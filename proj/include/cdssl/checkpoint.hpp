#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdssl/nn.hpp"

namespace cdssl {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

/// Sorted keys, integral floats folded to integers, then compact dump.
nlohmann::json canonicalize(const nlohmann::json& j);
std::string canonical_dump(const nlohmann::json& j);
std::string config_hash(const nlohmann::json& j);

// Named-entry archive: "CDAR" magic, u32 version, u32 entry count, then per
// entry u32 name length, name, u64 size, bytes.
using Archive = std::map<std::string, std::string>;
void write_archive(const std::filesystem::path& path, const Archive& entries);
Archive read_archive(const std::filesystem::path& path);

struct StageDescriptor {
  std::string stage_name;   // e.g. "generic-blt", "indomain-simclr", "finetune"
  std::string method;       // simclr | barlow_twins | swav | supervised | regression
  std::string dataset_tag;  // generic | indomain | labeled
  uint64_t seed = 0;
  std::string config_hash;
  std::string optimizer;

  friend bool operator==(const StageDescriptor&, const StageDescriptor&) = default;
};

nlohmann::json to_json(const StageDescriptor& s);
StageDescriptor stage_from_json(const nlohmann::json& j);

/// Encoder weights plus an ordered provenance chain. Regressor checkpoints
/// additionally carry the head.
struct Checkpoint {
  std::string kind = "encoder";  // encoder | regressor
  std::string method;
  uint64_t seed = 0;
  std::string config_hash;
  nn::EncoderSpec encoder_spec;
  std::vector<nn::Param> encoder_weights;
  std::vector<nn::Param> projection_weights;
  std::vector<nn::Param> head_weights;
  std::vector<StageDescriptor> provenance;
  double val_loss = 0.0;
  std::vector<double> val_history;
  nlohmann::json extra = nlohmann::json::object();

  std::vector<std::string> provenance_names() const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Refuses to load when `expected_hash` is given and differs from the stored
/// config hash.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_hash = std::nullopt);

}  // namespace cdssl
