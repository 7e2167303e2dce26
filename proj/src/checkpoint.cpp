#include "cdssl/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>

namespace cdssl {

namespace {

constexpr char kArchiveMagic[4] = {'C', 'D', 'A', 'R'};
constexpr uint32_t kArchiveVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated archive");
  return v;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

nlohmann::json canonicalize(const nlohmann::json& j) {
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = canonicalize(it.value());
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : j) out.push_back(canonicalize(v));
    return out;
  }
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (std::isfinite(v) && v == std::trunc(v) && std::abs(v) < 9.0e15) return static_cast<int64_t>(v);
  }
  if (j.is_number_unsigned()) {
    const auto v = j.get<uint64_t>();
    if (v <= static_cast<uint64_t>(INT64_MAX)) return static_cast<int64_t>(v);
  }
  return j;
}

std::string canonical_dump(const nlohmann::json& j) { return canonicalize(j).dump(); }

std::string config_hash(const nlohmann::json& j) { return sha256_hex(canonical_dump(j)); }

void write_archive(const std::filesystem::path& path, const Archive& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write archive: " + path.string());
    out.write(kArchiveMagic, 4);
    put(out, kArchiveVersion);
    put(out, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, bytes] : entries) {
      put(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put(out, static_cast<uint64_t>(bytes.size()));
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw std::runtime_error("failed writing archive: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive not found: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kArchiveMagic, 4) != 0) throw std::runtime_error("not an archive: " + path.string());
  if (get<uint32_t>(in) != kArchiveVersion) throw std::runtime_error("unsupported archive version: " + path.string());
  const uint32_t count = get<uint32_t>(in);
  Archive a;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name(get<uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::string bytes(get<uint64_t>(in), '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("truncated archive: " + path.string());
    a.emplace(std::move(name), std::move(bytes));
  }
  return a;
}

nlohmann::json to_json(const StageDescriptor& s) {
  return {{"stage_name", s.stage_name}, {"method", s.method},       {"dataset_tag", s.dataset_tag},
          {"seed", s.seed},             {"config_hash", s.config_hash}, {"optimizer", s.optimizer}};
}

StageDescriptor stage_from_json(const nlohmann::json& j) {
  StageDescriptor s;
  s.stage_name = j.at("stage_name").get<std::string>();
  s.method = j.at("method").get<std::string>();
  s.dataset_tag = j.at("dataset_tag").get<std::string>();
  s.seed = j.at("seed").get<uint64_t>();
  s.config_hash = j.at("config_hash").get<std::string>();
  s.optimizer = j.value("optimizer", "");
  return s;
}

std::vector<std::string> Checkpoint::provenance_names() const {
  std::vector<std::string> out;
  for (const auto& s : provenance) out.push_back(s.stage_name);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (c.provenance.empty()) throw std::invalid_argument("checkpoint provenance must be non-empty");
  if (!std::isfinite(c.val_loss)) throw std::invalid_argument("checkpoint val_loss must be finite");
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& s : c.provenance) prov.push_back(to_json(s));
  nlohmann::json meta = {{"kind", c.kind},
                         {"method", c.method},
                         {"seed", c.seed},
                         {"config_hash", c.config_hash},
                         {"encoder", nn::to_json(c.encoder_spec)},
                         {"provenance", prov},
                         {"val_loss", c.val_loss},
                         {"val_history", c.val_history},
                         {"extra", c.extra}};
  Archive a;
  a["meta.json"] = meta.dump(2);
  a["encoder.bin"] = nn::serialize_params(c.encoder_weights);
  if (!c.projection_weights.empty()) a["projection.bin"] = nn::serialize_params(c.projection_weights);
  if (!c.head_weights.empty()) a["head.bin"] = nn::serialize_params(c.head_weights);
  write_archive(path, a);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash) {
  const Archive a = read_archive(path);
  auto entry = [&](const char* name) -> const std::string& {
    auto it = a.find(name);
    if (it == a.end()) throw std::runtime_error(std::string("checkpoint is missing entry '") + name + "': " + path.string());
    return it->second;
  };
  const auto meta = nlohmann::json::parse(entry("meta.json"));
  Checkpoint c;
  c.kind = meta.at("kind").get<std::string>();
  c.method = meta.at("method").get<std::string>();
  c.seed = meta.at("seed").get<uint64_t>();
  c.config_hash = meta.at("config_hash").get<std::string>();
  if (expected_hash && *expected_hash != c.config_hash)
    throw std::runtime_error("config hash mismatch for " + path.string() + ": artifact has " + c.config_hash +
                             ", expected " + *expected_hash);
  c.encoder_spec = nn::encoder_spec_from_json(meta.at("encoder"));
  for (const auto& s : meta.at("provenance")) c.provenance.push_back(stage_from_json(s));
  c.val_loss = meta.at("val_loss").get<double>();
  c.val_history = meta.at("val_history").get<std::vector<double>>();
  c.extra = meta.at("extra");
  c.encoder_weights = nn::deserialize_params(entry("encoder.bin"));
  if (a.count("projection.bin")) c.projection_weights = nn::deserialize_params(a.at("projection.bin"));
  if (a.count("head.bin")) c.head_weights = nn::deserialize_params(a.at("head.bin"));
  return c;
}

}  // namespace cdssl
