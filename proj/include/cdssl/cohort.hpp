#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cdssl::cohort {

enum class Stage { prodromal, mild, other };

struct SubjectRecord {
  std::string subject_id;
  std::string study;
  std::string image_ref;
  double cdr_sb_baseline = 0.0;
  std::optional<double> cdr_sb_month12;
  std::optional<int> mmse;
  std::optional<bool> amyloid_positive;
  std::optional<Stage> stage;

  friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

struct StudyRoles {
  bool ssl = false;
  bool finetune = false;
  bool in_study_test = false;
  bool out_study_test = false;

  friend bool operator==(const StudyRoles&, const StudyRoles&) = default;
};

struct DatasetManifest {
  std::vector<SubjectRecord> records;
  std::map<std::string, StudyRoles> study_roles;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct FilterReport {
  int input = 0;
  int retained = 0;
  int missing_field = 0;  // excluded because a filter field was absent
  int failed_criteria = 0;
};

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;

  friend bool operator==(const Fold&, const Fold&) = default;
};

struct SplitAssignment {
  std::vector<std::string> ssl_train;
  std::vector<std::string> ssl_val;
  std::vector<Fold> ft_folds;
  std::vector<std::string> ft_test_in_study;
  std::map<std::string, std::vector<std::string>> ft_test_out_study;
  uint64_t seed = 0;
  std::vector<std::string> warnings;

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

struct SplitConfig {
  double ssl_val_fraction = 0.1;
  double test_fraction = 0.3;
  int folds = 3;
  bool exclude_finetune_from_ssl = true;
};

struct StudyCount {
  int subjects = 0;
  int labeled = 0;
};

struct ManifestStats {
  std::map<std::string, StudyCount> per_study;
  int total_subjects = 0;
  long long center_slice_images = 0;
  long long five_slice_images = 0;
};

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

/// Validates one record against the schema; throws SchemaError.
void validate_record(const SubjectRecord& r, int line);

/// Reads a JSON-lines manifest. An optional first line of the form
/// {"study_roles": {...}} declares the study roles; every other line is one
/// SubjectRecord. Malformed lines raise SchemaError with line and field.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

nlohmann::json record_to_json(const SubjectRecord& r);
SubjectRecord record_from_json(const nlohmann::json& j, int line);

/// Keeps amyloid-positive, MMSE > 20, prodromal/mild records. Records missing
/// any of the three fields are excluded and counted separately.
DatasetManifest filter_cohort(const DatasetManifest& m, FilterReport* report = nullptr);

/// Pure function of (manifest, config, seed). The fine-tune pool is the
/// filtered, labeled subjects of fine-tune studies; the SSL pool is every
/// subject of an SSL study outside that pool.
SplitAssignment build_splits(const DatasetManifest& m, const SplitConfig& cfg, uint64_t seed);

ManifestStats manifest_stats(const DatasetManifest& m);

nlohmann::json to_json(const SplitAssignment& s);
SplitAssignment splits_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ManifestStats& s);

}  // namespace cdssl::cohort
