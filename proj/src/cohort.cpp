#include "cdssl/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cdssl/common.hpp"

namespace cdssl::cohort {

namespace {

using nlohmann::json;

const std::set<std::string> kRecordFields = {"subject_id",      "study",          "image_ref",
                                             "cdr_sb_baseline", "cdr_sb_month12", "mmse",
                                             "amyloid_positive", "stage"};

[[noreturn]] void schema_fail(int line, const std::string& field, const std::string& what) {
  std::ostringstream os;
  os << "manifest line " << line << ": field '" << field << "' " << what;
  throw SchemaError(os.str(), line, field);
}

const json& require_field(const json& j, const char* name, int line) {
  auto it = j.find(name);
  if (it == j.end()) schema_fail(line, name, "is missing");
  return *it;
}

std::string require_string(const json& j, const char* name, int line) {
  const json& v = require_field(j, name, line);
  if (!v.is_string()) schema_fail(line, name, "must be a string");
  auto s = v.get<std::string>();
  if (s.empty()) schema_fail(line, name, "must be non-empty");
  return s;
}

std::optional<double> optional_score(const json& j, const char* name, int line) {
  const json& v = require_field(j, name, line);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) schema_fail(line, name, "must be a number or null");
  return v.get<double>();
}

StudyRoles roles_from_json(const json& j, const std::string& study, int line) {
  if (!j.is_object()) schema_fail(line, "study_roles." + study, "must be an object");
  StudyRoles r;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_boolean()) schema_fail(line, "study_roles." + study + "." + it.key(), "must be boolean");
    const bool b = it.value().get<bool>();
    if (it.key() == "ssl") r.ssl = b;
    else if (it.key() == "finetune") r.finetune = b;
    else if (it.key() == "in_study_test") r.in_study_test = b;
    else if (it.key() == "out_study_test") r.out_study_test = b;
    else schema_fail(line, "study_roles." + study + "." + it.key(), "is not a known role");
  }
  if (r.out_study_test && (r.ssl || r.finetune))
    schema_fail(line, "study_roles." + study, "out-study test studies cannot carry ssl or finetune roles");
  return r;
}

json roles_to_json(const StudyRoles& r) {
  return {{"ssl", r.ssl},
          {"finetune", r.finetune},
          {"in_study_test", r.in_study_test},
          {"out_study_test", r.out_study_test}};
}

std::vector<std::string> sorted_ids(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

std::string to_string(Stage s) {
  switch (s) {
    case Stage::prodromal: return "prodromal";
    case Stage::mild: return "mild";
    case Stage::other: return "other";
  }
  return "other";
}

Stage stage_from_string(const std::string& s) {
  if (s == "prodromal") return Stage::prodromal;
  if (s == "mild") return Stage::mild;
  if (s == "other") return Stage::other;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

void validate_record(const SubjectRecord& r, int line) {
  if (r.subject_id.empty()) schema_fail(line, "subject_id", "must be non-empty");
  if (r.study.empty()) schema_fail(line, "study", "must be non-empty");
  if (r.image_ref.empty()) schema_fail(line, "image_ref", "must be non-empty");
  auto in_range = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 18.0; };
  if (!in_range(r.cdr_sb_baseline)) schema_fail(line, "cdr_sb_baseline", "must lie in [0,18]");
  if (r.cdr_sb_month12 && !in_range(*r.cdr_sb_month12)) schema_fail(line, "cdr_sb_month12", "must lie in [0,18]");
  if (r.mmse && (*r.mmse < 0 || *r.mmse > 30)) schema_fail(line, "mmse", "must lie in [0,30]");
}

SubjectRecord record_from_json(const json& j, int line) {
  if (!j.is_object()) schema_fail(line, "<record>", "must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kRecordFields.count(it.key())) schema_fail(line, it.key(), "is not part of the schema");

  SubjectRecord r;
  r.subject_id = require_string(j, "subject_id", line);
  r.study = require_string(j, "study", line);
  r.image_ref = require_string(j, "image_ref", line);

  const json& base = require_field(j, "cdr_sb_baseline", line);
  if (!base.is_number()) schema_fail(line, "cdr_sb_baseline", "must be a number");
  r.cdr_sb_baseline = base.get<double>();
  r.cdr_sb_month12 = optional_score(j, "cdr_sb_month12", line);

  const json& mmse = require_field(j, "mmse", line);
  if (!mmse.is_null()) {
    if (!mmse.is_number_integer()) schema_fail(line, "mmse", "must be an integer or null");
    r.mmse = mmse.get<int>();
  }
  const json& amy = require_field(j, "amyloid_positive", line);
  if (!amy.is_null()) {
    if (!amy.is_boolean()) schema_fail(line, "amyloid_positive", "must be a boolean or null");
    r.amyloid_positive = amy.get<bool>();
  }
  const json& st = require_field(j, "stage", line);
  if (!st.is_null()) {
    if (!st.is_string()) schema_fail(line, "stage", "must be a string or null");
    try {
      r.stage = stage_from_string(st.get<std::string>());
    } catch (const std::invalid_argument&) {
      schema_fail(line, "stage", "must be one of prodromal, mild, other");
    }
  }
  validate_record(r, line);
  return r;
}

json record_to_json(const SubjectRecord& r) {
  json j;
  j["subject_id"] = r.subject_id;
  j["study"] = r.study;
  j["image_ref"] = r.image_ref;
  j["cdr_sb_baseline"] = r.cdr_sb_baseline;
  j["cdr_sb_month12"] = r.cdr_sb_month12 ? json(*r.cdr_sb_month12) : json(nullptr);
  j["mmse"] = r.mmse ? json(*r.mmse) : json(nullptr);
  j["amyloid_positive"] = r.amyloid_positive ? json(*r.amyloid_positive) : json(nullptr);
  j["stage"] = r.stage ? json(to_string(*r.stage)) : json(nullptr);
  return j;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest not found: " + path.string());

  DatasetManifest m;
  std::set<std::string> seen;
  std::string text;
  int line = 0;
  bool saw_record = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      schema_fail(line, "<json>", std::string("is not valid JSON: ") + e.what());
    }
    if (j.is_object() && j.size() == 1 && j.contains("study_roles")) {
      if (saw_record) schema_fail(line, "study_roles", "must precede all records");
      const json& roles = j["study_roles"];
      if (!roles.is_object()) schema_fail(line, "study_roles", "must be an object");
      for (auto it = roles.begin(); it != roles.end(); ++it)
        m.study_roles[it.key()] = roles_from_json(it.value(), it.key(), line);
      continue;
    }
    saw_record = true;
    SubjectRecord r = record_from_json(j, line);
    if (!m.study_roles.empty() && !m.study_roles.count(r.study))
      schema_fail(line, "study", "names undeclared study '" + r.study + "'");
    if (!seen.insert(r.subject_id).second)
      schema_fail(line, "subject_id", "duplicate subject_id '" + r.subject_id + "'");
    m.records.push_back(std::move(r));
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  if (!m.study_roles.empty()) {
    json roles = json::object();
    for (const auto& [study, r] : m.study_roles) roles[study] = roles_to_json(r);
    out << json{{"study_roles", roles}}.dump() << '\n';
  }
  for (const auto& r : m.records) out << record_to_json(r).dump() << '\n';
}

DatasetManifest filter_cohort(const DatasetManifest& m, FilterReport* report) {
  DatasetManifest out;
  out.study_roles = m.study_roles;
  FilterReport rep;
  rep.input = static_cast<int>(m.records.size());
  for (const auto& r : m.records) {
    if (!r.amyloid_positive || !r.mmse || !r.stage) {
      ++rep.missing_field;
      continue;
    }
    const bool keep = *r.amyloid_positive && *r.mmse > 20 &&
                      (*r.stage == Stage::prodromal || *r.stage == Stage::mild);
    if (!keep) {
      ++rep.failed_criteria;
      continue;
    }
    out.records.push_back(r);
  }
  rep.retained = static_cast<int>(out.records.size());
  if (report) *report = rep;
  return out;
}

SplitAssignment build_splits(const DatasetManifest& m, const SplitConfig& cfg, uint64_t seed) {
  if (cfg.folds < 1) throw std::invalid_argument("folds must be >= 1");
  SplitAssignment out;
  out.seed = seed;

  auto roles_of = [&](const std::string& study) {
    auto it = m.study_roles.find(study);
    return it == m.study_roles.end() ? StudyRoles{} : it->second;
  };

  // Pools.
  DatasetManifest filtered = filter_cohort(m);
  std::vector<const SubjectRecord*> ft_pool;
  std::set<std::string> ft_ids;
  for (const auto& r : filtered.records) {
    const auto roles = roles_of(r.study);
    if (roles.finetune && r.cdr_sb_month12) {
      ft_pool.push_back(&r);
      ft_ids.insert(r.subject_id);
    } else if (roles.out_study_test && r.cdr_sb_month12) {
      out.ft_test_out_study[r.study].push_back(r.subject_id);
    }
  }
  for (auto& [study, ids] : out.ft_test_out_study) ids = sorted_ids(ids);

  std::vector<std::string> ssl_pool;
  for (const auto& r : m.records) {
    if (!roles_of(r.study).ssl) continue;
    if (cfg.exclude_finetune_from_ssl && ft_ids.count(r.subject_id)) continue;
    ssl_pool.push_back(r.subject_id);
  }
  std::sort(ssl_pool.begin(), ssl_pool.end());
  std::sort(ft_pool.begin(), ft_pool.end(),
            [](const SubjectRecord* a, const SubjectRecord* b) { return a->subject_id < b->subject_id; });

  // SSL train/val.
  Rng ssl_rng(derive_seed(seed, 0x55u));
  std::shuffle(ssl_pool.begin(), ssl_pool.end(), ssl_rng);
  const size_t n_ssl_val = static_cast<size_t>(std::floor(cfg.ssl_val_fraction * ssl_pool.size()));
  out.ssl_val = sorted_ids({ssl_pool.begin(), ssl_pool.begin() + n_ssl_val});
  out.ssl_train = sorted_ids({ssl_pool.begin() + n_ssl_val, ssl_pool.end()});

  if (ft_pool.empty()) return out;

  // Stratification key = (study, quartile bin of the month-12 label).
  std::vector<double> labels;
  for (const auto* r : ft_pool) labels.push_back(*r->cdr_sb_month12);
  std::sort(labels.begin(), labels.end());
  const size_t n = labels.size();
  const double q[3] = {labels[n / 4], labels[n / 2], labels[(3 * n) / 4]};
  auto quartile = [&](double v) { return static_cast<int>((v > q[0]) + (v > q[1]) + (v > q[2])); };

  auto stratify = [&](bool with_quartile) {
    std::map<std::string, std::vector<const SubjectRecord*>> strata;
    for (const auto* r : ft_pool) {
      std::string key = r->study;
      if (with_quartile) key += "#q" + std::to_string(quartile(*r->cdr_sb_month12));
      strata[key].push_back(r);
    }
    return strata;
  };
  auto strata = stratify(true);
  for (const auto& [key, members] : strata) {
    if (static_cast<int>(members.size()) < cfg.folds) {
      out.warnings.push_back("stratum '" + key + "' has " + std::to_string(members.size()) +
                             " records (< " + std::to_string(cfg.folds) +
                             " folds); falling back to study-only stratification");
      strata = stratify(false);
      break;
    }
  }

  Rng ft_rng(derive_seed(seed, 0xF7u));
  std::vector<const SubjectRecord*> ordered;
  for (auto& [key, members] : strata) {
    std::shuffle(members.begin(), members.end(), ft_rng);
    ordered.insert(ordered.end(), members.begin(), members.end());
  }

  // Systematic sampling over the stratum-ordered list yields exactly
  // floor(test_fraction * n) test subjects spread across strata.
  const size_t n_test = static_cast<size_t>(std::floor(cfg.test_fraction * n));
  std::vector<const SubjectRecord*> dev;
  for (size_t i = 0; i < n; ++i) {
    const bool pick = n_test > 0 && ((i + 1) * n_test) / n > (i * n_test) / n;
    if (pick) out.ft_test_in_study.push_back(ordered[i]->subject_id);
    else dev.push_back(ordered[i]);
  }
  out.ft_test_in_study = sorted_ids(out.ft_test_in_study);

  std::vector<std::vector<std::string>> fold_members(cfg.folds);
  for (size_t i = 0; i < dev.size(); ++i) fold_members[i % cfg.folds].push_back(dev[i]->subject_id);
  for (int k = 0; k < cfg.folds; ++k) {
    Fold f;
    f.val = sorted_ids(fold_members[k]);
    for (int j = 0; j < cfg.folds; ++j)
      if (j != k || cfg.folds == 1) f.train.insert(f.train.end(), fold_members[j].begin(), fold_members[j].end());
    if (cfg.folds == 1) f.val.clear();
    f.train = sorted_ids(f.train);
    out.ft_folds.push_back(std::move(f));
  }
  return out;
}

ManifestStats manifest_stats(const DatasetManifest& m) {
  ManifestStats s;
  for (const auto& [study, roles] : m.study_roles) s.per_study[study];
  for (const auto& r : m.records) {
    auto& c = s.per_study[r.study];
    ++c.subjects;
    if (r.cdr_sb_month12) ++c.labeled;
  }
  s.total_subjects = static_cast<int>(m.records.size());
  s.center_slice_images = s.total_subjects;
  s.five_slice_images = 5LL * s.center_slice_images;
  return s;
}

json to_json(const SplitAssignment& s) {
  json folds = json::array();
  for (const auto& f : s.ft_folds) folds.push_back({{"train", f.train}, {"val", f.val}});
  json out_study = json::object();
  for (const auto& [study, ids] : s.ft_test_out_study) out_study[study] = ids;
  return {{"seed", s.seed},
          {"ssl", {{"train", s.ssl_train}, {"val", s.ssl_val}}},
          {"finetune", {{"folds", folds}, {"test_in_study", s.ft_test_in_study}, {"test_out_study", out_study}}},
          {"warnings", s.warnings}};
}

SplitAssignment splits_from_json(const json& j) {
  SplitAssignment s;
  s.seed = j.at("seed").get<uint64_t>();
  s.ssl_train = j.at("ssl").at("train").get<std::vector<std::string>>();
  s.ssl_val = j.at("ssl").at("val").get<std::vector<std::string>>();
  const json& ft = j.at("finetune");
  for (const auto& f : ft.at("folds"))
    s.ft_folds.push_back({f.at("train").get<std::vector<std::string>>(), f.at("val").get<std::vector<std::string>>()});
  s.ft_test_in_study = ft.at("test_in_study").get<std::vector<std::string>>();
  for (auto it = ft.at("test_out_study").begin(); it != ft.at("test_out_study").end(); ++it)
    s.ft_test_out_study[it.key()] = it.value().get<std::vector<std::string>>();
  s.warnings = j.at("warnings").get<std::vector<std::string>>();
  return s;
}

json to_json(const ManifestStats& s) {
  json per = json::object();
  for (const auto& [study, c] : s.per_study) per[study] = {{"subjects", c.subjects}, {"labeled", c.labeled}};
  return {{"per_study", per},
          {"total_subjects", s.total_subjects},
          {"center_slice_images", s.center_slice_images},
          {"five_slice_images", s.five_slice_images}};
}

}  // namespace cdssl::cohort
