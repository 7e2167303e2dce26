#include "cdssl/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "cdssl/checkpoint.hpp"

namespace cdssl::pipeline {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw std::invalid_argument("unknown config key '" + section + "." + it.key() + "'");
}

json phantom_json(const imaging::PhantomParams& p) {
  return {{"dims", p.dims},
          {"spacing_mm", p.spacing_mm},
          {"head_radius_frac", p.head_radius_frac},
          {"rho_min_mm", p.rho_min_mm},
          {"rho_max_mm", p.rho_max_mm},
          {"signal_coef", p.signal_coef},
          {"label_noise_sd", p.label_noise_sd},
          {"image_noise_sd", p.image_noise_sd},
          {"texture_amplitude", p.texture_amplitude},
          {"structure_scale_mm", p.structure_scale_mm},
          {"other_orientation_prob", p.other_orientation_prob}};
}

imaging::PhantomParams phantom_from_json(const json& j) {
  imaging::PhantomParams p;
  check_keys(j, {"dims", "spacing_mm", "head_radius_frac", "rho_min_mm", "rho_max_mm", "signal_coef",
                 "label_noise_sd", "image_noise_sd", "texture_amplitude", "structure_scale_mm",
                 "other_orientation_prob"},
             "data.phantom");
  p.dims = j.value("dims", p.dims);
  p.spacing_mm = j.value("spacing_mm", p.spacing_mm);
  p.head_radius_frac = j.value("head_radius_frac", p.head_radius_frac);
  p.rho_min_mm = j.value("rho_min_mm", p.rho_min_mm);
  p.rho_max_mm = j.value("rho_max_mm", p.rho_max_mm);
  p.signal_coef = j.value("signal_coef", p.signal_coef);
  p.label_noise_sd = j.value("label_noise_sd", p.label_noise_sd);
  p.image_noise_sd = j.value("image_noise_sd", p.image_noise_sd);
  p.texture_amplitude = j.value("texture_amplitude", p.texture_amplitude);
  p.structure_scale_mm = j.value("structure_scale_mm", p.structure_scale_mm);
  p.other_orientation_prob = j.value("other_orientation_prob", p.other_orientation_prob);
  for (int a = 0; a < 3; ++a)
    if (p.dims[a] < 2 || !(p.spacing_mm[a] > 0.0)) throw std::invalid_argument("data.phantom: invalid grid");
  if (!(p.rho_min_mm > 0.0) || p.rho_max_mm < p.rho_min_mm) throw std::invalid_argument("data.phantom: invalid rho range");
  if (p.label_noise_sd < 0.0 || p.image_noise_sd < 0.0) throw std::invalid_argument("data.phantom: negative noise");
  return p;
}

json roles_json(const cohort::StudyRoles& r) {
  return {{"ssl", r.ssl}, {"finetune", r.finetune}, {"in_study_test", r.in_study_test}, {"out_study_test", r.out_study_test}};
}

cohort::StudyRoles roles_from_json(const json& j) {
  check_keys(j, {"ssl", "finetune", "in_study_test", "out_study_test"}, "data.studies.roles");
  cohort::StudyRoles r;
  r.ssl = j.value("ssl", false);
  r.finetune = j.value("finetune", false);
  r.in_study_test = j.value("in_study_test", false);
  r.out_study_test = j.value("out_study_test", false);
  return r;
}

json stage_json(const StageConfig& s) {
  json j;
  if (s.is_supervised()) {
    j = to_json(s.supervised);
    j["method"] = "supervised";
  } else {
    j = to_json(s.ssl);
  }
  j["name"] = s.name;
  j["dataset"] = s.dataset;
  return j;
}

StageConfig stage_from_json(const json& j) {
  StageConfig s;
  s.dataset = j.at("dataset").get<std::string>();
  if (s.dataset != "generic" && s.dataset != "indomain")
    throw std::invalid_argument("stage dataset must be 'generic' or 'indomain', got '" + s.dataset + "'");
  const std::string method = j.at("method").get<std::string>();
  json rest = j;
  rest.erase("name");
  rest.erase("dataset");
  std::string tag;
  if (method == "supervised") {
    if (s.dataset != "generic") throw std::invalid_argument("supervised stages need labeled generic data");
    rest.erase("method");
    check_keys(rest, {"epochs", "learning_rate", "batch_size", "head_init_sd"}, "stage");
    s.method = "supervised";
    s.supervised = regress::finetune_config_from_json(rest);
    tag = "supervised";
  } else {
    check_keys(rest, {"method", "temperature", "lambda", "prototypes", "epsilon", "sinkhorn_iters", "projection_dim",
                      "hidden_dim", "optimizer", "epochs", "batch_size", "augment"},
               "stage");
    s.ssl = ssl::ssl_config_from_json(rest);
    s.method = ssl::to_string(s.ssl.method);
    tag = ssl::method_tag(s.ssl.method);
  }
  s.name = j.value("name", s.dataset + "-" + tag);
  return s;
}

json eval_json(const EvalConfig& e) {
  return {{"histogram_bins", e.histogram_bins}, {"saliency_images", e.saliency_images}, {"saliency_layer", e.saliency_layer}};
}

}  // namespace

regress::InitKind ExperimentConfig::init_kind() const {
  if (stages.empty()) return regress::InitKind::random;
  if (stages.size() == 1 && stages.front().is_supervised()) return regress::InitKind::supervised_generic;
  return regress::InitKind::ssl_checkpoint;
}

std::vector<std::string> ExperimentConfig::stage_names() const {
  std::vector<std::string> out;
  for (const auto& s : stages) out.push_back(s.name);
  return out;
}

std::vector<StudySpec> default_studies() {
  return {
      {"STUDY_A", {true, true, true, false}, 260},
      {"STUDY_B", {true, true, true, false}, 200},
      {"STUDY_U", {true, false, false, false}, 360},
      {"STUDY_X", {false, false, false, true}, 80},
  };
}

ExperimentConfig config_from_json(const json& j) {
  check_keys(j, {"seed", "output_dir", "threads", "data", "splits", "encoder", "ssl", "finetune", "eval"}, "");
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.threads = j.value("threads", c.threads);
  if (c.threads < 1) throw std::invalid_argument("threads must be >= 1");

  const json data = j.value("data", json::object());
  check_keys(data, {"seed", "phantom", "studies", "generic_images", "generic_val_fraction", "amyloid_positive_rate",
                    "missing_field_rate", "mmse_min", "ssl_slicing", "finetune_slicing", "write_volumes"},
             "data");
  c.data.seed = data.value("seed", c.data.seed);
  if (data.contains("phantom")) c.data.phantom = phantom_from_json(data["phantom"]);
  if (data.contains("studies")) {
    std::set<std::string> seen;
    for (const auto& s : data["studies"]) {
      check_keys(s, {"name", "roles", "subjects"}, "data.studies");
      StudySpec spec{s.at("name").get<std::string>(), roles_from_json(s.at("roles")), s.at("subjects").get<int>()};
      if (spec.subjects < 0) throw std::invalid_argument("study '" + spec.name + "': negative subject count");
      if (!seen.insert(spec.name).second) throw std::invalid_argument("duplicate study '" + spec.name + "'");
      c.data.studies.push_back(spec);
    }
  } else {
    c.data.studies = default_studies();
  }
  c.data.generic_images = data.value("generic_images", c.data.generic_images);
  c.data.generic_val_fraction = data.value("generic_val_fraction", c.data.generic_val_fraction);
  c.data.amyloid_positive_rate = data.value("amyloid_positive_rate", c.data.amyloid_positive_rate);
  c.data.missing_field_rate = data.value("missing_field_rate", c.data.missing_field_rate);
  c.data.mmse_min = data.value("mmse_min", c.data.mmse_min);
  if (data.contains("ssl_slicing")) c.data.ssl_slicing = imaging::slice_mode_from_string(data["ssl_slicing"]);
  if (data.contains("finetune_slicing"))
    c.data.finetune_slicing = imaging::slice_mode_from_string(data["finetune_slicing"]);
  c.data.write_volumes = data.value("write_volumes", c.data.write_volumes);
  if (c.data.generic_images < 0) throw std::invalid_argument("data.generic_images must be >= 0");

  const json splits = j.value("splits", json::object());
  check_keys(splits, {"ssl_val_fraction", "test_fraction", "folds", "exclude_finetune_from_ssl"}, "splits");
  c.splits.ssl_val_fraction = splits.value("ssl_val_fraction", c.splits.ssl_val_fraction);
  c.splits.test_fraction = splits.value("test_fraction", c.splits.test_fraction);
  c.splits.folds = splits.value("folds", c.splits.folds);
  c.splits.exclude_finetune_from_ssl = splits.value("exclude_finetune_from_ssl", c.splits.exclude_finetune_from_ssl);
  if (c.splits.folds < 2) throw std::invalid_argument("splits.folds must be >= 2");

  if (j.contains("encoder")) c.encoder = nn::encoder_spec_from_json(j["encoder"]);

  const json ssl_section = j.value("ssl", json::object());
  check_keys(ssl_section, {"stages"}, "ssl");
  for (const auto& s : ssl_section.value("stages", json::array())) c.stages.push_back(stage_from_json(s));
  for (size_t i = 0; i < c.stages.size(); ++i)
    if (c.stages[i].is_supervised() && i + 1 < c.stages.size() && c.stages[i + 1].is_supervised())
      throw std::invalid_argument("consecutive supervised stages are not supported");

  if (j.contains("finetune")) {
    check_keys(j["finetune"], {"epochs", "learning_rate", "batch_size", "head_init_sd"}, "finetune");
    c.finetune = regress::finetune_config_from_json(j["finetune"]);
  }

  const json ev = j.value("eval", json::object());
  check_keys(ev, {"histogram_bins", "saliency_images", "saliency_layer"}, "eval");
  c.eval.histogram_bins = ev.value("histogram_bins", c.eval.histogram_bins);
  c.eval.saliency_images = ev.value("saliency_images", c.eval.saliency_images);
  c.eval.saliency_layer = ev.value("saliency_layer", c.eval.saliency_layer);
  if (c.eval.histogram_bins < 1) throw std::invalid_argument("eval.histogram_bins must be >= 1");
  return c;
}

json to_json(const ExperimentConfig& c) {
  json studies = json::array();
  for (const auto& s : c.data.studies)
    studies.push_back({{"name", s.name}, {"roles", roles_json(s.roles)}, {"subjects", s.subjects}});
  json stages = json::array();
  for (const auto& s : c.stages) stages.push_back(stage_json(s));
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"threads", c.threads},
          {"data",
           {{"seed", c.data.seed},
            {"phantom", phantom_json(c.data.phantom)},
            {"studies", studies},
            {"generic_images", c.data.generic_images},
            {"generic_val_fraction", c.data.generic_val_fraction},
            {"amyloid_positive_rate", c.data.amyloid_positive_rate},
            {"missing_field_rate", c.data.missing_field_rate},
            {"mmse_min", c.data.mmse_min},
            {"ssl_slicing", imaging::to_string(c.data.ssl_slicing)},
            {"finetune_slicing", imaging::to_string(c.data.finetune_slicing)},
            {"write_volumes", c.data.write_volumes}}},
          {"splits",
           {{"ssl_val_fraction", c.splits.ssl_val_fraction},
            {"test_fraction", c.splits.test_fraction},
            {"folds", c.splits.folds},
            {"exclude_finetune_from_ssl", c.splits.exclude_finetune_from_ssl}}},
          {"encoder", nn::to_json(c.encoder)},
          {"ssl", {{"stages", stages}}},
          {"finetune", to_json(c.finetune)},
          {"eval", eval_json(c.eval)}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);  // comments allowed
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string full_config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  // where results land and how many threads compute them do not change them
  j.erase("output_dir");
  j.erase("threads");
  return config_hash(j);
}

}  // namespace cdssl::pipeline
