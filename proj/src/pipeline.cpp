#include "cdssl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>

#include "cdssl/imaging.hpp"
#include "cdssl/saliency.hpp"

namespace cdssl::pipeline {

using nlohmann::json;

namespace {

constexpr char kSliceMagic[4] = {'C', 'D', 'S', 'S'};
constexpr uint32_t kSliceVersion = 1;

void say(const RunOptions& opt, const std::string& msg) {
  if (opt.log) *opt.log << msg << std::endl;
}

int thread_count(const ExperimentConfig& cfg, const RunOptions& opt) { return opt.threads > 0 ? opt.threads : cfg.threads; }

// Writes through a temporary file so an interrupted step never leaves a
// half-written artifact under the final name.
void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json(const fs::path& path) { return json::parse(read_text(path)); }

std::string short_hash(const std::string& h) { return h.substr(0, 12); }

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// parallel_for that rethrows the first failure (by index) on the caller.
void parallel_checked(size_t n, int threads, const std::function<void(size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  ssl::parallel_for(n, threads, [&](size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <class F>
auto run_step(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StepError&) {
    throw;
  } catch (const std::exception& e) {
    throw StepError(name, e.what());
  }
}

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  if (std::strcmp(buf, "-0.00") == 0 || std::strcmp(buf, "-0.000") == 0 || std::strcmp(buf, "-0.0000") == 0)
    return buf + 1;  // no negative zero
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct PreparedData {
  cohort::DatasetManifest manifest;
  cohort::SplitAssignment splits;
  std::vector<SliceEntry> slices;   // subjects
  std::vector<SliceEntry> generic;  // generic corpus
};

PreparedData load_prepared(const ExperimentConfig& cfg, const RunLayout& run) {
  const std::string h = step_hashes(cfg).data;
  const fs::path dir = run.data_dir(h);
  if (!fs::exists(dir / "meta.json")) throw std::runtime_error("prepared data missing: " + (dir / "meta.json").string());
  const json meta = read_json(dir / "meta.json");
  if (meta.value("config_hash", "") != h)
    throw std::runtime_error("prepared data in " + dir.string() + " carries a different config hash");
  PreparedData d;
  d.manifest = cohort::load_manifest(dir / "manifest.jsonl");
  d.splits = cohort::splits_from_json(read_json(dir / "splits.json"));
  d.slices = read_slices(dir / "slices.bin");
  d.generic = read_slices(dir / "generic.bin");
  return d;
}

ssl::SliceSet generic_set(const std::vector<SliceEntry>& g, size_t begin, size_t end) {
  ssl::SliceSet s;
  for (size_t i = begin; i < end; ++i) {
    s.images.push_back(g[i].image);
    s.labels.push_back(g[i].label);
    s.ids.push_back(g[i].subject_id);
  }
  return s;
}

size_t generic_val_count(const ExperimentConfig& cfg, size_t n) {
  return static_cast<size_t>(std::floor(cfg.data.generic_val_fraction * static_cast<double>(n)));
}

regress::InitScheme init_scheme(const ExperimentConfig& cfg, const std::optional<Checkpoint>& last) {
  regress::InitScheme s;
  s.kind = cfg.init_kind();
  if (s.kind != regress::InitKind::random) s.checkpoint = last;
  return s;
}

std::vector<regress::RegressorModel> load_folds(const ExperimentConfig& cfg, const RunLayout& run) {
  const std::string h = step_hashes(cfg).finetune;
  std::vector<regress::RegressorModel> out;
  for (int k = 0; k < cfg.splits.folds; ++k) {
    const fs::path p = run.fold_checkpoint(h, k);
    if (!fs::exists(p)) throw std::runtime_error("fine-tuned model missing: " + p.string());
    out.push_back(regress::from_checkpoint(load_checkpoint(p, h)));
  }
  return out;
}

// Subject-level predictions, sorted by subject id.
json predict_subjects(const regress::RegressorModel& model, const std::vector<SliceEntry>& entries,
                      const std::vector<std::string>& subjects, imaging::SliceMode mode,
                      const std::map<std::string, double>& truth, int threads) {
  const ssl::SliceSet set = select_slices(entries, subjects, mode);
  std::vector<double> pred(set.size());
  parallel_checked(set.size(), threads, [&](size_t i) { pred[i] = model.forward(set.images[i]); });
  const auto by_subject = regress::aggregate_by_subject(set.ids, pred);
  json ids = json::array(), y = json::array(), yhat = json::array();
  for (const auto& [id, p] : by_subject) {
    ids.push_back(id);
    y.push_back(truth.at(id));
    yhat.push_back(p);
  }
  return {{"ids", ids}, {"truth", y}, {"prediction", yhat}};
}

struct PredTable {
  std::vector<std::string> ids;
  std::vector<double> truth, pred;
};

PredTable table_from_json(const json& j) {
  PredTable t;
  t.ids = j.at("ids").get<std::vector<std::string>>();
  t.truth = j.at("truth").get<std::vector<double>>();
  t.pred = j.at("prediction").get<std::vector<double>>();
  if (t.ids.size() != t.truth.size() || t.ids.size() != t.pred.size()) throw std::runtime_error("malformed prediction table");
  return t;
}

json fold_metrics_json(const metrics::FoldMetrics& f) { return {{"r2", f.r2}, {"r", f.r}, {"mse", f.mse}}; }

PredTable read_predictions_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing predictions: " + path.string());
  PredTable t;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, y, p;
    std::getline(ss, id, ',');
    std::getline(ss, y, ',');
    std::getline(ss, p, ',');
    t.ids.push_back(id);
    t.truth.push_back(std::stod(y));
    t.pred.push_back(std::stod(p));
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

StepHashes step_hashes(const ExperimentConfig& cfg) {
  const json full = to_json(cfg);
  StepHashes h;

  json data = full["data"];
  data.erase("ssl_slicing");  // every slice offset is prepared; the mode is chosen downstream
  data.erase("finetune_slicing");
  h.data = config_hash({{"step", "prepare"},
                        {"data", data},
                        {"splits", full["splits"]},
                        {"input_size", cfg.encoder.input_size},
                        {"input_pool", cfg.encoder.input_pool}});

  std::string prev;
  for (size_t i = 0; i < cfg.stages.size(); ++i) {
    json j = {{"step", "pretrain"},
              {"index", i},
              {"data", h.data},
              {"previous", prev},
              {"stage", full["ssl"]["stages"][i]},
              {"encoder", full["encoder"]},
              {"seed", cfg.seed}};
    if (cfg.stages[i].dataset == "indomain") j["slicing"] = imaging::to_string(cfg.data.ssl_slicing);
    prev = config_hash(j);
    h.stages.push_back(prev);
  }
  h.finetune = config_hash({{"step", "finetune"},
                            {"data", h.data},
                            {"init", prev.empty() ? std::string("random") : prev},
                            {"init_kind", regress::to_string(cfg.init_kind())},
                            {"finetune", full["finetune"]},
                            {"slicing", imaging::to_string(cfg.data.finetune_slicing)},
                            {"encoder", full["encoder"]},
                            {"seed", cfg.seed}});
  h.evaluation = config_hash({{"step", "evaluate"}, {"finetune", h.finetune}, {"histogram_bins", cfg.eval.histogram_bins}});
  return h;
}

fs::path RunLayout::data_dir(const std::string& data_hash) const { return root / "data" / short_hash(data_hash); }

fs::path RunLayout::stage_checkpoint(size_t index, const std::string& name, const std::string& hash) const {
  return root / "checkpoints" / (std::to_string(index) + "_" + name + "_" + short_hash(hash) + ".ckpt");
}

fs::path RunLayout::model_dir(const std::string& finetune_hash) const { return root / "models" / short_hash(finetune_hash); }

fs::path RunLayout::fold_checkpoint(const std::string& finetune_hash, int fold) const {
  return model_dir(finetune_hash) / ("fold" + std::to_string(fold) + ".ckpt");
}

uint64_t subject_seed(uint64_t data_seed, const std::string& subject_id) {
  return derive_seed(data_seed, 0x5B, fnv1a(subject_id));
}

cohort::DatasetManifest synthesize_manifest(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.data;
  cohort::DatasetManifest m;
  for (const auto& study : d.studies) {
    if (m.study_roles.count(study.name)) throw std::invalid_argument("duplicate study '" + study.name + "'");
    m.study_roles[study.name] = study.roles;
    const bool labeled = study.roles.finetune || study.roles.out_study_test;
    for (int i = 0; i < study.subjects; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "-%05d", i);
      cohort::SubjectRecord r;
      r.subject_id = study.name + buf;
      r.study = study.name;
      r.image_ref = "volumes/" + r.subject_id + ".cdvl";

      const auto phantom = imaging::synthesize_volume(d.phantom, subject_seed(d.seed, r.subject_id));
      Rng rng(derive_seed(d.seed, 0xC0, fnv1a(r.subject_id)));
      r.cdr_sb_baseline = std::clamp(0.6 * phantom.label + normal(rng, 0.0, 1.5), 0.0, 18.0);
      if (labeled) r.cdr_sb_month12 = phantom.label;
      const bool amyloid = uniform(rng, 0.0, 1.0) < d.amyloid_positive_rate;
      const int mmse = std::uniform_int_distribution<int>(d.mmse_min, 30)(rng);
      const double u = uniform(rng, 0.0, 1.0);
      const cohort::Stage stage = u < 0.47 ? cohort::Stage::prodromal : u < 0.94 ? cohort::Stage::mild : cohort::Stage::other;
      if (uniform(rng, 0.0, 1.0) >= d.missing_field_rate) r.amyloid_positive = amyloid;
      if (uniform(rng, 0.0, 1.0) >= d.missing_field_rate) r.mmse = mmse;
      if (uniform(rng, 0.0, 1.0) >= d.missing_field_rate) r.stage = stage;
      cohort::validate_record(r, 0);
      m.records.push_back(std::move(r));
    }
  }
  return m;
}

void write_slices(const fs::path& path, const std::vector<SliceEntry>& entries) {
  std::ostringstream out(std::ios::binary);
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  const int32_t rows = entries.empty() ? 0 : entries.front().image.rows;
  const int32_t cols = entries.empty() ? 0 : entries.front().image.cols;
  out.write(kSliceMagic, 4);
  put(kSliceVersion);
  put(static_cast<uint32_t>(entries.size()));
  put(rows);
  put(cols);
  std::vector<float> buf;
  for (const auto& e : entries) {
    if (e.image.rows != rows || e.image.cols != cols) throw std::invalid_argument("slice entries differ in shape");
    put(static_cast<uint32_t>(e.subject_id.size()));
    out.write(e.subject_id.data(), static_cast<std::streamsize>(e.subject_id.size()));
    put(static_cast<int32_t>(e.offset));
    put(e.labeled ? e.label : std::numeric_limits<double>::quiet_NaN());
    buf.assign(e.image.data.begin(), e.image.data.end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  write_text(path, out.str());
}

std::vector<SliceEntry> read_slices(const fs::path& path) {
  const std::string blob = read_text(path);
  size_t pos = 0;
  auto get = [&](auto& v) {
    if (pos + sizeof v > blob.size()) throw std::runtime_error("truncated slice file: " + path.string());
    std::memcpy(&v, blob.data() + pos, sizeof v);
    pos += sizeof v;
  };
  if (blob.size() < 4 || std::memcmp(blob.data(), kSliceMagic, 4) != 0) throw std::runtime_error("not a slice file: " + path.string());
  pos = 4;
  uint32_t version = 0, count = 0;
  int32_t rows = 0, cols = 0;
  get(version);
  if (version != kSliceVersion) throw std::runtime_error("unsupported slice file version " + std::to_string(version));
  get(count);
  get(rows);
  get(cols);
  std::vector<SliceEntry> out(count);
  std::vector<float> buf(static_cast<size_t>(rows) * cols);
  for (auto& e : out) {
    uint32_t len = 0;
    get(len);
    if (pos + len > blob.size()) throw std::runtime_error("truncated slice file: " + path.string());
    e.subject_id.assign(blob.data() + pos, len);
    pos += len;
    int32_t off = 0;
    double label = 0.0;
    get(off);
    get(label);
    e.offset = off;
    e.labeled = !std::isnan(label);
    e.label = e.labeled ? label : 0.0;
    const size_t bytes = buf.size() * sizeof(float);
    if (pos + bytes > blob.size()) throw std::runtime_error("truncated slice file: " + path.string());
    std::memcpy(buf.data(), blob.data() + pos, bytes);
    pos += bytes;
    e.image = Image2D(rows, cols);
    std::copy(buf.begin(), buf.end(), e.image.data.begin());
  }
  return out;
}

ssl::SliceSet select_slices(const std::vector<SliceEntry>& entries, const std::vector<std::string>& subjects,
                            imaging::SliceMode mode) {
  std::map<std::string, std::vector<const SliceEntry*>> by_subject;
  for (const auto& e : entries) by_subject[e.subject_id].push_back(&e);
  ssl::SliceSet out;
  for (const auto& id : subjects) {
    auto it = by_subject.find(id);
    if (it == by_subject.end()) throw std::runtime_error("no prepared slices for subject " + id);
    std::vector<const SliceEntry*> picked;
    for (const SliceEntry* e : it->second)
      if (mode == imaging::SliceMode::five || e->offset == 0) picked.push_back(e);
    if (mode == imaging::SliceMode::five && picked.size() != 5)
      throw std::runtime_error("subject " + id + " has no five-slice stack (volume depth below 21 slices)");
    if (picked.empty()) throw std::runtime_error("subject " + id + " has no center slice");
    std::sort(picked.begin(), picked.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
    for (const SliceEntry* e : picked) {
      out.images.push_back(e->image);
      out.labels.push_back(e->label);
      out.ids.push_back(e->subject_id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void step_prepare(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt) {
  run_step("prepare", [&] {
    const std::string h = step_hashes(cfg).data;
    const fs::path dir = run.data_dir(h);
    if (opt.resume && fs::exists(dir / "meta.json") && read_json(dir / "meta.json").value("config_hash", "") == h) {
      say(opt, "[prepare] up to date (" + short_hash(h) + ")");
      return;
    }
    say(opt, "[prepare] synthesizing cohort");
    const cohort::DatasetManifest manifest = synthesize_manifest(cfg);
    cohort::FilterReport filter;
    cohort::filter_cohort(manifest, &filter);
    const cohort::SplitAssignment splits = cohort::build_splits(manifest, cfg.splits, cfg.data.seed);
    for (const auto& w : splits.warnings) say(opt, "[prepare] warning: " + w);

    std::set<std::string> needed(splits.ssl_train.begin(), splits.ssl_train.end());
    needed.insert(splits.ssl_val.begin(), splits.ssl_val.end());
    for (const auto& f : splits.ft_folds) {
      needed.insert(f.train.begin(), f.train.end());
      needed.insert(f.val.begin(), f.val.end());
    }
    needed.insert(splits.ft_test_in_study.begin(), splits.ft_test_in_study.end());
    for (const auto& [_, ids] : splits.ft_test_out_study) needed.insert(ids.begin(), ids.end());

    std::map<std::string, const cohort::SubjectRecord*> records;
    for (const auto& r : manifest.records) records[r.subject_id] = &r;
    const std::vector<std::string> subjects(needed.begin(), needed.end());
    say(opt, "[prepare] preprocessing " + std::to_string(subjects.size()) + " volumes");

    const int pool = cfg.encoder.input_pool;
    std::vector<std::vector<SliceEntry>> per_subject(subjects.size());
    parallel_checked(subjects.size(), thread_count(cfg, opt), [&](size_t i) {
      const auto& rec = *records.at(subjects[i]);
      const auto phantom = imaging::synthesize_volume(cfg.data.phantom, subject_seed(cfg.data.seed, rec.subject_id));
      if (cfg.data.write_volumes) imaging::write_volume(dir / rec.image_ref, phantom.volume);
      const imaging::VolumeGrid pre = imaging::preprocess_volume(phantom.volume);
      const int depth = pre.dims[2];
      const auto mode = depth >= 21 ? imaging::SliceMode::five : imaging::SliceMode::center;
      const auto stack = imaging::extract_slices(pre, mode, rec.subject_id);
      for (const auto& s : stack.slices) {
        if (s.image.rows != cfg.encoder.input_size || s.image.cols != cfg.encoder.input_size)
          throw std::runtime_error("slice size does not match encoder.input_size");
        SliceEntry e;
        e.subject_id = rec.subject_id;
        e.offset = s.slice_index - depth / 2;
        e.labeled = rec.cdr_sb_month12.has_value();
        e.label = rec.cdr_sb_month12.value_or(0.0);
        e.image = imaging::average_pool(s.image, pool);
        per_subject[i].push_back(std::move(e));
      }
    });
    std::vector<SliceEntry> slices;
    for (auto& v : per_subject)
      for (auto& e : v) slices.push_back(std::move(e));

    say(opt, "[prepare] generic corpus of " + std::to_string(cfg.data.generic_images) + " images");
    std::vector<SliceEntry> generic(static_cast<size_t>(cfg.data.generic_images));
    parallel_checked(generic.size(), thread_count(cfg, opt), [&](size_t i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "generic-%05zu", i);
      double label = 0.0;
      Image2D img = imaging::synthesize_generic_image(derive_seed(cfg.data.seed, 0x6E, i), &label);
      imaging::standardize_image(img);
      generic[i] = {buf, 0, label, true, imaging::average_pool(img, pool)};
    });

    fs::create_directories(dir);
    cohort::save_manifest(manifest, dir / "manifest.jsonl");
    write_text(dir / "splits.json", to_json(splits).dump(1) + "\n");
    json stats = to_json(cohort::manifest_stats(manifest));
    stats["filter"] = {{"input", filter.input},
                       {"retained", filter.retained},
                       {"missing_field", filter.missing_field},
                       {"failed_criteria", filter.failed_criteria}};
    size_t ssl_center = 0, ssl_five = 0;
    const std::set<std::string> ssl_ids = [&] {
      std::set<std::string> s(splits.ssl_train.begin(), splits.ssl_train.end());
      s.insert(splits.ssl_val.begin(), splits.ssl_val.end());
      return s;
    }();
    for (const auto& e : slices)
      if (ssl_ids.count(e.subject_id)) {
        ++ssl_five;
        if (e.offset == 0) ++ssl_center;
      }
    stats["ssl_images"] = {{"center", ssl_center}, {"five", ssl_five}};
    write_text(dir / "stats.json", stats.dump(1) + "\n");
    write_slices(dir / "slices.bin", slices);
    write_slices(dir / "generic.bin", generic);
    write_text(dir / "meta.json", json({{"config_hash", h}, {"seed", cfg.data.seed}, {"artifact", "prepared-data"}}).dump(1) + "\n");
    say(opt, "[prepare] " + std::to_string(slices.size()) + " subject slices, " + std::to_string(splits.ssl_train.size()) +
                 " SSL subjects, " + std::to_string(splits.ft_test_in_study.size()) + " in-study test subjects");
  });
}

std::optional<Checkpoint> step_pretrain(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt) {
  const StepHashes hashes = step_hashes(cfg);
  std::optional<Checkpoint> last;
  std::optional<PreparedData> data;
  for (size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& st = cfg.stages[i];
    last = run_step("pretrain:" + st.name, [&]() -> Checkpoint {
      const fs::path path = run.stage_checkpoint(i, st.name, hashes.stages[i]);
      if (opt.resume && fs::exists(path)) {
        say(opt, "[pretrain:" + st.name + "] up to date (" + short_hash(hashes.stages[i]) + ")");
        return load_checkpoint(path, hashes.stages[i]);
      }
      if (!data) data = load_prepared(cfg, run);

      ssl::SliceSet train, val;
      if (st.dataset == "generic") {
        const size_t n = data->generic.size(), nv = generic_val_count(cfg, n);
        train = generic_set(data->generic, 0, n - nv);
        val = generic_set(data->generic, n - nv, n);
      } else {
        train = select_slices(data->slices, data->splits.ssl_train, cfg.data.ssl_slicing);
        val = select_slices(data->slices, data->splits.ssl_val, cfg.data.ssl_slicing);
      }
      say(opt, "[pretrain:" + st.name + "] " + std::to_string(train.size()) + " train / " + std::to_string(val.size()) +
                   " val images");
      const uint64_t seed = derive_seed(cfg.seed, 0x100 + i);
      const ssl::StageInfo info{st.name, st.dataset, hashes.stages[i]};
      Checkpoint ck;
      if (st.is_supervised()) {
        ck = regress::pretrain_supervised(last, cfg.encoder, train, val, st.supervised, info, seed);
      } else {
        auto cb = [&](int epoch, double tr, double v) {
          say(opt, "[pretrain:" + st.name + "] epoch " + std::to_string(epoch) + " train " + fmt(tr, 4) + " val " + fmt(v, 4));
        };
        ck = ssl::pretrain(last, cfg.encoder, train, val, st.ssl, info, seed, cb, thread_count(cfg, opt));
      }
      save_checkpoint(path, ck);
      return ck;
    });
  }
  return last;
}

void step_finetune(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt) {
  const StepHashes hashes = step_hashes(cfg);
  bool complete = opt.resume;
  for (int k = 0; k < cfg.splits.folds && complete; ++k) complete = fs::exists(run.fold_checkpoint(hashes.finetune, k));
  if (complete) {
    run_step("finetune", [&] { load_folds(cfg, run); });  // validates hashes
    say(opt, "[finetune] up to date (" + short_hash(hashes.finetune) + ")");
    return;
  }
  const std::optional<Checkpoint> last = step_pretrain(cfg, run, {true, opt.log, opt.threads});
  run_step("finetune", [&] {
    const PreparedData data = load_prepared(cfg, run);
    if (static_cast<int>(data.splits.ft_folds.size()) != cfg.splits.folds) throw std::runtime_error("fold count mismatch");
    const regress::InitScheme scheme = init_scheme(cfg, last);
    for (int k = 0; k < cfg.splits.folds; ++k) {
      const fs::path path = run.fold_checkpoint(hashes.finetune, k);
      if (opt.resume && fs::exists(path)) {
        load_checkpoint(path, hashes.finetune);
        continue;
      }
      const auto& fold = data.splits.ft_folds[static_cast<size_t>(k)];
      const ssl::SliceSet train = select_slices(data.slices, fold.train, cfg.data.finetune_slicing);
      const ssl::SliceSet val = select_slices(data.slices, fold.val, cfg.data.finetune_slicing);
      const uint64_t seed = derive_seed(cfg.seed, 0x200 + k);
      std::vector<StageDescriptor> prov = scheme.checkpoint ? scheme.checkpoint->provenance : std::vector<StageDescriptor>{};
      const auto model = regress::finetune_regressor(regress::init_backbone(scheme, cfg.encoder, seed), train, val,
                                                     cfg.finetune, seed, prov, hashes.finetune);
      say(opt, "[finetune] fold " + std::to_string(k + 1) + ": best epoch " + std::to_string(model.best_epoch) + ", val MSE " +
                   fmt(model.best_val_mse, 4));
      save_checkpoint(path, regress::to_checkpoint(model, seed, hashes.finetune));
    }
  });
}

void step_evaluate(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt) {
  const StepHashes hashes = step_hashes(cfg);
  const std::string full = full_config_hash(cfg);
  if (opt.resume && fs::exists(run.evaluation_file())) {
    const json prev = read_json(run.evaluation_file());
    if (prev.value("step_hash", "") == hashes.evaluation && prev.value("config_hash", "") == full) {
      say(opt, "[evaluate] up to date (" + short_hash(hashes.evaluation) + ")");
      return;
    }
  }
  run_step("evaluate", [&] {
    const PreparedData data = load_prepared(cfg, run);
    const auto models = load_folds(cfg, run);
    std::map<std::string, double> truth;
    for (const auto& r : data.manifest.records)
      if (r.cdr_sb_month12) truth[r.subject_id] = *r.cdr_sb_month12;

    std::vector<std::pair<std::string, std::vector<std::string>>> tests;
    if (!data.splits.ft_test_in_study.empty()) tests.emplace_back("in_study", data.splits.ft_test_in_study);
    for (const auto& [name, ids] : data.splits.ft_test_out_study)
      if (!ids.empty()) tests.emplace_back(name, ids);

    const int threads = thread_count(cfg, opt);
    json folds = json::array();
    for (size_t k = 0; k < models.size(); ++k) {
      json f;
      f["val"] = predict_subjects(models[k], data.slices, data.splits.ft_folds[k].val, cfg.data.finetune_slicing, truth, threads);
      for (const auto& [name, ids] : tests)
        f["tests"][name] = predict_subjects(models[k], data.slices, ids, cfg.data.finetune_slicing, truth, threads);
      f["best_epoch"] = models[k].best_epoch;
      folds.push_back(f);
    }
    json names = json::array();
    for (const auto& [name, _] : tests) names.push_back(name);
    json prov = json::array();
    for (const auto& s : models.front().provenance) prov.push_back(s.stage_name);
    const json ev = {{"artifact", "evaluation"},
                     {"config_hash", full},
                     {"step_hash", hashes.evaluation},
                     {"finetune_hash", hashes.finetune},
                     {"seed", cfg.seed},
                     {"init", regress::to_string(cfg.init_kind())},
                     {"provenance", prov},
                     {"histogram_bins", cfg.eval.histogram_bins},
                     {"test_sets", names},
                     {"folds", folds}};
    write_text(run.evaluation_file(), ev.dump(1) + "\n");
    say(opt, "[evaluate] " + std::to_string(models.size()) + " fold models evaluated");
  });
}

void step_saliency(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt, const std::string& layer_arg,
                   int count) {
  run_step("saliency", [&] {
    const StepHashes hashes = step_hashes(cfg);
    const int n = count >= 0 ? count : cfg.eval.saliency_images;
    if (n == 0) return;
    const fs::path dir = run.saliency() / short_hash(hashes.finetune);
    const fs::path meta_path = dir / "meta.json";
    const std::string layer_req = layer_arg.empty() ? cfg.eval.saliency_layer : layer_arg;
    const PreparedData data = load_prepared(cfg, run);
    const auto models = load_folds(cfg, run);
    const regress::RegressorModel& model = models.front();
    const std::string layer = layer_req.empty() ? saliency::default_layer(model) : layer_req;

    std::vector<std::string> subjects = data.splits.ft_test_in_study;
    if (subjects.empty())
      for (const auto& f : data.splits.ft_folds) subjects.insert(subjects.end(), f.val.begin(), f.val.end());
    subjects.resize(std::min(subjects.size(), static_cast<size_t>(n)));
    if (opt.resume && fs::exists(meta_path)) {
      const json prev = read_json(meta_path);
      if (prev.value("config_hash", "") == hashes.finetune && prev.value("layer", "") == layer &&
          prev.value("subjects", json::array()) == json(subjects)) {
        say(opt, "[saliency] up to date");
        return;
      }
    }
    fs::create_directories(dir);
    for (const auto& id : subjects) {
      const auto phantom = imaging::synthesize_volume(cfg.data.phantom, subject_seed(cfg.data.seed, id));
      const auto stack = imaging::extract_slices(imaging::preprocess_volume(phantom.volume), imaging::SliceMode::center, id);
      const imaging::SliceImage& slice = stack.slices.front();
      const saliency::Heatmap map = saliency::grad_cam(model, slice, layer);
      saliency::write_ppm(dir / (id + "_" + layer + "_overlay.ppm"), saliency::render_overlay(slice, map));
      imaging::write_image_f32(dir / (id + "_" + layer + "_heatmap.cdvl"), map.data);
      imaging::write_pgm(dir / (id + "_slice.pgm"), slice.image);
    }
    write_text(meta_path, json({{"artifact", "saliency"},
                                {"config_hash", hashes.finetune},
                                {"seed", cfg.seed},
                                {"layer", layer},
                                {"model", "fold0"},
                                {"subjects", subjects}})
                              .dump(1) +
                              "\n");
    say(opt, "[saliency] " + std::to_string(subjects.size()) + " heatmaps at layer " + layer);
  });
}

fs::path run_pipeline(const ExperimentConfig& cfg, const RunOptions& opt) {
  const RunLayout run{cfg.output_dir};
  fs::create_directories(run.root);
  write_text(run.root / "config.json", to_json(cfg).dump(1) + "\n");
  step_prepare(cfg, run, opt);
  step_pretrain(cfg, run, opt);
  step_finetune(cfg, run, opt);
  step_evaluate(cfg, run, opt);
  run_step("report", [&] { emit_report(run.root); });
  if (cfg.eval.saliency_images > 0) step_saliency(cfg, run, opt);
  return run.root;
}

// ---------------------------------------------------------------------------

std::string format_cell(const metrics::Summary& s, int decimals) {
  return fmt(s.mean, decimals) + " (" + fmt(s.sd, decimals) + ")";
}

void emit_report(const fs::path& run_dir) {
  const RunLayout run{run_dir};
  if (!fs::exists(run.evaluation_file()))
    throw std::runtime_error("incomplete run: missing " + run.evaluation_file().string() + " (run 'evaluate' first)");
  const json ev = read_json(run.evaluation_file());
  for (const char* key : {"config_hash", "seed", "folds", "test_sets", "histogram_bins", "provenance"})
    if (!ev.contains(key)) throw std::runtime_error(std::string("incomplete run: evaluation lacks '") + key + "'");
  const int bins = ev["histogram_bins"].get<int>();
  const auto& folds = ev["folds"];
  if (folds.empty()) throw std::runtime_error("incomplete run: no fold results");

  json sets = json::object();
  std::ostringstream summary;
  summary << "config " << ev["config_hash"].get<std::string>() << "\n";
  summary << "seed " << ev["seed"].get<uint64_t>() << "\n";
  std::string chain;
  for (const auto& s : ev["provenance"]) chain += (chain.empty() ? "" : " -> ") + s.get<std::string>();
  summary << "init " << ev.value("init", "") << ": " << chain << "\n\n";
  summary << std::left << std::setw(12) << "set" << "R2 (sd) / r (sd) / MSE (sd)\n";

  auto emit_set = [&](const std::string& name, const std::vector<PredTable>& per_fold, const PredTable& pooled,
                      bool ensemble) {
    std::vector<metrics::FoldMetrics> fm;
    for (const auto& t : per_fold) fm.push_back(metrics::evaluate_fold(t.truth, t.pred));
    metrics::MetricsReport rep = metrics::aggregate_folds(fm);
    rep.residual_hist = metrics::residual_stats(pooled.truth, pooled.pred, bins);
    json j = metrics::to_json(rep);
    const metrics::FoldMetrics pooled_m = metrics::evaluate_fold(pooled.truth, pooled.pred);
    j[ensemble ? "ensemble" : "pooled"] = fold_metrics_json(pooled_m);
    j["n_subjects"] = pooled.ids.size();
    sets[name] = j;

    summary << std::left << std::setw(12) << name << format_cell(rep.r2) << " / " << format_cell(rep.r) << " / "
            << format_cell(rep.mse) << "\n";
    for (size_t k = 0; k < fm.size(); ++k)
      summary << "  fold " << k + 1 << "    R2 " << fmt(fm[k].r2, 2) << "  r " << fmt(fm[k].r, 2) << "  MSE " << fmt(fm[k].mse, 2)
              << "\n";
    summary << "  " << (ensemble ? "ensemble" : "pooled  ") << "  R2 " << fmt(pooled_m.r2, 2) << "  r " << fmt(pooled_m.r, 2)
            << "  MSE " << fmt(pooled_m.mse, 2) << "\n";

    std::ostringstream csv;
    csv << "subject_id,y_true,y_pred\n";
    for (size_t i = 0; i < pooled.ids.size(); ++i)
      csv << pooled.ids[i] << ',' << exact(pooled.truth[i]) << ',' << exact(pooled.pred[i]) << "\n";
    write_text(run.reports() / ("predictions_" + name + ".csv"), csv.str());
    return rep;
  };

  // Out-of-fold validation predictions, pooled across folds.
  std::vector<PredTable> val_tables;
  std::map<std::string, std::pair<double, double>> oof;
  for (const auto& f : folds) {
    val_tables.push_back(table_from_json(f.at("val")));
    const auto& t = val_tables.back();
    for (size_t i = 0; i < t.ids.size(); ++i) oof[t.ids[i]] = {t.truth[i], t.pred[i]};
  }
  PredTable pooled_val;
  for (const auto& [id, v] : oof) {
    pooled_val.ids.push_back(id);
    pooled_val.truth.push_back(v.first);
    pooled_val.pred.push_back(v.second);
  }
  const metrics::MetricsReport val_rep = emit_set("val", val_tables, pooled_val, false);

  for (const auto& name_j : ev["test_sets"]) {
    const std::string name = name_j.get<std::string>();
    std::vector<PredTable> tables;
    for (const auto& f : folds) tables.push_back(table_from_json(f.at("tests").at(name)));
    PredTable ens = tables.front();
    for (size_t i = 0; i < ens.ids.size(); ++i) {
      double s = 0.0;
      for (const auto& t : tables) {
        if (t.ids != ens.ids) throw std::runtime_error("fold models were evaluated on different subjects for " + name);
        s += t.pred[i];
      }
      ens.pred[i] = s / static_cast<double>(tables.size());
    }
    emit_set(name, tables, ens, true);
  }

  const std::string note =
      "Test-set rows give per-fold model metrics (mean and sd over folds); 'ensemble' averages the fold models' "
      "predictions and is what predictions_<set>.csv holds.";
  summary << "\n" << note << "\n";

  std::ostringstream hist;
  hist << "bin_lo,bin_hi,count\n";
  const auto& h = val_rep.residual_hist;
  for (size_t i = 0; i < h.counts.size(); ++i)
    hist << exact(h.bin_edges[i]) << ',' << exact(h.bin_edges[i + 1]) << ',' << h.counts[i] << "\n";

  const json report = {{"artifact", "report"},
                       {"config_hash", ev["config_hash"]},
                       {"seed", ev["seed"]},
                       {"init", ev.value("init", "")},
                       {"provenance", ev["provenance"]},
                       {"sets", sets},
                       {"notes", {note}}};
  write_text(run.reports() / "metrics.json", report.dump(1) + "\n");
  write_text(run.reports() / "residuals_val.csv", hist.str());
  write_text(run.reports() / "summary.txt", summary.str());
}

metrics::SteigerResult compare_runs(const fs::path& run_a, const fs::path& run_b, const std::string& test_set) {
  const std::string file = "predictions_" + test_set + ".csv";
  const PredTable a = read_predictions_csv(run_a / "reports" / file);
  const PredTable b = read_predictions_csv(run_b / "reports" / file);
  std::map<std::string, std::pair<double, double>> ma, mb;
  for (size_t i = 0; i < a.ids.size(); ++i) ma[a.ids[i]] = {a.truth[i], a.pred[i]};
  for (size_t i = 0; i < b.ids.size(); ++i) mb[b.ids[i]] = {b.truth[i], b.pred[i]};

  std::vector<std::string> only_a, only_b;
  for (const auto& [id, _] : ma)
    if (!mb.count(id)) only_a.push_back(id);
  for (const auto& [id, _] : mb)
    if (!ma.count(id)) only_b.push_back(id);
  if (!only_a.empty() || !only_b.empty()) {
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (size_t i = 0; i < v.size() && i < 20; ++i) s += (i ? ", " : "") + v[i];
      if (v.size() > 20) s += ", ... (" + std::to_string(v.size()) + " total)";
      return s.empty() ? std::string("none") : s;
    };
    throw std::runtime_error("subject lists differ on '" + test_set + "': only in A: " + list(only_a) +
                             "; only in B: " + list(only_b));
  }
  std::vector<double> y, pa, pb;
  for (const auto& [id, va] : ma) {
    const auto& vb = mb.at(id);
    if (va.first != vb.first) throw std::runtime_error("runs disagree on the ground truth of subject " + id);
    y.push_back(va.first);
    pa.push_back(va.second);
    pb.push_back(vb.second);
  }
  metrics::SteigerResult res =
      metrics::steiger_z1(metrics::pearson_r(y, pa), metrics::pearson_r(y, pb), metrics::pearson_r(pa, pb), static_cast<int>(y.size()));
  res.model_a = run_a.filename().string();
  res.model_b = run_b.filename().string();
  if (res.model_a.empty()) res.model_a = run_a.parent_path().filename().string();
  if (res.model_b.empty()) res.model_b = run_b.parent_path().filename().string();
  return res;
}

}  // namespace cdssl::pipeline
