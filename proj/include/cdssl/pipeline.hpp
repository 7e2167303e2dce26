#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdssl/checkpoint.hpp"
#include "cdssl/cohort.hpp"
#include "cdssl/config.hpp"
#include "cdssl/metrics.hpp"
#include "cdssl/regress.hpp"
#include "cdssl/ssl.hpp"

namespace cdssl::pipeline {

namespace fs = std::filesystem;

/// Failure inside a named pipeline step; artifacts of completed steps stay on disk.
class StepError : public std::runtime_error {
 public:
  StepError(std::string step, const std::string& what)
      : std::runtime_error("step '" + step + "' failed: " + what), step_(std::move(step)) {}
  const std::string& step() const { return step_; }

 private:
  std::string step_;
};

struct RunOptions {
  bool resume = false;         // skip steps whose artifacts carry a matching hash
  std::ostream* log = nullptr;
  int threads = 0;             // 0 = config value
};

/// Hash of the inputs of every step. A step's hash covers its config slice
/// and the hashes of the steps it consumes.
struct StepHashes {
  std::string data;
  std::vector<std::string> stages;
  std::string finetune;
  std::string evaluation;
};

StepHashes step_hashes(const ExperimentConfig& cfg);

struct RunLayout {
  fs::path root;

  fs::path data_dir(const std::string& data_hash) const;
  fs::path stage_checkpoint(size_t index, const std::string& name, const std::string& hash) const;
  fs::path model_dir(const std::string& finetune_hash) const;
  fs::path fold_checkpoint(const std::string& finetune_hash, int fold) const;
  fs::path evaluation_file() const { return root / "reports" / "evaluation.json"; }
  fs::path reports() const { return root / "reports"; }
  fs::path saliency() const { return root / "saliency"; }
};

/// Synthetic cohort manifest (records and study roles) from the data section.
cohort::DatasetManifest synthesize_manifest(const ExperimentConfig& cfg);

/// Stable per-subject phantom seed.
uint64_t subject_seed(uint64_t data_seed, const std::string& subject_id);

/// Model-resolution slices of the prepared data, one entry per (subject, offset).
struct SliceEntry {
  std::string subject_id;
  int offset = 0;  // axial offset from the center slice
  double label = 0.0;
  bool labeled = false;
  Image2D image;
};

// "CDSS" magic, u32 version, u32 count, i32 rows, i32 cols, then per entry
// u32 id length, id, i32 offset, f64 label (NaN when unlabeled), float32 pixels.
void write_slices(const fs::path& path, const std::vector<SliceEntry>& entries);
std::vector<SliceEntry> read_slices(const fs::path& path);

/// Selects slices of the given subjects and slicing mode, in subject order.
ssl::SliceSet select_slices(const std::vector<SliceEntry>& entries, const std::vector<std::string>& subjects,
                            imaging::SliceMode mode);

// Individual steps. Each returns immediately when resuming and its artifact
// is present with a matching hash.
void step_prepare(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt);
std::optional<Checkpoint> step_pretrain(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt);
void step_finetune(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt);
void step_evaluate(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt);
void step_saliency(const ExperimentConfig& cfg, const RunLayout& run, const RunOptions& opt,
                   const std::string& layer = {}, int count = -1);

/// prepare -> pretrain stages -> fine-tune per fold -> evaluate -> report
/// (-> saliency when requested). Returns the run directory.
fs::path run_pipeline(const ExperimentConfig& cfg, const RunOptions& opt = {});

/// Writes metrics.json, predictions_<set>.csv, residuals_val.csv and
/// summary.txt under reports/ from the stored evaluation.
void emit_report(const fs::path& run_dir);

/// Steiger comparison of two runs' predictions on a test set ("val",
/// "in_study" or an out-study name).
metrics::SteigerResult compare_runs(const fs::path& run_a, const fs::path& run_b, const std::string& test_set);

/// Table-4 style cell, e.g. "0.21 (0.02)"; negative values keep their sign.
std::string format_cell(const metrics::Summary& s, int decimals = 2);

}  // namespace cdssl::pipeline
