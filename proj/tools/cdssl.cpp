// Command-line driver for the pretraining / fine-tuning / evaluation pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdssl/config.hpp"
#include "cdssl/metrics.hpp"
#include "cdssl/pipeline.hpp"

namespace pl = cdssl::pipeline;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  bool resume = false;
  int threads = 0;
};

// Only the output directory and the thread count can come from the environment.
void apply_environment(Globals& g) {
  if (g.out.empty())
    if (const char* v = std::getenv("CDSSL_OUT"); v && *v) g.out = v;
  if (g.threads == 0)
    if (const char* v = std::getenv("CDSSL_THREADS"); v && *v) {
      try {
        g.threads = std::stoi(v);
      } catch (const std::exception&) {
        throw std::invalid_argument(std::string("CDSSL_THREADS is not an integer: ") + v);
      }
      if (g.threads < 1) throw std::invalid_argument("CDSSL_THREADS must be >= 1");
    }
}

pl::ExperimentConfig load(const Globals& g) {
  if (g.config.empty()) throw std::invalid_argument("--config is required");
  pl::ExperimentConfig cfg = pl::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.threads > 0) cfg.threads = g.threads;
  return cfg;
}

pl::RunOptions options(const Globals& g) {
  pl::RunOptions o;
  o.resume = g.resume;
  o.log = &std::cerr;
  o.threads = g.threads;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain self-supervised pretraining and regression fine-tuning on synthetic volumes"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "training seed (overrides the config)");
  app.add_option("--out", g.out, "run directory (overrides the config and CDSSL_OUT)");
  app.add_flag("--resume", g.resume, "skip steps whose artifacts match the current config");
  app.add_option("--threads", g.threads, "worker threads (overrides CDSSL_THREADS)")->check(CLI::PositiveNumber);

  auto* prepare = app.add_subcommand("prepare", "synthesize the cohort, preprocess volumes and build splits");
  auto* pretrain = app.add_subcommand("pretrain", "run the configured pretraining stages in order");
  auto* finetune = app.add_subcommand("finetune", "fine-tune one regressor per fold");
  auto* evaluate = app.add_subcommand("evaluate", "predict validation and test sets and write the reports");
  auto* run = app.add_subcommand("run", "full pipeline: prepare, pretrain, finetune, evaluate, report, saliency");

  auto* sal = app.add_subcommand("saliency", "GradCAM heatmaps for test subjects");
  std::string layer;
  int count = -1;
  sal->add_option("--layer", layer, "conv block tag, default the last spatial block");
  sal->add_option("--count", count, "number of subjects (default from config)");

  auto* compare = app.add_subcommand("compare", "Steiger test between runs on a shared test set");
  std::vector<std::string> runs;
  std::string test_set = "in_study";
  compare->add_option("runs", runs, "run directories (two or more)")->required()->expected(2, -1);
  compare->add_option("--test-set", test_set, "val, in_study or an out-study name");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_environment(g);
    if (compare->parsed()) {
      std::vector<cdssl::metrics::SteigerResult> results;
      std::vector<std::string> tags;
      for (const auto& r : runs) tags.push_back(std::filesystem::path(r).filename().string());
      for (size_t i = 0; i < runs.size(); ++i)
        for (size_t j = i + 1; j < runs.size(); ++j) {
          auto res = pl::compare_runs(runs[i], runs[j], test_set);
          res.model_a = tags[i];
          res.model_b = tags[j];
          std::cout << cdssl::metrics::to_json(res).dump() << "\n";
          results.push_back(res);
        }
      if (!g.out.empty()) {
        std::filesystem::create_directories(g.out);
        std::ofstream(std::filesystem::path(g.out) / ("significance_" + test_set + ".csv"))
            << cdssl::metrics::significance_csv(tags, results);
      }
      return 0;
    }

    const pl::ExperimentConfig cfg = load(g);
    const pl::RunLayout layout{cfg.output_dir};
    const pl::RunOptions opt = options(g);
    if (run->parsed()) {
      pl::run_pipeline(cfg, opt);
      std::cout << std::ifstream(layout.reports() / "summary.txt").rdbuf();
    } else if (prepare->parsed()) {
      pl::step_prepare(cfg, layout, opt);
    } else if (pretrain->parsed()) {
      pl::step_prepare(cfg, layout, {true, opt.log, opt.threads});
      pl::step_pretrain(cfg, layout, opt);
    } else if (finetune->parsed()) {
      pl::step_prepare(cfg, layout, {true, opt.log, opt.threads});
      pl::step_finetune(cfg, layout, opt);
    } else if (evaluate->parsed()) {
      pl::step_evaluate(cfg, layout, opt);
      pl::emit_report(layout.root);
      std::cout << std::ifstream(layout.reports() / "summary.txt").rdbuf();
    } else if (sal->parsed()) {
      pl::step_saliency(cfg, layout, opt, layer, count);
    }
  } catch (const pl::StepError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
