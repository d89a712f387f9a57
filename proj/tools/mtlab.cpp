// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: train, analyze, shrink-eval, export-corpus and
// export-plots. Exit codes: 0 ok, 1 config error, 2 runtime error, 3 NaN abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "mtlab/plot.hpp"
#include "mtlab/reports.hpp"
#include "mtlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace mtlab;

namespace {

constexpr int kConfigError = 1, kRuntimeError = 2, kNanAbort = 3;

RunConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig config = path.empty() ? RunConfig{} : load_run_config(path);
  if (seed) config.override_seed(*seed);
  config.validate();
  return config;
}

void print_train_result(const TrainResult& r) {
  std::cout << "finished at step " << r.last_step << " in " << r.seconds << " s\n";
  if (r.accuracy) std::cout << "ST greedy token accuracy " << r.accuracy->accuracy << "\n";
  std::cout << "copy baseline " << r.copy_baseline.accuracy << "\n";
  if (r.final_length_ratio) std::cout << "length ratio " << *r.final_length_ratio << "\n";
  for (Task t : r.pruned) std::cout << "pruned " << to_string(t) << "\n";
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "last checkpoint " << r.last_checkpoint << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task speech translation toy lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir, resume, checkpoint, preset;
  std::optional<std::uint64_t> seed;
  std::size_t stop_after = 0, n = 200, repeats = 5, count = 100, batches = 4, batch_size = 64;
  std::string cosine_mode = "concatenate";
  bool quiet = false, plots = false;

  auto* train_cmd = app.add_subcommand("train", "Train a model and write a run directory");
  train_cmd->add_option("--config", config_path, "Run config JSON (defaults when omitted)");
  train_cmd->add_option("--out", out_dir, "Run directory")->required();
  train_cmd->add_option("--seed", seed, "Override the training and model seeds");
  train_cmd->add_option("--resume", resume, "Continue from this checkpoint");
  train_cmd->add_option("--stop-after", stop_after, "Stop after this step");
  train_cmd->add_flag("--quiet", quiet, "No progress lines");

  auto* analyze_cmd = app.add_subcommand("analyze", "Gradient consistency and entropy reports");
  analyze_cmd->add_option("--run", run_dir, "Run directory")->required();
  analyze_cmd->add_option("--preset", preset, "Report preset")
      ->required()
      ->check(CLI::IsMember(analyze_presets()));
  analyze_cmd->add_option("--config", config_path, "Expected run config; must match the run");
  analyze_cmd->add_option("--out", out_dir, "Report directory (default RUN/reports)");
  analyze_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to analyze (default: latest)");
  analyze_cmd->add_option("--seed", seed, "Probe sampling seed");
  analyze_cmd->add_option("--n", n, "Probe examples per repeat");
  analyze_cmd->add_option("--repeats", repeats, "Probe repeats");
  analyze_cmd->add_option("--cosine", cosine_mode, "concatenate or per_matrix");
  analyze_cmd->add_flag("--plots", plots, "Also write SVG charts");

  auto* shrink_cmd = app.add_subcommand("shrink-eval", "Length ratios of the shrink step per checkpoint");
  shrink_cmd->add_option("--run", run_dir, "Run directory")->required();
  shrink_cmd->add_option("--out", out_dir, "Report directory (default RUN/reports)");
  shrink_cmd->add_option("--batches", batches, "Evaluation batches");
  shrink_cmd->add_option("--batch-size", batch_size, "Examples per batch");

  auto* corpus_cmd = app.add_subcommand("export-corpus", "Dump generated samples as JSON lines");
  corpus_cmd->add_option("--config", config_path, "Run config JSON");
  corpus_cmd->add_option("--out", out_dir, "Output file (default stdout)");
  corpus_cmd->add_option("--seed", seed, "Override the seeds");
  corpus_cmd->add_option("--count", count, "Number of samples");

  auto* plots_cmd = app.add_subcommand("export-plots", "Render report CSVs as SVG");
  plots_cmd->add_option("--run", run_dir, "Report directory or run directory (uses RUN/reports)")->required();
  plots_cmd->add_option("--out", out_dir, "SVG directory (default: alongside the CSVs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*train_cmd) {
      RunConfig config = resolve_config(config_path, seed);
      TrainOptions options;
      options.out_dir = out_dir;
      options.resume_from = resume;
      options.stop_after = stop_after;
      options.log = quiet ? nullptr : &std::cout;
      print_train_result(train(config, options));
    } else if (*analyze_cmd) {
      if (!config_path.empty()) {
        const RunConfig expected = resolve_config(config_path, std::nullopt);
        const RunConfig actual = load_run_config((fs::path(run_dir) / "config.json").string());
        if (dump_config(expected) != dump_config(actual)) {
          throw ConfigError("config " + config_path + " does not match the run in " + run_dir);
        }
      }
      AnalyzeOptions options;
      options.n = n;
      options.repeats = repeats;
      options.seed = seed.value_or(0);
      options.mode = parse_cosine_mode(cosine_mode);
      if (!checkpoint.empty()) options.checkpoint = checkpoint;
      const std::string dir = out_dir.empty() ? (fs::path(run_dir) / "reports").string() : out_dir;
      const auto files = run_preset(preset, run_dir, options);
      for (const auto& path : write_reports(dir, files)) {
        std::cout << path << "\n";
        if (plots) {
          std::ifstream in(path);
          std::stringstream text;
          text << in.rdbuf();
          const fs::path svg = fs::path(path).replace_extension(".svg");
          std::ofstream(svg, std::ios::binary) << chart_for_csv(text.str(), fs::path(path).filename().string());
          std::cout << svg.string() << "\n";
        }
      }
    } else if (*shrink_cmd) {
      const auto r = shrink_eval(run_dir, batches, batch_size);
      const std::string dir = out_dir.empty() ? (fs::path(run_dir) / "reports").string() : out_dir;
      for (const auto& path : write_reports(dir, {{"shrink_eval.csv", r.csv}})) std::cout << path << "\n";
      std::cout << "final ratio " << r.final_ratio << ", alignment oracle " << r.oracle_ratio << "\n";
    } else if (*corpus_cmd) {
      const RunConfig config = resolve_config(config_path, seed);
      const Corpus corpus(config.corpus);
      auto rng = make_rng(config.training.seed, 6);
      std::vector<std::uint64_t> seeds(count);
      for (auto& s : seeds) s = rng();
      if (out_dir.empty()) {
        corpus.export_jsonl(seeds, std::cout);
      } else {
        std::ofstream out(out_dir);
        corpus.export_jsonl(seeds, out);
        if (!out) throw std::runtime_error("cannot write " + out_dir);
      }
    } else if (*plots_cmd) {
      fs::path reports = run_dir;
      if (fs::exists(reports / "reports")) reports /= "reports";
      for (const auto& path : export_plots(reports.string(), out_dir.empty() ? reports.string() : out_dir)) {
        std::cout << path << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NanAbort& e) {
    std::cerr << e.what() << "\n";
    return kNanAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
