// SPDX-License-Identifier: Apache-2.0
//
// Analysis presets over a run directory and the shrink evaluation report.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtlab/analysis.hpp"
#include "mtlab/checkpoint.hpp"

namespace mtlab {

struct ReportFile {
  std::string name;  // file name inside the report directory
  std::string csv;
};

struct AnalyzeOptions {
  std::size_t n = 200;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  /// Checkpoint to analyze instead of the run's latest one.
  std::optional<std::string> checkpoint;
  CosineMode mode = CosineMode::Concatenate;
};

/// modules-bar, per-layer, asr-variants, shrink-cl, over-training, entropy.
const std::vector<std::string>& analyze_presets();

/// Loads `path` and checks it was written under `config`.
Checkpoint load_matching_checkpoint(const std::string& path, const RunConfig& config);

/// Forward settings for probes: the run's architecture toggles with
/// shrinking active and every source of noise off.
ForwardOptions analysis_options(const RunConfig& config);

/// Runs one preset against the checkpoints of `run_dir`.
std::vector<ReportFile> run_preset(const std::string& preset, const std::string& run_dir,
                                   const AnalyzeOptions& options);

/// Writes the files into `out_dir` (created if needed).
std::vector<std::string> write_reports(const std::string& out_dir, const std::vector<ReportFile>& files);

struct ShrinkEval {
  /// CSV with header step,batch,n_mean,m_mean,ratio.
  std::string csv;
  /// Length ratio implied by the generator alignments of the same batches.
  double oracle_ratio = 0.0;
  /// Ratio of the last checkpoint over all batches.
  double final_ratio = 0.0;
};

/// Shrinks `batches` evaluation batches of `batch_size` at every checkpoint.
ShrinkEval shrink_eval(const std::string& run_dir, std::size_t batches = 4, std::size_t batch_size = 64);

}  // namespace mtlab
