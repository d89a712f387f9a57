// SPDX-License-Identifier: Apache-2.0

#include "mtlab/reports.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtlab/trainer.hpp"

namespace mtlab {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string pair_name(Task a, Task b) { return lower(to_string(a)) + "_" + lower(to_string(b)); }

struct RunContext {
  RunConfig config;
  std::vector<std::pair<std::size_t, std::string>> checkpoints;
};

RunContext open_run(const std::string& run_dir) {
  const fs::path config_path = fs::path(run_dir) / "config.json";
  if (!fs::exists(config_path)) throw std::runtime_error("analyze: " + config_path.string() + " not found");
  RunContext ctx{load_run_config(config_path.string()), list_checkpoints(run_dir)};
  if (ctx.checkpoints.empty()) throw std::runtime_error("analyze: no checkpoints in " + run_dir);
  return ctx;
}

ProtocolOptions protocol(const RunConfig& config, const AnalyzeOptions& options, AsrVariant asr) {
  ProtocolOptions p;
  p.n = options.n;
  p.repeats = options.repeats;
  p.seed = options.seed;
  p.mode = options.mode;
  p.forward = analysis_options(config);
  p.forward.asr_variant = asr;
  return p;
}

std::vector<std::uint64_t> pool_for(const RunConfig& config, const AnalyzeOptions& options) {
  return probe_pool(mix_seed(config.training.seed, options.seed), std::max<std::size_t>(2 * options.n, 1));
}

ReportFile keep_rows(std::string name, ConsistencyReport report, Partition p, SublayerKind k) {
  std::erase_if(report.rows, [&](const ConsistencyRow& r) { return r.partition != p || r.kind != k; });
  return {std::move(name), report.to_csv()};
}

}  // namespace

const std::vector<std::string>& analyze_presets() {
  static const std::vector<std::string> names{"modules-bar", "per-layer", "asr-variants",
                                              "shrink-cl", "over-training", "entropy"};
  return names;
}

Checkpoint load_matching_checkpoint(const std::string& path, const RunConfig& config) {
  auto ckpt = load_checkpoint(path);
  if (dump_config(ckpt.config) != dump_config(config)) {
    throw std::runtime_error("checkpoint " + path + " was written under a different config");
  }
  return ckpt;
}

ForwardOptions analysis_options(const RunConfig& config) {
  ForwardOptions o = training_options(config, config.training.steps, nullptr);
  o.text_noise_prob = 0.0;
  o.want_clean_text = false;
  return o;
}

std::vector<ReportFile> run_preset(const std::string& preset, const std::string& run_dir,
                                   const AnalyzeOptions& options) {
  const auto& names = analyze_presets();
  if (std::find(names.begin(), names.end(), preset) == names.end()) {
    throw std::invalid_argument("unknown preset '" + preset + "'");
  }
  const RunContext ctx = open_run(run_dir);
  const RunConfig& config = ctx.config;
  const Corpus corpus(config.corpus);
  const auto pool = pool_for(config, options);
  std::vector<ReportFile> out;

  if (preset == "over-training") {
    std::vector<CheckpointRef> refs;
    for (const auto& [step, path] : ctx.checkpoints) refs.push_back({step, path});
    const CheckpointLoader loader = [&](const std::string& path) -> std::optional<Model> {
      if (!fs::exists(path)) return std::nullopt;
      return restore_model(load_matching_checkpoint(path, config));
    };
    for (auto [a, b] : {std::pair{Task::ASR, Task::ST}, std::pair{Task::MT, Task::ST}}) {
      const auto series =
          consistency_over_training(refs, loader, corpus, pool, a, b, protocol(config, options, AsrVariant::Ce));
      std::ostringstream csv;
      csv << "step,partition,kind,layer,mean,std\n";
      for (const auto& r : series) {
        csv << r.step << ',' << to_string(r.row.partition) << ',' << to_string(r.row.kind) << ','
            << (r.row.layer ? std::to_string(*r.row.layer) : "all") << ',' << fmt(r.row.mean) << ','
            << fmt(r.row.std) << '\n';
      }
      out.push_back({"consistency_training_" + pair_name(a, b) + ".csv", csv.str()});
    }
    return out;
  }

  const std::string path = options.checkpoint.value_or(ctx.checkpoints.back().second);
  const Model model = restore_model(load_matching_checkpoint(path, config));

  if (preset == "modules-bar") {
    // ASR through the decoder so every module sees all three tasks.
    const auto p = protocol(config, options, AsrVariant::Ce);
    for (auto [a, b] : {std::pair{Task::ASR, Task::ST}, std::pair{Task::MT, Task::ST}, std::pair{Task::ASR, Task::MT}}) {
      out.push_back({"consistency_" + pair_name(a, b) + ".csv",
                     consistency_protocol(model, corpus, pool, a, b, p).to_csv()});
    }
  } else if (preset == "per-layer") {
    auto p = protocol(config, options, AsrVariant::Ce);
    p.per_layer = true;
    for (auto [a, b] : {std::pair{Task::ASR, Task::ST}, std::pair{Task::MT, Task::ST}}) {
      out.push_back(keep_rows("consistency_layers_" + pair_name(a, b) + ".csv",
                              consistency_protocol(model, corpus, pool, a, b, p), Partition::TEnc,
                              SublayerKind::Atten));
    }
  } else if (preset == "asr-variants") {
    for (auto [variant, tag] : {std::pair{AsrVariant::Ctc, "ctc"}, std::pair{AsrVariant::Ce, "ce"},
                                std::pair{AsrVariant::CtcCe, "ctcce"}}) {
      out.push_back({std::string("consistency_asr_") + tag + "_st.csv",
                     consistency_protocol(model, corpus, pool, Task::ASR, Task::ST, protocol(config, options, variant))
                         .to_csv()});
    }
  } else if (preset == "shrink-cl") {
    struct Variant {
      const char* tag;
      bool shrink, lbm;
      double cl;
    };
    for (const Variant& v : {Variant{"noshrink", false, false, 0.0}, Variant{"shrink", true, false, 0.0},
                             Variant{"lbm", true, true, 0.0}, Variant{"cl", false, false, config.w_cl}}) {
      auto p = protocol(config, options, AsrVariant::Ctc);
      p.forward.use_shrink = v.shrink;
      p.forward.use_lbm = v.lbm;
      p.st_contrastive_weight = v.cl;
      out.push_back({std::string("consistency_mt_st_") + v.tag + ".csv",
                     consistency_protocol(model, corpus, pool, Task::MT, Task::ST, p).to_csv()});
    }
  } else if (preset == "entropy") {
    std::vector<std::uint64_t> seeds(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(options.n));
    std::sort(seeds.begin(), seeds.end());
    const auto batch = corpus.batch(seeds);
    std::ostringstream csv;
    csv << "layer,stream,IE\n";
    auto emit = [&](const char* stream, Task task, bool shrink) {
      ForwardOptions o = analysis_options(config);
      o.record_attention = true;
      o.use_shrink = shrink;
      const auto r = model.forward_task(batch, task, o);
      const auto ie = attention_entropy(r.encoding->attention);
      for (std::size_t l = 0; l < ie.size(); ++l) csv << l << ',' << stream << ',' << fmt(ie[l]) << '\n';
    };
    emit("text", Task::MT, false);
    emit("speech", Task::ST, false);
    emit("speech_shrunk", Task::ST, true);
    out.push_back({"entropy.csv", csv.str()});
  }
  return out;
}

std::vector<std::string> write_reports(const std::string& out_dir, const std::vector<ReportFile>& files) {
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (const auto& f : files) {
    const fs::path target = fs::path(out_dir) / f.name;
    std::ofstream out(target, std::ios::binary);
    out << f.csv;
    if (!out) throw std::runtime_error("cannot write " + target.string());
    written.push_back(target.string());
  }
  return written;
}

ShrinkEval shrink_eval(const std::string& run_dir, std::size_t batches, std::size_t batch_size) {
  const RunContext ctx = open_run(run_dir);
  const Corpus corpus(ctx.config.corpus);
  auto rng = make_rng(ctx.config.training.seed, 5);
  std::vector<SyntheticBatch> data;
  std::size_t runs = 0, frames = 0;
  for (std::size_t i = 0; i < batches; ++i) {
    std::vector<std::uint64_t> seeds(batch_size);
    for (auto& s : seeds) s = rng();
    data.push_back(corpus.batch(seeds));
    for (std::size_t b = 0; b < batch_size; ++b) {
      runs += count_runs(data.back().alignments[b]);
      frames += data.back().speech_lens[b];
    }
  }
  ShrinkEval result;
  result.oracle_ratio = frames ? static_cast<double>(runs) / static_cast<double>(frames) : 0.0;
  std::ostringstream csv;
  csv << "step,batch,n_mean,m_mean,ratio\n";
  ForwardOptions o = analysis_options(ctx.config);
  o.use_shrink = true;
  for (const auto& [step, path] : ctx.checkpoints) {
    const Model model = restore_model(load_matching_checkpoint(path, ctx.config));
    std::size_t all_frames = 0, all_positions = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto r = model.forward_task(data[i], Task::ST, o);
      const auto& s = *r.shrink;
      const double n = static_cast<double>(data[i].batch_size);
      csv << step << ',' << i << ',' << fmt(static_cast<double>(s.frames_total) / n) << ','
          << fmt(static_cast<double>(s.positions_total) / n) << ',' << fmt(s.length_ratio()) << '\n';
      all_frames += s.frames_total;
      all_positions += s.positions_total;
    }
    result.final_ratio = static_cast<double>(all_positions) / static_cast<double>(all_frames);
  }
  result.csv = csv.str();
  return result;
}

}  // namespace mtlab
