// SPDX-License-Identifier: Apache-2.0

#include "mtlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "mtlab/analysis.hpp"

namespace mtlab {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Stream tags for per-step generators derived from (seed, step).
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kProbeStream = 3;
constexpr std::uint64_t kEvalStream = 4;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Keeps the rows of a JSON-lines file whose "step" is at most `step`.
void truncate_rows(const fs::path& path, std::size_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::size_t>() <= step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

ordered_json value_or_null(const Tensor& t) { return t.defined() ? ordered_json(t.item()) : ordered_json(nullptr); }

}  // namespace

void Adam::step(const ParamRegistry& registry, double lr) {
  const auto tensors = registry.tensors();
  if (state_.m.empty()) {
    for (const auto& t : tensors) {
      state_.m.emplace_back(t.tensor.numel(), 0.0);
      state_.v.emplace_back(t.tensor.numel(), 0.0);
    }
  }
  if (state_.m.size() != tensors.size()) throw std::logic_error("Adam: parameter list changed");
  ++state_.t;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.t));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor p = tensors[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

double learning_rate(double base, std::size_t step, std::size_t warmup) {
  const double u = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(std::max<std::size_t>(warmup, 1));
  return u < w ? base * u / w : base * std::sqrt(w / u);
}

std::vector<std::uint64_t> batch_seeds(const RunConfig& config, std::size_t step) {
  auto rng = make_rng(mix_seed(config.training.seed, step), kDataStream);
  std::vector<std::uint64_t> out(config.training.batch_size);
  for (auto& s : out) s = rng();
  return out;
}

std::vector<std::uint64_t> eval_seeds(const RunConfig& config) {
  auto rng = make_rng(config.training.seed, kEvalStream);
  std::vector<std::uint64_t> out(config.training.eval_samples);
  for (auto& s : out) s = rng();
  return out;
}

std::vector<std::uint64_t> probe_seeds(const RunConfig& config, std::size_t step) {
  auto rng = make_rng(mix_seed(config.training.seed, step), kProbeStream);
  std::vector<std::uint64_t> out(config.scheduler.k);
  for (auto& s : out) s = rng();
  return out;
}

ForwardOptions training_options(const RunConfig& config, std::size_t step, std::mt19937_64* rng) {
  ForwardOptions o;
  o.use_shrink = config.toggles.use_shrink;
  o.use_lbm = config.toggles.use_lbm;
  o.use_l2g = config.toggles.use_l2g;
  o.shrink_active = static_cast<double>(step) >
                    config.toggles.shrink_warmup_fraction * static_cast<double>(config.training.steps);
  o.asr_variant = config.toggles.asr_variant;
  o.text_noise_prob = config.toggles.text_noise_prob;
  o.want_clean_text = config.toggles.use_cl;
  o.rng = rng;
  return o;
}

AccuracyReport greedy_accuracy(const Model& model, const Corpus& corpus, std::span<const std::uint64_t> seeds,
                               const ForwardOptions& options, std::size_t chunk) {
  std::size_t correct = 0, total = 0;
  for (std::size_t off = 0; off < seeds.size(); off += chunk) {
    const auto part = seeds.subspan(off, std::min(chunk, seeds.size() - off));
    const auto batch = corpus.batch(part);
    const auto hyp = model.greedy_translate(batch, options);
    for (std::size_t b = 0; b < part.size(); ++b) {
      const auto ref = batch.tgt(b);
      for (std::size_t i = 0; i < ref.size(); ++i) correct += i < hyp[b].size() && hyp[b][i] == ref[i];
      total += ref.size();
    }
  }
  return {total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0, total};
}

AccuracyReport copy_baseline(const Corpus& corpus, std::span<const std::uint64_t> seeds) {
  std::size_t correct = 0, total = 0;
  for (auto s : seeds) {
    const auto sample = corpus.sample(s);
    for (std::size_t i = 0; i < sample.tgt.size(); ++i) correct += i < sample.src.size() && sample.src[i] == sample.tgt[i];
    total += sample.tgt.size();
  }
  return {total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0, total};
}

std::string checkpoint_path(const std::string& out_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step_%06zu.ckpt", step);
  return (fs::path(out_dir) / "checkpoints" / name).string();
}

std::vector<std::pair<std::size_t, std::string>> list_checkpoints(const std::string& out_dir) {
  std::vector<std::pair<std::size_t, std::string>> out;
  const fs::path dir = fs::path(out_dir) / "checkpoints";
  if (!fs::is_directory(dir)) return out;
  const std::regex pattern(R"(step_(\d+)\.ckpt)");
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) out.emplace_back(std::stoull(m[1].str()), entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string weights_csv(std::span<const WeightEvent> history) {
  std::ostringstream os;
  os.precision(17);
  os << "step,task,m,w\n";
  for (const auto& e : history) os << e.step << ',' << to_string(e.task) << ',' << e.m << ',' << e.w << '\n';
  return os.str();
}

TrainResult train(RunConfig config, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  std::optional<Checkpoint> resume;
  if (!options.resume_from.empty()) {
    resume = load_checkpoint(options.resume_from);
    config = resume->config;
  }
  config.validate();
  if (options.out_dir.empty()) throw ConfigError("train: output directory required");
  const fs::path out(options.out_dir);
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.json", dump_config(config));
  {
    ordered_json run;
    run["program"] = "mtlab";
    run["version"] = "0.1.0";
    run["checkpoint_format"] = kCheckpointVersion;
    run["seeds"] = {{"training", config.training.seed}, {"model", config.model.seed}, {"corpus", config.corpus.seed}};
    run["resumed_from"] = resume ? ordered_json(options.resume_from) : ordered_json(nullptr);
    write_text(out / "run.json", run.dump(2) + "\n");
  }

  const Corpus corpus(config.corpus);
  const Model model(config.model);
  const auto& registry = model.params();
  TaskWeights weights(config.scheduler, config.w_asr, config.w_mt);
  std::vector<Task> disabled;
  if (!config.toggles.use_asr) disabled.push_back(Task::ASR);
  if (!config.toggles.use_mt) disabled.push_back(Task::MT);
  for (Task t : disabled) weights.disable(t);
  Adam adam(config.training.beta1, config.training.beta2, config.training.adam_eps);

  std::size_t start = 1;
  TrainResult result;
  if (resume) {
    load_parameters(*resume, model);
    weights = TaskWeights::replay(config.scheduler, config.w_asr, config.w_mt, resume->state.history, disabled);
    adam.set_state(resume->state.adam);
    start = resume->state.step + 1;
    truncate_rows(out / "metrics.jsonl", resume->state.step);
    truncate_rows(out / "timing.jsonl", resume->state.step);
    result.last_checkpoint = options.resume_from;
  } else {
    write_text(out / "metrics.jsonl", "");
    write_text(out / "timing.jsonl", "");
  }
  std::ofstream metrics(out / "metrics.jsonl", std::ios::app);
  std::ofstream timing(out / "timing.jsonl", std::ios::app);

  const auto eval = eval_seeds(config);
  result.copy_baseline = copy_baseline(corpus, eval);
  const std::size_t steps = config.training.steps;
  const std::size_t end = options.stop_after ? std::min(options.stop_after, steps) : steps;
  const auto warmup = static_cast<std::size_t>(std::llround(config.training.warmup_fraction * static_cast<double>(steps)));

  auto save = [&](std::size_t step) {
    TrainerState st;
    st.step = step;
    st.last_update = weights.last_update();
    st.history = weights.history();
    st.disabled = disabled;
    st.adam = adam.state();
    const std::string path = checkpoint_path(options.out_dir, step);
    save_checkpoint(path, config, model, st);
    write_text(out / "weights.csv", weights_csv(weights.history()));
    result.last_checkpoint = path;
  };

  for (std::size_t u = start; u <= end; ++u) {
    const auto batch = corpus.batch(batch_seeds(config, u));
    auto rng = make_rng(mix_seed(config.training.seed, u), kNoiseStream);
    const ForwardOptions fo = training_options(config, u, &rng);
    std::vector<Task> tasks{Task::ST};
    for (Task t : {Task::ASR, Task::MT}) {
      if (weights.active(t)) tasks.push_back(t);
    }
    const auto fr = model.forward(batch, tasks, fo);
    LossWeights lw;
    lw.asr = weights.weight(Task::ASR);
    lw.mt = weights.weight(Task::MT);
    lw.cl = config.w_cl;
    auto bundle = compute_losses(fr, model.symbols(), lw, config.toggles.use_cl,
                                       config.toggles.use_consistency && config.toggles.use_l2g);
    const double total = bundle.total.item();
    if (!std::isfinite(total)) throw NanAbort(u, result.last_checkpoint);
    const double lr = learning_rate(config.training.learning_rate, u, warmup);
    bundle.total.backward();
    adam.step(registry, lr);
    registry.clear_grads();

    std::optional<double> ratio;
    if (const auto& st = fr.at(Task::ST); st.shrink) ratio = st.shrink->length_ratio();

    ordered_json sched = nullptr;
    if (config.toggles.use_scheduler && u % config.scheduler.update_every == 0) {
      ImpactDetail detail;
      const auto outcome = schedule_step(u, weights, [&](std::size_t step, std::span<const Task> aux) {
        detail = measure_task_impact(model, corpus, probe_seeds(config, step), aux, training_options(config, step, nullptr));
        return detail.m;
      });
      if (!outcome.warning.empty()) {
        result.warnings.push_back(outcome.warning);
        if (options.log) *options.log << "warning: " << outcome.warning << "\n";
      }
      if (outcome.updated) {
        sched = ordered_json::object();
        for (const auto& [t, m] : detail.m) sched[to_string(t)] = m;
        if (detail.m.contains(Task::MT)) {
          sched["MT_tenc"] = detail.m_tenc;
          sched["MT_dec"] = detail.m_dec;
        }
      }
    }

    std::optional<AccuracyReport> acc;
    if (u % config.training.eval_every == 0 || u == steps) {
      acc = greedy_accuracy(model, corpus, eval, training_options(config, u, nullptr));
      result.accuracy = acc;
    }

    if (u % config.training.log_every == 0 || u == steps || acc || !sched.is_null()) {
      ordered_json row;
      row["step"] = u;
      row["lr"] = lr;
      row["loss"] = {{"st", value_or_null(bundle.l_st)},
                     {"asr", value_or_null(bundle.l_asr)},
                     {"mt", value_or_null(bundle.l_mt)},
                     {"cl", value_or_null(bundle.l_cl)},
                     {"consistency", value_or_null(bundle.l_consistency)},
                     {"total", total}};
      row["weights"] = {{"asr", weights.weight(Task::ASR)}, {"mt", weights.weight(Task::MT)}};
      ordered_json active = ordered_json::array();
      for (Task t : tasks) active.push_back(to_string(t));
      row["active"] = active;
      row["shrink_active"] = fo.use_shrink && fo.shrink_active;
      row["length_ratio"] = ratio ? ordered_json(*ratio) : ordered_json(nullptr);
      row["oracle_ratio"] = oracle_length_ratio(batch);
      if (!sched.is_null()) row["impact"] = sched;
      if (acc) row["st_accuracy"] = acc->accuracy;
      metrics << row.dump() << "\n";
      metrics.flush();
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      timing << ordered_json{{"step", u}, {"elapsed_s", elapsed}}.dump() << "\n";
      if (options.log) {
        *options.log << "step " << u << " loss " << total << " st " << LossBundle::value(bundle.l_st) << " w_asr "
                     << weights.weight(Task::ASR) << " w_mt " << weights.weight(Task::MT);
        if (ratio) *options.log << " ratio " << *ratio;
        if (acc) *options.log << " acc " << acc->accuracy;
        *options.log << std::endl;
      }
    }
    if (u % config.training.checkpoint_every == 0 || u == end) save(u);
    if (ratio) result.final_length_ratio = ratio;
    result.last_step = u;
  }
  result.history = weights.history();
  for (Task t : {Task::ASR, Task::MT}) {
    if (weights.pruned(t)) result.pruned.push_back(t);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace mtlab
