// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Criteria 4 and 7-10 share
// full toy training runs written under --work.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "ctc_oracle.hpp"
#include "helpers.hpp"
#include "mtlab/analysis.hpp"
#include "mtlab/gradcheck.hpp"
#include "mtlab/reports.hpp"
#include "mtlab/shrink.hpp"
#include "mtlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace mtlab;
using mtlab::testing::random_tensor;

namespace {

// Pinned tolerances and budgets.
constexpr double kCtcTol = 1e-10;
constexpr double kCtcSeconds = 10.0;
constexpr double kGradRtol = 1e-4;
constexpr std::size_t kGradSeeds = 20;
constexpr double kGradSeconds = 120.0;
constexpr double kClosedFormTol = 1e-12;
constexpr double kEntropyTol = 1e-9;
constexpr double kShrinkBand = 0.10;
constexpr double kAccuracyFloor = 0.90;
constexpr double kTrainSeconds = 15 * 60.0;
constexpr std::uint64_t kAcceptanceSeed = 7;
constexpr std::uint64_t kConsistencySeeds[] = {7, 8, 9};

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::vector<double> log_softmax_rows(std::span<const double> x, std::size_t classes) {
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t r = 0; r < out.size() / classes; ++r) {
    const auto row = std::span(out).subspan(r * classes, classes);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    for (double& v : row) v -= mx + std::log(z);
  }
  return out;
}

// --- 1 ---------------------------------------------------------------------

Outcome ctc_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> dist(0.0, 1.5);
  double worst = 0.0;
  std::size_t done = 0;
  while (done < 200) {
    const std::size_t V = 1 + rng() % 4;
    const std::size_t C = V + 1;
    std::vector<int> target(1 + rng() % 3);
    for (auto& t : target) t = 1 + static_cast<int>(rng() % V);
    const std::size_t need = ctc_min_frames(target);
    if (need > 6) continue;
    const std::size_t T = need + rng() % (7 - need);
    std::vector<double> x(T * C);
    for (auto& v : x) v = dist(rng);
    const auto lp = log_softmax_rows(x, C);
    const double brute = -std::log(mtlab::testing::enumerate_ctc(lp, T, C, target).probability);
    worst = std::max(worst, std::abs(ctc_neg_log_likelihood(lp, T, C, target) - brute));
    ++done;
  }
  const double secs = seconds_since(start);
  return {worst <= kCtcTol && secs < kCtcSeconds,
          fmt("200 instances, max |forward - enumeration| = %.3g (tol %.0e), %.2f s (limit %.0f s)", worst, kCtcTol,
              secs, kCtcSeconds)};
}

// --- 2 ---------------------------------------------------------------------

Outcome gradients() {
  const auto start = Clock::now();
  GradcheckOptions opt;
  opt.rtol = kGradRtol;
  std::map<std::string, std::size_t> passed;
  std::string first_failure;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<NamedTensor>& in) {
    const auto r = gradcheck(f, in, opt);
    if (r.ok()) {
      ++passed[name];
    } else if (first_failure.empty()) {
      first_failure = name + ": " + r.summary();
    }
  };

  // Each loss on its own inputs.
  for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    const std::uint64_t k = 1000 * (seed + 1);
    auto logits = random_tensor({2, 3, 6}, k + 1);
    const std::vector<int> targets{1, 2, 5, 3, 0, 4};
    check("ce", [&] { return ce_loss(logits, targets, 0); }, {{"logits", logits}});

    auto acoustic = random_tensor({2, 6, 4}, k + 2);
    const std::vector<std::size_t> frames{6, 4};
    const std::vector<std::vector<int>> ctc_targets{{1, 1, 3}, {2}};
    check("ctc", [&] { return ctc_loss(log_softmax(acoustic), frames, ctc_targets); }, {{"x", acoustic}});

    auto speech = random_tensor({3, 4, 5}, k + 3);
    auto text = random_tensor({3, 3, 5}, k + 4);
    const std::vector<std::size_t> ls{4, 2, 3}, lt{3, 1, 2};
    check("contrastive", [&] { return contrastive_loss(speech, ls, text, lt); }, {{"s", speech}, {"t", text}});

    auto ext = random_tensor({2, 3, 4}, k + 5);
    auto att = random_tensor({2, 3, 4}, k + 6);
    const std::vector<std::size_t> lc{3, 2};
    check("consistency",
          [&] { return consistency_loss(std::vector<Tensor>{ext}, std::vector<Tensor>{att}, lc); },
          {{"ext", ext}, {"att", att}});
  }

  // The weighted total through a small model, on every parameter group.
  RunConfig config;
  config.model.d_model = 8;
  config.model.n_heads = 2;
  config.model.ffn_dim = 16;
  std::size_t groups = 0;
  for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    config.model.seed = 100 + seed;
    const Model model(config.model);
    const Corpus corpus(config.corpus);
    const std::vector<std::uint64_t> seeds{3 * seed + 1, 3 * seed + 2};
    const auto batch = corpus.batch(seeds);
    ForwardOptions fo = training_options(config, config.training.steps, nullptr);
    fo.want_clean_text = true;
    const std::vector<Task> tasks{Task::ST, Task::ASR, Task::MT};
    LossWeights w;
    w.asr = 0.7;
    w.mt = 0.4;
    GradcheckOptions model_opt = opt;
    model_opt.max_entries_per_tensor = 2;
    model_opt.seed = seed;
    const auto r = gradcheck(
        [&] { return compute_losses(model.forward(batch, tasks, fo), model.symbols(), w, true, true).total; },
        model.params().tensors(), model_opt);
    groups = model.params().groups().size();
    if (r.ok()) {
      ++passed["total"];
    } else if (first_failure.empty()) {
      first_failure = "total: " + r.summary();
    }
  }

  const double secs = seconds_since(start);
  bool ok = secs < kGradSeconds;
  std::string counts;
  for (const char* name : {"ce", "ctc", "contrastive", "consistency", "total"}) {
    ok = ok && passed[name] == kGradSeeds;
    counts += fmt("%s %zu/%zu, ", name, passed[name], kGradSeeds);
  }
  std::string detail = counts + fmt("total over %zu parameter groups, rtol %.0e, %.1f s (limit %.0f s)", groups,
                                    kGradRtol, secs, kGradSeconds);
  if (!first_failure.empty()) detail += "; first failure " + first_failure;
  return {ok, detail};
}

// --- 3 ---------------------------------------------------------------------

Outcome impact_hand_cases() {
  using Vecs = std::vector<std::vector<double>>;
  const Vecs st{{1.0, -2.0, 0.5}, {0.3, 0.3, 0.1}};
  const double zero = task_impact(Vecs{{0, 0, 0}, {0, 0, 0}}, st);
  const double half = task_impact(st, st);
  const double pyth = task_impact(Vecs{{0.0, 4.0}}, Vecs{{3.0, 0.0}});
  return {zero == 0.0 && half == 0.5 && pyth == 0.8,
          fmt("zero gradient %.17g, equal gradients %.17g, 3-4-5 case %.17g (expected 0, 0.5, 0.8 exactly)", zero,
              half, pyth)};
}

// --- 4 ---------------------------------------------------------------------

Outcome weight_schedule(const TrainResult& run) {
  double worst = 0.0;
  for (double m : {0.2, 0.5, 0.83, 0.97}) {
    for (double s : {500.0, 1000.0}) {
      double w = 1.0, exponent = 0.0;
      for (double u = 500; u <= 4000; u += 500) {
        w = update_weight(w, m, u, s);
        exponent += u / s;
        worst = std::max(worst, std::abs(w - std::pow(m, exponent)));
      }
    }
  }
  std::map<Task, std::vector<WeightEvent>> per_task;
  for (const auto& e : run.history) per_task[e.task].push_back(e);
  bool monotone = true;
  std::map<Task, std::size_t> pruned_at;
  for (const auto& [task, events] : per_task) {
    double prev = 1.0;
    for (const auto& e : events) {
      monotone = monotone && e.w <= prev;
      prev = e.w;
      if (e.w < RunConfig{}.scheduler.prune_threshold && !pruned_at.contains(task)) pruned_at[task] = e.step;
    }
  }
  const bool asr_pruned = pruned_at.contains(Task::ASR);
  const bool order = asr_pruned && (!pruned_at.contains(Task::MT) || pruned_at[Task::ASR] < pruned_at[Task::MT]);
  auto first_w = [&](Task t) { return per_task[t].empty() ? 1.0 : per_task[t].front().w; };
  auto prune_step = [&](Task t) { return pruned_at.contains(t) ? std::to_string(pruned_at[t]) : std::string("never"); };
  return {worst <= kClosedFormTol && monotone && order,
          fmt("closed form max err %.3g (tol %.0e); first update ASR %.3f, MT %.3f; pruned ASR at %s, MT at %s; "
              "monotone %s",
              worst, kClosedFormTol, first_w(Task::ASR), first_w(Task::MT), prune_step(Task::ASR).c_str(),
              prune_step(Task::MT).c_str(), monotone ? "yes" : "no")};
}

// --- 5 ---------------------------------------------------------------------

Outcome entropy_exactness() {
  double worst_uniform = 0.0, worst_onehot = 0.0;
  for (std::size_t n = 1; n <= 64; ++n) {
    worst_uniform = std::max(worst_uniform, std::abs(row_entropy_bits(std::vector<double>(n, 1.0 / n)) - std::log2(n)));
    std::vector<double> hot(n, 0.0);
    hot[n / 2] = 1.0;
    worst_onehot = std::max(worst_onehot, std::abs(row_entropy_bits(hot)));
  }
  std::mt19937_64 rng(5);
  std::gamma_distribution<double> g(0.3);
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> row(1 + rng() % 40);
    double z = 0.0;
    for (auto& v : row) z += (v = g(rng) + 1e-300);
    for (auto& v : row) v /= z;
    const double h = row_entropy_bits(row);
    if (h < -kEntropyTol || h > std::log2(static_cast<double>(row.size())) + kEntropyTol) ++violations;
  }
  return {worst_uniform <= kEntropyTol && worst_onehot == 0.0 && violations == 0,
          fmt("uniform max err %.3g (tol %.0e), one-hot max %.3g, bound violations %zu/1000", worst_uniform,
              kEntropyTol, worst_onehot, violations)};
}

// --- 6 ---------------------------------------------------------------------

Outcome lbm_preservation() {
  Initializer init(5);
  const LookBack lb = LookBack::create(init, 4, 8);
  std::mt19937_64 rng(77);
  const std::size_t classes = 3;
  std::size_t dead_frames = 0, frames_checked = 0, path_mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 4 + rng() % 12;
    auto features = random_tensor({1, T, 4}, 5000 + trial);
    std::normal_distribution<double> dist(0.0, 0.8);
    std::vector<double> x(T * classes);
    for (auto& v : x) v = dist(rng);
    const auto lp = log_softmax_rows(x, classes);
    const std::vector<std::size_t> lengths{T};
    const auto r = shrink_sequence(features, lengths, lp, classes, &lb);
    sum(r.features).backward();
    const auto g = features.grad();
    const auto& s = r.sequences[0];
    if (expand_runs(s) != ctc_greedy_path(lp, classes).tokens) ++path_mismatches;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.seg_end[i] == s.seg_start[i]) continue;
      for (std::size_t f = s.seg_start[i]; f <= s.seg_end[i]; ++f) {
        double norm = 0.0;
        for (std::size_t c = 0; c < 4; ++c) norm += std::abs(g[f * 4 + c]);
        ++frames_checked;
        if (norm == 0.0) ++dead_frames;
      }
    }
  }
  return {dead_frames == 0 && path_mismatches == 0 && frames_checked > 0,
          fmt("100 instances, %zu multi-frame segment frames, %zu without gradient; %zu decompression mismatches",
              frames_checked, dead_frames, path_mismatches)};
}

// --- training runs ---------------------------------------------------------

RunConfig acceptance_config(std::uint64_t seed) {
  RunConfig c;
  c.corpus.vocab_size = 20;
  c.corpus.max_src_len = 8;
  c.corpus.expansion_min = 2;
  c.corpus.expansion_max = 4;
  c.training.steps = 4000;
  c.training.batch_size = 32;
  c.override_seed(seed);
  return c;
}

TrainResult train_into(const fs::path& dir, std::uint64_t seed) {
  fs::remove_all(dir);
  std::cerr << "training seed " << seed << " into " << dir.string() << std::endl;
  TrainOptions o;
  o.out_dir = dir.string();
  return train(acceptance_config(seed), o);
}

Outcome shrink_ratio(const fs::path& run_dir) {
  const auto eval = shrink_eval(run_dir.string());
  const double gap = std::abs(eval.final_ratio - eval.oracle_ratio);
  return {gap <= kShrinkBand, fmt("measured ratio %.4f vs alignment oracle %.4f, gap %.1f points (band %.0f)",
                                  eval.final_ratio, eval.oracle_ratio, 100 * gap, 100 * kShrinkBand)};
}

Outcome toy_learning(const TrainResult& run) {
  const double acc = run.accuracy ? run.accuracy->accuracy : 0.0;
  return {acc >= kAccuracyFloor && acc > run.copy_baseline.accuracy && run.seconds < kTrainSeconds,
          fmt("ST greedy token accuracy %.4f (floor %.2f), copy baseline %.4f, training %.0f s (limit %.0f s)", acc,
              kAccuracyFloor, run.copy_baseline.accuracy, run.seconds, kTrainSeconds)};
}

Outcome consistency_sanity(const std::vector<fs::path>& runs) {
  // Self cosine on the first trained model.
  const auto first = list_checkpoints(runs.front().string()).back().second;
  const auto ckpt = load_checkpoint(first);
  const Model model = restore_model(ckpt);
  const Corpus corpus(ckpt.config.corpus);
  ForwardOptions fo = analysis_options(ckpt.config);
  fo.asr_variant = AsrVariant::Ce;
  const auto probe = probe_pool(1, 64);
  const auto snap = capture_gradients(model, corpus.batch(probe), Task::ST, fo);
  const double self = grad_consistency(snap, snap, [](const GroupKey&) { return true; });

  // A-Enc vs decoder ASR-ST consistency, ASR through the decoder so both
  // partitions see both tasks.
  std::size_t votes = 0;
  std::string per_seed;
  for (const auto& dir : runs) {
    AnalyzeOptions ao;
    const auto files = run_preset("modules-bar", dir.string(), ao);
    const auto table_csv = files.front().csv;  // consistency_asr_st.csv
    std::map<std::string, std::vector<double>> by_partition;
    std::istringstream in(table_csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> cells;
      std::stringstream ls(line);
      for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
      by_partition[cells[0]].push_back(std::stod(cells[3]));
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
    };
    const double aenc = mean(by_partition[to_string(Partition::AEnc)]);
    const double dec = mean(by_partition[to_string(Partition::Decoder)]);
    if (aenc > dec) ++votes;
    per_seed += fmt("%s A-Enc %.3f vs decoder %.3f; ", dir.filename().string().c_str(), aenc, dec);
  }
  const bool majority = 2 * votes > runs.size();
  return {self == 1.0 && majority,
          fmt("self cosine %.17g; ", self) + per_seed + fmt("%zu/%zu seeds agree", votes, runs.size())};
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  return fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b);
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  std::size_t files = 0, differing = 0;
  for (const char* name : {"metrics.jsonl", "weights.csv", "config.json"}) {
    ++files;
    if (!same_bytes(a / name, b / name)) ++differing;
  }
  const auto ca = list_checkpoints(a.string()), cb = list_checkpoints(b.string());
  if (ca.size() != cb.size()) ++differing;
  for (std::size_t i = 0; i < std::min(ca.size(), cb.size()); ++i) {
    ++files;
    if (!same_bytes(ca[i].second, cb[i].second)) ++differing;
  }
  return {differing == 0, fmt("%zu files compared (metrics, weights, config, %zu checkpoints), %zu differ", files,
                              ca.size(), differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "mtlab_acceptance").string();
  app.add_option("--work", work, "Directory for the training runs");
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << " " << name << ": " << o.detail << std::endl;
  };

  const fs::path root(work);
  std::vector<fs::path> runs;
  std::map<std::uint64_t, TrainResult> results;
  std::string train_error;
  try {
    for (std::uint64_t seed : kConsistencySeeds) {
      runs.push_back(root / ("seed" + std::to_string(seed)));
      results[seed] = train_into(runs.back(), seed);
    }
  } catch (const std::exception& e) {
    train_error = e.what();
  }
  const fs::path main_run = root / ("seed" + std::to_string(kAcceptanceSeed));
  auto need_run = [&](std::uint64_t seed) -> const TrainResult& {
    if (!train_error.empty()) throw std::runtime_error("training failed: " + train_error);
    return results.at(seed);
  };

  report(1, "ctc-oracle", ctc_oracle);
  report(2, "gradients", gradients);
  report(3, "impact-hand-cases", impact_hand_cases);
  report(4, "weight-schedule", [&] { return weight_schedule(need_run(kAcceptanceSeed)); });
  report(5, "entropy", entropy_exactness);
  report(6, "lbm-preservation", lbm_preservation);
  report(7, "shrink-ratio", [&] {
    need_run(kAcceptanceSeed);
    return shrink_ratio(main_run);
  });
  report(8, "toy-learning", [&] { return toy_learning(need_run(kAcceptanceSeed)); });
  report(9, "consistency-sanity", [&] {
    need_run(kAcceptanceSeed);
    return consistency_sanity(runs);
  });
  report(10, "determinism", [&] {
    need_run(kAcceptanceSeed);
    const fs::path again = root / "seed7_repeat";
    train_into(again, kAcceptanceSeed);
    return determinism(main_run, again);
  });

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
