// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mtlab/analysis.hpp"

namespace mtlab {
namespace {

struct AnalysisFixture : ::testing::Test {
  Corpus corpus{CorpusConfig{}};
  Model model{ModelConfig{}};
  SyntheticBatch batch = corpus.batch(std::vector<std::uint64_t>{21, 22, 23});
};

GradSnapshot negated(GradSnapshot s) {
  for (auto& [key, g] : s.groups) {
    for (auto& v : g.values) v = -v;
  }
  return s;
}

TEST_F(AnalysisFixture, SnapshotsFollowTheTaskPaths) {
  const auto asr = capture_gradients(model, batch, Task::ASR, {});
  const auto mt = capture_gradients(model, batch, Task::MT, {});
  for (const auto& [key, g] : asr.groups) EXPECT_EQ(key.partition, Partition::AEnc) << to_string(key);
  for (const auto& [key, g] : mt.groups) EXPECT_NE(key.partition, Partition::AEnc) << to_string(key);
  EXPECT_TRUE(mt.has({Partition::Decoder, 0, SublayerKind::Atten}));
  EXPECT_TRUE(mt.has({Partition::TEnc, 1, SublayerKind::Ffn}));
  for (const auto& g : model.params().groups()) EXPECT_FALSE(group_touched(g)) << "gradients left behind";
}

TEST_F(AnalysisFixture, CapturesAreDeterministic) {
  std::mt19937_64 rng(1);
  ForwardOptions noisy;
  noisy.rng = &rng;
  const auto a = capture_gradients(model, batch, Task::MT, noisy);
  const auto b = capture_gradients(model, batch, Task::MT, {});
  ASSERT_EQ(a.groups.size(), b.groups.size());
  for (const auto& [key, g] : a.groups) EXPECT_EQ(g.values, b.groups.at(key).values);
}

TEST_F(AnalysisFixture, SelfAndNegatedConsistency) {
  const auto st = capture_gradients(model, batch, Task::ST, {});
  const GroupFilter all = [](const GroupKey&) { return true; };
  for (CosineMode mode : {CosineMode::Concatenate, CosineMode::PerMatrixMean}) {
    EXPECT_EQ(grad_consistency(st, st, all, mode), 1.0);
    EXPECT_EQ(grad_consistency(st, negated(st), all, mode), -1.0);
  }
  const auto asr = capture_gradients(model, batch, Task::ASR, {});
  const auto mt = capture_gradients(model, batch, Task::MT, {});
  EXPECT_THROW(grad_consistency(asr, mt, all), std::invalid_argument);
}

TEST(Cosine, HandCases) {
  const std::vector<double> a{3.0, 0.0}, b{0.0, 4.0}, c{1.0, 1.0}, z{0.0, 0.0};
  EXPECT_EQ(cosine(a, b), 0.0);
  EXPECT_NEAR(cosine(a, c), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(cosine(a, z), 0.0);
  EXPECT_THROW(cosine(a, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Cosine, PerMatrixModeAveragesTensors) {
  GradSnapshot a, b;
  const GroupKey key{Partition::TEnc, 0, SublayerKind::Atten};
  a.groups[key] = {{1.0, 0.0, 5.0}, {2, 1}};
  b.groups[key] = {{1.0, 0.0, -5.0}, {2, 1}};
  const GroupFilter all = [](const GroupKey&) { return true; };
  EXPECT_DOUBLE_EQ(grad_consistency(a, b, all, CosineMode::PerMatrixMean), 0.0);
  EXPECT_NEAR(grad_consistency(a, b, all, CosineMode::Concatenate), -24.0 / 26.0, 1e-15);
}

TEST_F(AnalysisFixture, PerLayerReturnsOneRowPerLayer) {
  const auto st = capture_gradients(model, batch, Task::ST, {});
  const auto mt = capture_gradients(model, batch, Task::MT, {});
  const auto rows = grad_consistency_per_layer(st, mt, Partition::TEnc, SublayerKind::Atten);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].layer, 0);
  EXPECT_EQ(rows[1].layer, 1);
  for (const auto& r : rows) {
    EXPECT_GE(r.value, -1.0);
    EXPECT_LE(r.value, 1.0);
  }
}

TEST_F(AnalysisFixture, ProtocolWithFullPoolHasZeroSpread) {
  const auto pool = probe_pool(5, 6);
  ProtocolOptions o;
  o.n = 6;
  o.repeats = 3;
  o.per_layer = true;
  const auto report = consistency_protocol(model, corpus, pool, Task::MT, Task::ST, o);
  ASSERT_FALSE(report.rows.empty());
  for (const auto& row : report.rows) {
    ASSERT_EQ(row.values.size(), 3u);
    EXPECT_EQ(row.std, 0.0);
    EXPECT_EQ(row.values[0], row.values[2]);
  }
  EXPECT_NE(report.find(Partition::TEnc, SublayerKind::Atten, 1), nullptr);
  EXPECT_EQ(report.find(Partition::AEnc, SublayerKind::Atten), nullptr);
  std::size_t tenc_layer_rows = 0;
  for (const auto& row : report.rows) {
    tenc_layer_rows += row.partition == Partition::TEnc && row.kind == SublayerKind::Atten && row.layer.has_value();
  }
  EXPECT_EQ(tenc_layer_rows, 2u);
  const auto csv = report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "partition,kind,layer,mean,std");
  EXPECT_EQ(csv, consistency_protocol(model, corpus, pool, Task::MT, Task::ST, o).to_csv());
}

TEST_F(AnalysisFixture, SingleRepeatMatchesOneDirectCall) {
  const auto pool = probe_pool(9, 4);
  ProtocolOptions o;
  o.n = 4;
  o.repeats = 1;
  const auto report = consistency_protocol(model, corpus, pool, Task::ASR, Task::ST, o);
  auto seeds = std::vector<std::uint64_t>(pool.begin(), pool.end());
  std::sort(seeds.begin(), seeds.end());
  const auto probe = corpus.batch(seeds);
  const auto a = capture_gradients(model, probe, Task::ASR, {});
  const auto b = capture_gradients(model, probe, Task::ST, {});
  const auto* row = report.find(Partition::AEnc, SublayerKind::Atten);
  ASSERT_NE(row, nullptr);
  const double direct = grad_consistency(a, b, [](const GroupKey& k) {
    return k.partition == Partition::AEnc && k.kind == SublayerKind::Atten;
  });
  EXPECT_EQ(row->mean, direct);
  EXPECT_THROW(consistency_protocol(model, corpus, std::span(pool).first(2), Task::ASR, Task::ST, o),
               std::invalid_argument);
}

TEST_F(AnalysisFixture, OverTrainingSkipsMissingCheckpoints) {
  const auto pool = probe_pool(3, 2);
  ProtocolOptions o;
  o.n = 2;
  o.repeats = 1;
  const std::vector<CheckpointRef> refs{{100, "a"}, {200, "missing"}, {300, "b"}};
  std::vector<std::string> warnings;
  const auto series = consistency_over_training(
      refs,
      [&](const std::string& path) -> std::optional<Model> {
        if (path == "missing") return std::nullopt;
        return Model(ModelConfig{});
      },
      corpus, pool, Task::MT, Task::ST, o, &warnings);
  ASSERT_FALSE(series.empty());
  EXPECT_EQ(warnings.size(), 1u);
  std::size_t last = 0;
  for (const auto& r : series) {
    EXPECT_NE(r.step, 200u);
    EXPECT_GE(r.step, last);
    last = r.step;
  }
}

TEST(Entropy, UniformAndOneHotRows) {
  for (std::size_t n : {1, 2, 3, 7, 64}) {
    const std::vector<double> row(n, 1.0 / static_cast<double>(n));
    EXPECT_NEAR(row_entropy_bits(row), std::log2(static_cast<double>(n)), 1e-9);
  }
  EXPECT_EQ(row_entropy_bits(std::vector<double>{0.0, 1.0, 0.0}), 0.0);
  EXPECT_THROW(row_entropy_bits(std::vector<double>{0.5, 0.4}), std::invalid_argument);
  EXPECT_THROW(row_entropy_bits(std::vector<double>{1.5, -0.5}), std::invalid_argument);
}

TEST(Entropy, BoundsOnRandomRows) {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> dist(1.0);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> row(n);
    double z = 0.0;
    for (auto& v : row) z += v = dist(rng);
    for (auto& v : row) v /= z;
    const double h = row_entropy_bits(row);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log2(static_cast<double>(n)) + 1e-12);
  }
}

TEST(Entropy, AttentionMapUsesValidRowsOnly) {
  AttentionMap map;
  map.batch = 2;
  map.heads = 1;
  map.queries = 2;
  map.keys = 4;
  map.query_lengths = {2, 1};
  map.key_lengths = {4, 2};
  // Example 0: uniform over 4 keys (2 bits). Example 1: uniform over its 2
  // valid keys (1 bit); its padded query row is garbage and must be ignored.
  map.weights = std::make_shared<const std::vector<double>>(std::vector<double>{
      0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25,  //
      0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0});
  EXPECT_NEAR(attention_entropy(map), (2.0 + 2.0 + 1.0) / 3.0, 1e-12);
}

TEST_F(AnalysisFixture, ImpactProbeStaysInRange) {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const std::vector<Task> tasks{Task::ASR, Task::MT};
  const auto d = measure_task_impact(model, corpus, seeds, tasks, {});
  ASSERT_TRUE(d.m.contains(Task::ASR));
  EXPECT_GT(d.m.at(Task::ASR), 0.0);
  EXPECT_EQ(d.m.at(Task::MT), std::max(d.m_tenc, d.m_dec));
}

}  // namespace
}  // namespace mtlab
