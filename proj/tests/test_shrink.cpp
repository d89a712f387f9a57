// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mtlab/shrink.hpp"

namespace mtlab {
namespace {

using testing::random_tensor;

CtcPath path_of(std::vector<int> tokens, std::vector<double> conf = {}) {
  if (conf.empty()) conf.assign(tokens.size(), 1.0);
  return {std::move(tokens), std::move(conf)};
}

std::vector<double> random_log_probs(std::size_t n, std::size_t classes, std::mt19937_64& rng, double spread = 2.0) {
  std::normal_distribution<double> dist(0.0, spread);
  std::vector<double> lp(n * classes);
  for (std::size_t t = 0; t < n; ++t) {
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(lp[t * classes + c] = dist(rng));
    for (std::size_t c = 0; c < classes; ++c) lp[t * classes + c] -= std::log(z);
  }
  return lp;
}

TEST(GreedyPath, OneHotRows) {
  std::vector<double> lp(3 * 3, -1e9);
  lp[0 * 3 + 2] = lp[1 * 3 + 0] = lp[2 * 3 + 1] = 0.0;
  const auto p = ctc_greedy_path(lp, 3);
  EXPECT_EQ(p.tokens, (std::vector<int>{2, 0, 1}));
  for (double c : p.confidences) EXPECT_EQ(c, 1.0);
}

TEST(GreedyPath, UniformRowsDecodeAsBlank) {
  const std::vector<double> lp(4 * 5, std::log(0.2));
  EXPECT_EQ(ctc_greedy_path(lp, 5).tokens, std::vector<int>(4, 0));
}

TEST(GreedyPath, MatchesRowScan) {
  std::mt19937_64 rng(3);
  const auto lp = random_log_probs(50, 6, rng);
  const auto p = ctc_greedy_path(lp, 6);
  for (std::size_t t = 0; t < 50; ++t) {
    const auto row = std::span(lp).subspan(t * 6, 6);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    EXPECT_EQ(p.tokens[t], best);
    EXPECT_GT(p.confidences[t], 0.0);
    EXPECT_LE(p.confidences[t], 1.0);
  }
  EXPECT_THROW(ctc_greedy_path(std::vector<double>(7), 3), std::invalid_argument);
}

TEST(MergeRepeats, RunLengthExamples) {
  const auto s = merge_repeats(path_of({1, 1, 0, 0, 2}));
  EXPECT_EQ(s.unique_tokens, (std::vector<int>{1, 0, 2}));
  EXPECT_EQ(s.seg_start, (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_EQ(s.seg_end, (std::vector<std::size_t>{1, 3, 4}));
  EXPECT_EQ(merge_repeats(path_of({1, 2, 1, 2})).size(), 4u);
  EXPECT_THROW(merge_repeats(path_of({})), std::invalid_argument);
}

TEST(MergeRepeats, MostConfidentFrameRepresentsTheRun) {
  const auto s = merge_repeats(path_of({3, 3, 3}, {0.2, 0.9, 0.5}));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.origin_index[0], 1u);
  EXPECT_EQ(s.boundary[0], 1u);
  const auto tie = merge_repeats(path_of({3, 3}, {0.5, 0.5}));
  EXPECT_EQ(tie.origin_index[0], 0u);
}

TEST(MergeRepeats, WindowCoversTheRun) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto lp = random_log_probs(1 + rng() % 30, 3, rng, 0.7);
    const auto path = ctc_greedy_path(lp, 3);
    const auto s = merge_repeats(path);
    EXPECT_EQ(expand_runs(s), path.tokens);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t j = s.origin_index[i], b = s.boundary[i];
      EXPECT_LE(s.seg_start[i], j);
      EXPECT_LE(j, s.seg_end[i]);
      EXPECT_LE(j - std::min(j, b), s.seg_start[i]);
      EXPECT_GE(j + b, s.seg_end[i]);
      if (i > 0) EXPECT_NE(s.unique_tokens[i], s.unique_tokens[i - 1]);
    }
  }
}

TEST(LookbackWindow, ExcludesTheRepresentativeAndClips) {
  const auto s = merge_repeats(path_of({1, 1, 1, 1, 2}, {0.1, 0.2, 0.3, 0.9, 1.0}));
  // j = 3, b = 3: frames 0..5 clipped to 0..4, minus 3.
  EXPECT_EQ(lookback_window(s, 0), (std::vector<std::size_t>{0, 1, 2, 4}));
  EXPECT_TRUE(lookback_window(s, 1).empty());
}

struct LookBackFixture : ::testing::Test {
  Initializer init{5};
  LookBack lb = LookBack::create(init, 4, 8);
};

TEST_F(LookBackFixture, SingleFrameWindowReturnsThatFrame) {
  auto frames = random_tensor({3, 4}, 1, false);
  auto q = random_tensor({1, 4}, 2, false);
  const auto out = lbm_lookback(q, frames, {{2}}, lb.transfer);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.data()[c], frames.data()[8 + c], 1e-14);
}

TEST_F(LookBackFixture, EmptyWindowYieldsZero) {
  auto frames = random_tensor({3, 4}, 1, false);
  auto q = random_tensor({2, 4}, 2, false);
  const auto out = lbm_lookback(q, frames, {{}, {0, 1}}, lb.transfer);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.data()[c], 0.0);
}

TEST_F(LookBackFixture, ConcentratesOnTheAlignedFrame) {
  Linear identity{Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor::zeros({2})};
  auto frames = Tensor::from({3, 2}, {0.0, 1.0, 10.0, 0.0, 0.0, -1.0});
  auto q = Tensor::from({1, 2}, {1.0, 0.0});
  AttentionMap map;
  lbm_lookback(q, frames, {{0, 1, 2}}, identity, &map);
  // Scores (0, 10, 0): weight e^10 / (e^10 + 2).
  const double expected = std::exp(10.0) / (std::exp(10.0) + 2.0);
  EXPECT_GT(map.at(0, 0, 0, 1), 0.99);
  EXPECT_NEAR(map.at(0, 0, 0, 1), expected, 1e-12);
}

TEST_F(LookBackFixture, WeightsSumToOne) {
  auto frames = random_tensor({10, 4}, 3, false);
  auto q = random_tensor({3, 4}, 4, false);
  AttentionMap map;
  lbm_lookback(q, frames, {{0, 1, 2}, {5}, {3, 4, 6, 7, 9}}, lb.transfer, &map);
  const std::vector<std::size_t> sizes{3, 1, 5};
  for (std::size_t p = 0; p < 3; ++p) {
    double s = 0.0;
    for (std::size_t j = 0; j < sizes[p]; ++j) s += map.at(p, 0, 0, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST_F(LookBackFixture, FuseWithZeroLookbackIsFfnOfNorm) {
  auto reps = random_tensor({2, 4}, 6, false);
  const auto fused = lbm_fuse(reps, Tensor::zeros({2, 4}), lb);
  const auto direct = lb.ffn(lb.norm(reps));
  EXPECT_EQ(testing::values(fused), testing::values(direct));
  EXPECT_EQ(fused.shape(), (Shape{2, 4}));
}

TEST_F(LookBackFixture, EveryFrameOfEveryMultiFrameRunReceivesGradient) {
  std::mt19937_64 rng(77);
  const std::size_t classes = 3;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 2, T = 4 + rng() % 10;
    const std::vector<std::size_t> lengths{T, 2 + rng() % (T - 1)};
    auto features = random_tensor({B, T, 4}, 1000 + trial);
    const auto lp = random_log_probs(B * T, classes, rng, 0.8);
    auto r = shrink_sequence(features, lengths, lp, classes, &lb);
    sum(r.features).backward();
    ASSERT_TRUE(features.has_grad());
    const auto g = features.grad();
    for (std::size_t b = 0; b < B; ++b) {
      const auto& s = r.sequences[b];
      EXPECT_EQ(expand_runs(s), ctc_greedy_path(std::span(lp).subspan(b * T * classes, lengths[b] * classes), classes).tokens);
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.seg_end[i] == s.seg_start[i]) continue;
        for (std::size_t f = s.seg_start[i]; f <= s.seg_end[i]; ++f) {
          double norm = 0.0;
          for (std::size_t c = 0; c < 4; ++c) norm += std::abs(g[(b * T + f) * 4 + c]);
          EXPECT_GT(norm, 0.0) << "trial " << trial << " frame " << f;
        }
      }
    }
  }
}

TEST_F(LookBackFixture, PlainShrinkPassesRepresentativesThrough) {
  auto features = random_tensor({1, 5, 4}, 9, false);
  const std::vector<std::size_t> lengths{5};
  std::vector<double> lp(5 * 3, -1e9);
  for (std::size_t t : {0, 1}) lp[t * 3 + 1] = 0.0;
  for (std::size_t t : {2, 3, 4}) lp[t * 3 + 2] = 0.0;
  const auto r = shrink_sequence(features, lengths, lp, 3, nullptr);
  EXPECT_EQ(r.lengths, (std::vector<std::size_t>{2}));
  EXPECT_DOUBLE_EQ(r.length_ratio(), 0.4);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(r.features.data()[c], features.data()[c]);
    EXPECT_EQ(r.features.data()[4 + c], features.data()[8 + c]);
  }
}

TEST_F(LookBackFixture, RandomModelNeverGrows) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 1 + rng() % 12;
    auto features = random_tensor({1, T, 4}, trial, false);
    const std::vector<std::size_t> lengths{T};
    const auto lp = random_log_probs(T, 5, rng);
    const auto r = shrink_sequence(features, lengths, lp, 5, &lb);
    EXPECT_LE(r.lengths[0], T);
    const auto again = shrink_sequence(features, lengths, lp, 5, &lb);
    EXPECT_EQ(again.sequences[0].origin_index, r.sequences[0].origin_index);
    EXPECT_EQ(testing::values(again.features), testing::values(r.features));
  }
}

TEST(ShrinkSequence, RejectsBadInputs) {
  auto features = random_tensor({1, 3, 2}, 1, false);
  const std::vector<std::size_t> zero{0}, ok{3};
  EXPECT_THROW(shrink_sequence(features, zero, std::vector<double>(9), 3, nullptr), ShapeError);
  EXPECT_THROW(shrink_sequence(features, ok, std::vector<double>(8), 3, nullptr), ShapeError);
}

}  // namespace
}  // namespace mtlab
