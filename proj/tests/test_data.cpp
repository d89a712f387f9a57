// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mtlab/data.hpp"

namespace mtlab {
namespace {

CorpusConfig exact_config() {
  CorpusConfig c;
  c.frame_noise_std = 0.0;
  c.expansion_min = c.expansion_max = 2;
  c.blank_insert_prob = 0.0;
  return c;
}

TEST(Data, ConfigValidation) {
  CorpusConfig c;
  EXPECT_NO_THROW(c.validate());
  c.expansion_min = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.expansion_min = 5;
  c.expansion_max = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.blank_insert_prob = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Data, ExpansionWithoutNoiseRepeatsPrototypes) {
  const auto cfg = exact_config();
  const auto protos = token_prototypes(cfg);
  const std::vector<int> src{3, 7};
  const auto s = expand_to_speech(src, cfg, 99);
  ASSERT_EQ(s.length, 4u);
  const auto d = static_cast<std::size_t>(cfg.frame_dim);
  const std::vector<int> rows{3, 3, 7, 7};
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_EQ(s.frames[t * d + c], protos[static_cast<std::size_t>(rows[t]) * d + c]);
    }
  }
  EXPECT_EQ(s.alignment, (std::vector<int>{0, 0, 1, 1}));
}

TEST(Data, EmptySourceIsAnError) {
  EXPECT_THROW(expand_to_speech(std::vector<int>{}, CorpusConfig{}, 1), std::invalid_argument);
}

TEST(Data, ExpansionIsAPureFunctionOfTheSeed) {
  CorpusConfig cfg;
  const std::vector<int> src{1, 2, 3, 4};
  const auto a = expand_to_speech(src, cfg, 42);
  const auto b = expand_to_speech(src, cfg, 42);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.alignment, b.alignment);
  const auto c = expand_to_speech(src, cfg, 43);
  EXPECT_NE(a.frames, c.frames);
}

TEST(Data, MeanLengthMatchesClosedForm) {
  CorpusConfig cfg;
  const std::vector<int> src{1, 2, 3, 4, 5, 6};
  const auto protos = token_prototypes(cfg);
  double total = 0.0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) total += static_cast<double>(expand_to_speech(src, cfg, static_cast<std::uint64_t>(s), protos).length);
  const double expected = expected_frames(cfg, src.size());
  // E[r] = 3, L = 6: 18 token frames plus 0.2 * 5 gaps of 3 blank frames.
  EXPECT_NEAR(expected, 21.0, 1e-12);
  EXPECT_NEAR(total / n, expected, 0.02 * expected);
}

TEST(Data, AlignmentRunsReproduceTheSource) {
  Corpus corpus{CorpusConfig{}};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto sample = corpus.sample(seed);
    std::vector<int> runs;
    for (std::size_t t = 0; t < sample.speech.alignment.size(); ++t) {
      if (t == 0 || sample.speech.alignment[t] != sample.speech.alignment[t - 1]) runs.push_back(sample.speech.alignment[t]);
    }
    std::vector<int> tokens;
    for (int a : runs) {
      if (a != kBlankFrame) tokens.push_back(sample.src[static_cast<std::size_t>(a)]);
    }
    EXPECT_EQ(tokens, sample.src);
    EXPECT_NE(runs.front(), kBlankFrame);
    EXPECT_NE(runs.back(), kBlankFrame);
    EXPECT_GE(sample.speech.length, sample.src.size());
  }
}

TEST(Data, TranslateIdentityIsANoOp) {
  const std::vector<int> identity{0, 1, 2, 3, 4};
  const std::vector<int> src{1, 4, 2};
  EXPECT_EQ(translate(src, TranslationRule::FixedPermutation, identity), src);
}

TEST(Data, ReverseAndPermuteInvertsWithInverseTable) {
  Corpus corpus{CorpusConfig{}};
  const auto perm = corpus.permutation();
  std::vector<int> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  const std::vector<int> src{5, 1, 9, 20, 3};
  const auto once = translate(src, TranslationRule::ReverseAndPermute, perm);
  EXPECT_EQ(translate(once, TranslationRule::ReverseAndPermute, inverse), src);
}

TEST(Data, ReverseAndPermuteHandExample) {
  // Table 0->3, 1->0, 2->1, 3->2 applied to [1, 2]: reversal gives [2, 1],
  // which maps to [1, 0].
  const std::vector<int> table{3, 0, 1, 2};
  EXPECT_EQ(translate(std::vector<int>{1, 2}, TranslationRule::ReverseAndPermute, table), (std::vector<int>{1, 0}));
  EXPECT_EQ(translate(std::vector<int>{1, 2}, TranslationRule::FixedPermutation, table), (std::vector<int>{0, 1}));
}

TEST(Data, PermutationFixesBlankAndIsABijection) {
  Corpus corpus{CorpusConfig{}};
  const auto perm = corpus.permutation();
  EXPECT_EQ(perm[0], kBlankId);
  std::set<int> image(perm.begin(), perm.end());
  EXPECT_EQ(image.size(), perm.size());
}

TEST(Data, NoiseWithZeroProbabilityIsIdentity) {
  std::mt19937_64 rng(3);
  const std::vector<int> src{4, 4, 2, 9};
  EXPECT_EQ(noise_inject(src, 0.0, rng), src);
  EXPECT_THROW(noise_inject(src, 1.0, rng), std::invalid_argument);
}

TEST(Data, NoiseLengthFollowsTheBinomial) {
  const std::vector<int> src(1000, 7);
  const double p = 0.2;
  double total = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    std::mt19937_64 rng(s);
    total += static_cast<double>(noise_inject(src, p, rng).size());
  }
  // Each mean is over 1000 draws of 1000 + Binomial(1000, p).
  const double sigma_of_mean = std::sqrt(1000 * p * (1 - p)) / std::sqrt(1000.0);
  EXPECT_NEAR(total / 1000.0, 1200.0, 3.0 * sigma_of_mean);
}

TEST(Data, NoiseAddsNoNewSymbols) {
  std::mt19937_64 rng(5);
  const std::vector<int> src{3, 1, 4, 1, 5, 9, 2, 6};
  for (int r = 0; r < 100; ++r) {
    const auto out = noise_inject(src, 0.5, rng);
    for (int t : out) {
      if (t != kBlankId) EXPECT_NE(std::find(src.begin(), src.end(), t), src.end());
    }
  }
}

TEST(Data, BatchPaddingAndInvariants) {
  Corpus corpus{CorpusConfig{}};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto batch = corpus.batch(seeds);
  const int pad = corpus.symbols().pad();
  ASSERT_EQ(batch.batch_size, 5u);
  for (std::size_t b = 0; b < 5; ++b) {
    EXPECT_GE(batch.speech_lens[b], batch.src_lens[b]);
    const auto tgt = translate(batch.src(b), corpus.config().translation_rule, corpus.permutation());
    EXPECT_EQ(std::vector<int>(batch.tgt(b).begin(), batch.tgt(b).end()), tgt);
    for (std::size_t i = batch.src_lens[b]; i < batch.max_src; ++i) EXPECT_EQ(batch.src_tokens[b * batch.max_src + i], pad);
    for (std::size_t t = batch.speech_lens[b]; t < batch.max_frames; ++t) {
      for (std::size_t c = 0; c < batch.frame_dim; ++c) {
        EXPECT_EQ(batch.speech[(b * batch.max_frames + t) * batch.frame_dim + c], 0.0);
      }
    }
  }
  const auto again = corpus.batch(seeds);
  EXPECT_EQ(batch.speech, again.speech);
}

TEST(Data, ExportJsonLines) {
  Corpus corpus{CorpusConfig{}};
  const std::vector<std::uint64_t> seeds{10, 11};
  std::ostringstream os;
  corpus.export_jsonl(seeds, os);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_NE(text.find("\"sample_seed\":10"), std::string::npos);
}

TEST(Data, OracleRatioCountsAlignmentRuns) {
  Corpus corpus{exact_config()};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto batch = corpus.batch(seeds);
  // Without blanks each token is one run of exactly two frames.
  EXPECT_DOUBLE_EQ(oracle_length_ratio(batch), 0.5);
}

TEST(Data, SymbolLayout) {
  Symbols s{20};
  EXPECT_EQ(s.blank(), 0);
  EXPECT_EQ(s.pad(), 21);
  EXPECT_EQ(s.bos(), 22);
  EXPECT_EQ(s.bos_src(), 23);
  EXPECT_EQ(s.size(), 24);
  EXPECT_EQ(s.ctc_classes(), 21);
}

}  // namespace
}  // namespace mtlab
