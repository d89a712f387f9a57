// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "mtlab/losses.hpp"
#include "mtlab/model.hpp"

namespace mtlab {
namespace {

using testing::random_tensor;
using testing::values;

const Tensor& param(const Model& m, const std::string& name) {
  for (const auto& g : m.params().groups()) {
    for (const auto& t : g.tensors) {
      if (t.name == name) return t.tensor;
    }
  }
  throw std::out_of_range(name);
}

struct ModelFixture : ::testing::Test {
  Corpus corpus{CorpusConfig{}};
  Model model{ModelConfig{}};
  SyntheticBatch batch = corpus.batch(std::vector<std::uint64_t>{11, 12, 13, 14});

  Tensor st_loss(const ForwardOptions& o = {}) const {
    const auto out = model.forward_task(batch, Task::ST, o);
    return ce_loss(out.logits, out.targets, model.symbols().pad());
  }
  Tensor mt_loss() const {
    ForwardOptions o;
    o.text_noise_prob = 0.0;
    const auto out = model.forward_task(batch, Task::MT, o);
    return ce_loss(out.logits, out.targets, model.symbols().pad());
  }
};

TEST_F(ModelFixture, OutputShapes) {
  const Tensor speech = Tensor::from({batch.batch_size, batch.max_frames, batch.frame_dim}, batch.speech);
  const auto a = model.a_enc_forward(speech, batch.speech_lens);
  EXPECT_EQ(a.shape(), (Shape{4, batch.max_frames, 32}));
  EXPECT_EQ(model.ctc_log_probs(a).shape(), (Shape{4, batch.max_frames, 21}));
  const auto st = model.forward_task(batch, Task::ST, {});
  EXPECT_EQ(st.logits.shape(), (Shape{4, batch.max_tgt, 24}));
  ASSERT_TRUE(st.shrink.has_value());
  for (std::size_t b = 0; b < 4; ++b) EXPECT_LE(st.shrink->sequences[b].size(), batch.speech_lens[b]);
}

TEST_F(ModelFixture, BatchPermutationPermutesOutputs) {
  const auto swapped = corpus.batch(std::vector<std::uint64_t>{13, 11, 14, 12});
  ASSERT_EQ(swapped.max_tgt, batch.max_tgt);
  const auto a = values(model.forward_task(batch, Task::ST, {}).logits);
  const auto b = values(model.forward_task(swapped, Task::ST, {}).logits);
  const std::size_t row = batch.max_tgt * 24;
  const std::vector<std::size_t> where{1, 3, 0, 2};  // position of seed 11, 12, 13, 14 in `swapped`
  for (std::size_t e = 0; e < 4; ++e) {
    for (std::size_t i = 0; i < batch.tgt_lens[e] * 24; ++i) {
      EXPECT_NEAR(a[e * row + i], b[where[e] * row + i], 1e-12);
    }
  }
}

TEST_F(ModelFixture, DeterministicWithoutDropout) {
  for (Task t : {Task::ST, Task::ASR, Task::MT}) {
    ForwardOptions o;
    o.text_noise_prob = 0.0;
    const auto x = model.forward_task(batch, t, o);
    const auto y = model.forward_task(batch, t, o);
    const auto& tx = t == Task::ASR ? x.ctc_log_probs : x.logits;
    const auto& ty = t == Task::ASR ? y.ctc_log_probs : y.logits;
    EXPECT_EQ(values(tx), values(ty));
  }
  EXPECT_EQ(values(Model(ModelConfig{}).forward_task(batch, Task::ST, {}).logits),
            values(model.forward_task(batch, Task::ST, {}).logits));
}

TEST_F(ModelFixture, ZeroConvolutionIsIdentity) {
  for (const char* name : {"t_enc.0.l2g.depthwise", "t_enc.0.l2g.depthwise_bias", "t_enc.0.l2g.pointwise.bias"}) {
    Tensor t = param(model, name);
    auto data = t.mutable_data();
    std::fill(data.begin(), data.end(), 0.0);
  }
  auto x = random_tensor({2, 6, 32}, 3, false);
  const std::vector<std::size_t> lens{6, 4};
  EXPECT_EQ(values(model.l2g_extractor(x, 0, lens)), values(x));
}

TEST(ModelConfigTest, KernelsGrowByTheStride) {
  ModelConfig c;
  c.t_enc_layers = 4;
  const Model m(c);
  const std::vector<std::size_t> expected{5, 8, 11, 14};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.kernel_size(i), expected[i]);
    EXPECT_EQ(param(m, "t_enc." + std::to_string(i) + ".l2g.depthwise").shape(), (Shape{expected[i], 32}));
  }
}

TEST(ModelConfigTest, ReceptiveFieldMatchesTheKernel) {
  ModelConfig c;
  c.t_enc_layers = 4;
  const Model m(c);
  const std::size_t L = 30, j = 15, d = 32;
  const std::vector<std::size_t> lens{L};
  auto x = random_tensor({1, L, d}, 4, false);
  auto xv = values(x);
  xv[j * d + 5] += 1.0;
  const auto y = Tensor::from({1, L, d}, xv);
  std::size_t previous = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = values(m.l2g_branch(x, i, lens));
    const auto b = values(m.l2g_branch(y, i, lens));
    const std::size_t k = c.kernel_size(i), left = conv_left_pad(k), right = k - 1 - left;
    std::size_t reach = 0;
    for (std::size_t t = 0; t < L; ++t) {
      bool changed = false;
      for (std::size_t ch = 0; ch < d; ++ch) changed |= a[t * d + ch] != b[t * d + ch];
      const bool inside = t + right >= j && t <= j + left;
      EXPECT_EQ(changed, inside) << "layer " << i << " position " << t;
      if (changed) reach = std::max(reach, t > j ? t - j : j - t);
    }
    EXPECT_LE(reach, k / 2 + 1);
    EXPECT_GT(reach, previous);
    previous = reach;
  }
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.l2g_base_kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.t_enc_layers = 4;
  EXPECT_THROW(c.validate(10), std::invalid_argument);
  EXPECT_NO_THROW(c.validate(15));
}

TEST_F(ModelFixture, SpeechAndTextStreamsShareWeights) {
  auto x = random_tensor({2, 5, 32}, 8, false);
  const std::vector<std::size_t> lens{5, 3};
  const auto s = model.t_enc_forward(x, lens, Model::Stream::Speech, true, true);
  const auto t = model.t_enc_forward(x, lens, Model::Stream::Text, true, true);
  EXPECT_EQ(values(s.output), values(t.output));
  EXPECT_EQ(s.extractor_outs.size(), 2u);
  EXPECT_EQ(s.attention_outs.size(), 2u);
  ASSERT_EQ(s.attention.size(), 2u);
  for (const auto& map : s.attention) {
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t h = 0; h < map.heads; ++h) {
        for (std::size_t i = 0; i < lens[b]; ++i) {
          double total = 0.0;
          for (std::size_t k = 0; k < map.keys; ++k) {
            if (k >= lens[b]) EXPECT_LE(map.at(b, h, i, k), 1e-12);
            total += map.at(b, h, i, k);
          }
          EXPECT_NEAR(total, 1.0, 1e-12);
        }
      }
    }
  }
  const auto plain = model.t_enc_forward(x, lens, Model::Stream::Text, false);
  EXPECT_TRUE(plain.extractor_outs.empty());
}

TEST_F(ModelFixture, DecoderIsCausal) {
  auto memory = random_tensor({1, 6, 32}, 9, false);
  const std::vector<std::size_t> mlen{6}, plen{5};
  std::vector<int> prefix{22, 3, 7, 1, 9};
  const auto base = values(model.decoder_forward(prefix, 1, plen, memory, mlen));
  for (std::size_t j = 1; j < prefix.size(); ++j) {
    auto changed = prefix;
    changed[j] = changed[j] == 4 ? 5 : 4;
    const auto other = values(model.decoder_forward(changed, 1, plen, memory, mlen));
    for (std::size_t i = 0; i < j * 24; ++i) EXPECT_EQ(base[i], other[i]) << "position " << i / 24 << " vs " << j;
    bool differs = false;
    for (std::size_t i = j * 24; i < (j + 1) * 24; ++i) differs |= base[i] != other[i];
    EXPECT_TRUE(differs);
  }
  EXPECT_THROW(model.decoder_forward(std::vector<int>{}, 1, std::vector<std::size_t>{0}, memory, mlen), ShapeError);
}

TEST_F(ModelFixture, ZeroMemoryContributesAConstant) {
  const std::vector<int> prefix{22, 3, 7};
  const std::vector<std::size_t> plen{3};
  const auto a = values(model.decoder_forward(prefix, 1, plen, Tensor::zeros({1, 2, 32}), std::vector<std::size_t>{2}));
  const auto b = values(model.decoder_forward(prefix, 1, plen, Tensor::zeros({1, 9, 32}), std::vector<std::size_t>{7}));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST_F(ModelFixture, AsrTouchesOnlyTheAcousticEncoder) {
  const auto out = model.forward_task(batch, Task::ASR, {});
  ctc_loss(out.ctc_log_probs, out.ctc_lengths, out.ctc_targets).backward();
  for (const auto& g : model.params().groups()) {
    const bool lookback = g.key.partition == Partition::AEnc && g.key.layer == 4;
    EXPECT_EQ(group_touched(g), g.key.partition == Partition::AEnc && !lookback) << to_string(g.key);
  }
}

TEST_F(ModelFixture, StAndMtBothReachTheTextualEncoder) {
  for (int which = 0; which < 2; ++which) {
    model.params().clear_grads();
    (which == 0 ? st_loss() : mt_loss()).backward();
    for (const auto& g : model.params().groups()) {
      if (g.key.partition == Partition::TEnc || g.key.partition == Partition::Decoder) {
        const bool embedding_only_used_by_mt = g.key.partition == Partition::TEnc && g.key.layer == -1;
        if (which == 0 && embedding_only_used_by_mt) continue;
        EXPECT_TRUE(group_touched(g)) << to_string(g.key);
      } else {
        // The CTC head only steers the shrink path on ST, which carries no gradient.
        const bool ctc_head = g.key.layer == 3;
        EXPECT_EQ(group_touched(g), which == 0 && !ctc_head) << to_string(g.key);
      }
    }
  }
}

TEST_F(ModelFixture, MutatingASharedParameterMovesBothLosses) {
  const double st0 = st_loss().item(), mt0 = mt_loss().item();
  Tensor q = param(model, "t_enc.1.attn.q.weight");
  auto w = q.mutable_data();
  for (auto& v : w) v *= 1.5;
  EXPECT_NE(st_loss().item(), st0);
  EXPECT_NE(mt_loss().item(), mt0);
}

TEST_F(ModelFixture, OneForwardServesAllTasks) {
  const std::vector<Task> all{Task::ST, Task::ASR, Task::MT};
  const auto before = model.forward_calls();
  const auto r = model.forward(batch, all, {});
  EXPECT_EQ(r.tasks.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(model.forward_calls()[t], before[t] + 1);
  EXPECT_THROW(r.at(Task::ASR).logits.shape(), std::exception);
}

TEST_F(ModelFixture, RejectsEmptySpeech) {
  EXPECT_THROW(model.a_enc_forward(Tensor::zeros({1, 0, 16}), std::vector<std::size_t>{0}), ShapeError);
}

TEST_F(ModelFixture, GreedyDecodingEmitsRealTokens) {
  const auto hyp = model.greedy_translate(batch, {});
  ASSERT_EQ(hyp.size(), 4u);
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_GE(hyp[b].size(), batch.tgt_lens[b]);
    for (int id : hyp[b]) {
      EXPECT_GE(id, 1);
      EXPECT_LE(id, 20);
    }
  }
}

TEST(TaskNames, RoundTrip) {
  for (Task t : {Task::ST, Task::ASR, Task::MT}) EXPECT_EQ(parse_task(to_string(t)), t);
  for (AsrVariant v : {AsrVariant::Ctc, AsrVariant::Ce, AsrVariant::CtcCe}) EXPECT_EQ(parse_asr_variant(to_string(v)), v);
  EXPECT_THROW(parse_task("tts"), std::invalid_argument);
}

TEST(Registry, GroupsMustArriveInOrder) {
  ParamRegistry r;
  r.add_group({{Partition::TEnc, 0, SublayerKind::Atten}, {{"a", Tensor::zeros({1}, true)}}});
  EXPECT_THROW(r.add_group({{Partition::AEnc, 0, SublayerKind::Atten}, {{"b", Tensor::zeros({1}, true)}}}),
               std::logic_error);
  EXPECT_THROW(r.add_group({{Partition::TEnc, 1, SublayerKind::Ffn}, {}}), std::logic_error);
}

TEST(Registry, FlattenConcatenatesInOrder) {
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto b = Tensor::from({1}, {7}, true);
  ParamGroup g{{Partition::Decoder, 0, SublayerKind::Ffn}, {{"a", a}, {"b", b}}};
  EXPECT_THROW(flatten_group(g), GraphError);
  sum(mul(a, a)).backward();
  EXPECT_THROW(flatten_group(g), GraphError);
  sum(b).backward();
  const auto flat = flatten_group(g);
  ASSERT_EQ(flat.size(), 7u);
  EXPECT_EQ(flat, (std::vector<double>{2, 4, 6, 8, 10, 12, 1}));
}

TEST(Registry, EveryModelParameterBelongsToOneGroup) {
  const Model m(ModelConfig{});
  std::set<const void*> seen;
  std::size_t count = 0;
  for (const auto& g : m.params().groups()) {
    for (const auto& t : g.tensors) {
      EXPECT_TRUE(seen.insert(t.tensor.data().data()).second) << t.name;
      count += t.tensor.numel();
    }
  }
  EXPECT_EQ(count, m.params().parameter_count());
}

}  // namespace
}  // namespace mtlab
