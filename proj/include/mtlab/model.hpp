// SPDX-License-Identifier: Apache-2.0
//
// Three-partition speech translation network: acoustic encoder (A-Enc),
// textual encoder with local-to-global extractors (T-Enc) and decoder.
// ST and MT share T-Enc and the decoder; ASR trains A-Enc through a CTC
// head, or optionally the whole stack through the decoder.

#pragma once

#include <array>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mtlab/data.hpp"
#include "mtlab/layers.hpp"
#include "mtlab/shrink.hpp"

namespace mtlab {

enum class Task { ST, ASR, MT };
enum class AsrVariant { Ctc, Ce, CtcCe };

std::string to_string(Task t);
Task parse_task(const std::string& s);
std::string to_string(AsrVariant v);
AsrVariant parse_asr_variant(const std::string& s);

struct ModelConfig {
  int d_model = 32;
  int n_heads = 2;
  int ffn_dim = 64;
  int a_enc_layers = 2;
  int t_enc_layers = 2;
  int dec_layers = 2;
  int l2g_base_kernel = 5;
  int l2g_stride = 3;
  double dropout = 0.0;
  int vocab_size_src = 20;
  int vocab_size_tgt = 20;
  int frame_dim = 16;
  std::uint64_t seed = 7;

  /// `max_seq_len` bounds the widest L2G kernel.
  void validate(std::size_t max_seq_len = 4096) const;
  std::size_t kernel_size(std::size_t layer) const {
    return static_cast<std::size_t>(l2g_base_kernel + l2g_stride * static_cast<int>(layer));
  }
};

struct ForwardOptions {
  bool use_shrink = true;
  bool use_lbm = true;
  bool use_l2g = true;
  /// Off during the shrink warm-up: T-Enc then reads every acoustic frame.
  bool shrink_active = true;
  AsrVariant asr_variant = AsrVariant::Ctc;
  /// Text noise probability for the MT input; applied only with use_l2g.
  double text_noise_prob = 0.2;
  /// Also embed the clean transcription for the contrastive loss.
  bool want_clean_text = false;
  bool record_attention = false;
  /// Drives text noise and dropout; null disables both.
  std::mt19937_64* rng = nullptr;
};

struct TextEncoding {
  Tensor output;  // [B, L, d]
  std::vector<std::size_t> lengths;
  /// Per layer L2G branch output Conv(Norm(x)); empty without L2G.
  std::vector<Tensor> extractor_outs;
  /// Per layer self-attention sublayer output.
  std::vector<Tensor> attention_outs;
  std::vector<AttentionMap> attention;
  /// T-Enc input before positions are added.
  Tensor input;
};

struct ShrinkStats {
  std::size_t frames_total = 0;
  std::size_t positions_total = 0;
  std::vector<ShrunkSequence> sequences;

  double length_ratio() const {
    return frames_total ? static_cast<double>(positions_total) / static_cast<double>(frames_total) : 0.0;
  }
};

struct TaskOutputs {
  Task task = Task::ST;
  /// Decoder logits [B, L, V] (ST, MT, CE-based ASR).
  Tensor logits;
  /// Decoder targets [B * L], pad filled.
  std::vector<int> targets;
  /// CTC log-probabilities [B, T, C] (CTC-based ASR).
  Tensor ctc_log_probs;
  std::vector<std::size_t> ctc_lengths;
  std::vector<std::vector<int>> ctc_targets;
  std::optional<TextEncoding> encoding;
  std::optional<ShrinkStats> shrink;
};

struct ForwardResult {
  std::map<Task, TaskOutputs> tasks;
  /// Clean transcription embeddings [B, Lx, d] (want_clean_text only).
  Tensor clean_text;
  std::vector<std::size_t> clean_text_lengths;

  const TaskOutputs& at(Task t) const;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ParamRegistry& params() const { return registry_; }
  const Symbols& symbols() const { return symbols_; }

  /// [B, T, frame_dim] frames -> [B, T, d] features.
  Tensor a_enc_forward(const Tensor& speech, std::span<const std::size_t> lengths,
                       std::mt19937_64* rng = nullptr) const;
  /// [B, T, d] -> CTC log-probabilities [B, T, C].
  Tensor ctc_log_probs(const Tensor& acoustic) const;

  /// Conv(Norm(x)) of layer `layer`, the extractor's residual branch.
  Tensor l2g_branch(const Tensor& x, std::size_t layer, std::span<const std::size_t> lengths) const;
  /// x + Conv(Norm(x)).
  Tensor l2g_extractor(const Tensor& x, std::size_t layer, std::span<const std::size_t> lengths) const;

  enum class Stream { Speech, Text };
  TextEncoding t_enc_forward(const Tensor& features, std::span<const std::size_t> lengths, Stream stream,
                             bool use_l2g, bool record_attention = false, std::mt19937_64* rng = nullptr) const;

  /// Teacher-forced logits for `prefix` [B, L] over `memory` [B, S, d].
  Tensor decoder_forward(std::span<const int> prefix, std::size_t batch, std::span<const std::size_t> prefix_lengths,
                         const Tensor& memory, std::span<const std::size_t> memory_lengths,
                         std::mt19937_64* rng = nullptr) const;

  /// Runs the requested tasks on one batch, sharing the acoustic encoder
  /// and T-Enc passes between tasks that consume them.
  ForwardResult forward(const SyntheticBatch& batch, std::span<const Task> tasks, const ForwardOptions& options) const;
  TaskOutputs forward_task(const SyntheticBatch& batch, Task task, const ForwardOptions& options) const;

  /// Greedy ST decoding of tgt_lens[b] tokens per example.
  std::vector<std::vector<int>> greedy_translate(const SyntheticBatch& batch, const ForwardOptions& options) const;

  /// Task forwards executed so far, indexed by Task.
  const std::array<std::size_t, 3>& forward_calls() const { return forward_calls_; }

  const LookBack& lookback() const { return lookback_; }

 private:
  struct EncoderLayer {
    AttentionBlock attn;
    FeedForwardBlock ffn;
  };
  struct Extractor {
    Norm norm;
    Tensor depthwise;       // [k, d]
    Tensor depthwise_bias;  // [d]
    Linear pointwise;
  };
  struct TextLayer {
    EncoderLayer block;
    Extractor extractor;
  };
  struct DecoderLayer {
    AttentionBlock self_attn;
    FeedForwardBlock ffn;
    AttentionBlock cross_attn;
  };

  Tensor encode_layer(const EncoderLayer& layer, const Tensor& x, std::span<const std::size_t> lengths,
                      std::mt19937_64* rng, Tensor* attention_out, AttentionMap* record) const;
  Tensor maybe_dropout(const Tensor& x, std::mt19937_64* rng) const;
  /// Acoustic features -> (optionally shrunk) T-Enc speech encoding.
  TextEncoding encode_speech(const SyntheticBatch& batch, const Tensor& acoustic, std::span<const double> ctc_values,
                             const ForwardOptions& options, std::optional<ShrinkStats>& stats) const;
  Tensor embed_tokens(const Tensor& table, std::span<const int> ids, std::size_t batch, std::size_t length) const;

  ModelConfig config_;
  Symbols symbols_;
  ParamRegistry registry_;

  Linear a_in_;
  std::vector<EncoderLayer> a_layers_;
  Norm a_norm_;
  Linear ctc_head_;
  LookBack lookback_;

  Tensor text_embedding_;
  std::vector<TextLayer> t_layers_;
  Norm t_norm_;

  Tensor dec_embedding_;
  std::vector<DecoderLayer> d_layers_;
  Norm d_norm_;
  Linear out_proj_;

  mutable std::array<std::size_t, 3> forward_calls_{};
};

}  // namespace mtlab
