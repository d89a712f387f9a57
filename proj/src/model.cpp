// SPDX-License-Identifier: Apache-2.0

#include "mtlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace mtlab {

std::string to_string(Task t) {
  switch (t) {
    case Task::ST: return "ST";
    case Task::ASR: return "ASR";
    case Task::MT: return "MT";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "ST" || s == "st") return Task::ST;
  if (s == "ASR" || s == "asr") return Task::ASR;
  if (s == "MT" || s == "mt") return Task::MT;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::string to_string(AsrVariant v) {
  switch (v) {
    case AsrVariant::Ctc: return "ctc";
    case AsrVariant::Ce: return "ce";
    case AsrVariant::CtcCe: return "ctc+ce";
  }
  return "?";
}

AsrVariant parse_asr_variant(const std::string& s) {
  if (s == "ctc") return AsrVariant::Ctc;
  if (s == "ce") return AsrVariant::Ce;
  if (s == "ctc+ce") return AsrVariant::CtcCe;
  throw std::invalid_argument("unknown ASR variant '" + s + "' (expected ctc, ce or ctc+ce)");
}

void ModelConfig::validate(std::size_t max_seq_len) const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw std::invalid_argument(std::string("model: ") + name + " must be positive");
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(ffn_dim, "ffn_dim");
  positive(a_enc_layers, "a_enc_layers");
  positive(t_enc_layers, "t_enc_layers");
  positive(dec_layers, "dec_layers");
  positive(l2g_base_kernel, "l2g_base_kernel");
  positive(vocab_size_src, "vocab_size_src");
  positive(vocab_size_tgt, "vocab_size_tgt");
  positive(frame_dim, "frame_dim");
  if (l2g_base_kernel % 2 == 0) throw std::invalid_argument("model: l2g_base_kernel must be odd");
  if (l2g_stride < 0) throw std::invalid_argument("model: l2g_stride must be non-negative");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout must lie in [0, 1)");
  const std::size_t widest = kernel_size(static_cast<std::size_t>(t_enc_layers - 1));
  if (widest > max_seq_len) {
    throw std::invalid_argument("model: L2G kernel " + std::to_string(widest) + " exceeds max sequence length " +
                                std::to_string(max_seq_len));
  }
}

const TaskOutputs& ForwardResult::at(Task t) const {
  auto it = tasks.find(t);
  if (it == tasks.end()) throw std::out_of_range("forward result has no " + to_string(t) + " outputs");
  return it->second;
}

namespace {

ParamGroup make_group(Partition p, int layer, SublayerKind kind, std::vector<NamedTensor> tensors) {
  ParamGroup g;
  g.key = GroupKey{p, layer, kind};
  g.tensors = std::move(tensors);
  return g;
}

std::string layer_prefix(const char* part, std::size_t i) { return std::string(part) + "." + std::to_string(i); }

// Decoder input: start symbol followed by tokens[:-1], pad beyond the length.
std::vector<int> shifted_prefix(const std::vector<int>& tokens, std::span<const std::size_t> lens, std::size_t width,
                                int start, int pad) {
  std::vector<int> prefix(tokens.size(), pad);
  for (std::size_t b = 0; b < lens.size(); ++b) {
    if (lens[b] == 0) continue;
    prefix[b * width] = start;
    for (std::size_t t = 1; t < lens[b]; ++t) prefix[b * width + t] = tokens[b * width + t - 1];
  }
  return prefix;
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  symbols_ = Symbols{std::max(config_.vocab_size_src, config_.vocab_size_tgt)};
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto h = static_cast<std::size_t>(config_.n_heads);
  const auto ffn = static_cast<std::size_t>(config_.ffn_dim);
  const auto table = static_cast<std::size_t>(symbols_.size());
  Initializer init(config_.seed);

  std::vector<NamedTensor> named;
  auto take = [&named]() { return std::exchange(named, {}); };

  a_in_ = Linear::create(init, static_cast<std::size_t>(config_.frame_dim), d);
  a_in_.collect("a_enc.input", named);
  registry_.add_group(make_group(Partition::AEnc, -1, SublayerKind::Other, take()));
  for (int i = 0; i < config_.a_enc_layers; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    EncoderLayer layer{AttentionBlock::create(init, d, h), FeedForwardBlock::create(init, d, ffn)};
    layer.attn.collect(layer_prefix("a_enc", idx) + ".attn", named);
    registry_.add_group(make_group(Partition::AEnc, i, SublayerKind::Atten, take()));
    layer.ffn.collect(layer_prefix("a_enc", idx) + ".ffn", named);
    registry_.add_group(make_group(Partition::AEnc, i, SublayerKind::Ffn, take()));
    a_layers_.push_back(std::move(layer));
  }
  a_norm_ = Norm::create(init, d);
  a_norm_.collect("a_enc.norm", named);
  registry_.add_group(make_group(Partition::AEnc, config_.a_enc_layers, SublayerKind::Other, take()));
  ctc_head_ = Linear::create(init, d, static_cast<std::size_t>(symbols_.ctc_classes()));
  ctc_head_.collect("a_enc.ctc", named);
  registry_.add_group(make_group(Partition::AEnc, config_.a_enc_layers + 1, SublayerKind::Other, take()));
  lookback_ = LookBack::create(init, d, ffn);
  lookback_.collect("a_enc.lookback", named);
  registry_.add_group(make_group(Partition::AEnc, config_.a_enc_layers + 2, SublayerKind::Other, take()));

  const double embed_std = 1.0 / std::sqrt(static_cast<double>(d));
  text_embedding_ = init.normal({table, d}, embed_std);
  named.push_back({"t_enc.embedding", text_embedding_});
  registry_.add_group(make_group(Partition::TEnc, -1, SublayerKind::Other, take()));
  for (int i = 0; i < config_.t_enc_layers; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const std::size_t k = config_.kernel_size(idx);
    TextLayer layer;
    layer.block = EncoderLayer{AttentionBlock::create(init, d, h), FeedForwardBlock::create(init, d, ffn)};
    layer.extractor.norm = Norm::create(init, d);
    layer.extractor.depthwise = init.uniform({k, d}, 1.0 / std::sqrt(static_cast<double>(k)));
    layer.extractor.depthwise_bias = init.constant({d}, 0.0);
    layer.extractor.pointwise = Linear::create(init, d, d);
    const std::string pre = layer_prefix("t_enc", idx);
    layer.block.attn.collect(pre + ".attn", named);
    registry_.add_group(make_group(Partition::TEnc, i, SublayerKind::Atten, take()));
    layer.block.ffn.collect(pre + ".ffn", named);
    registry_.add_group(make_group(Partition::TEnc, i, SublayerKind::Ffn, take()));
    layer.extractor.norm.collect(pre + ".l2g.norm", named);
    named.push_back({pre + ".l2g.depthwise", layer.extractor.depthwise});
    named.push_back({pre + ".l2g.depthwise_bias", layer.extractor.depthwise_bias});
    layer.extractor.pointwise.collect(pre + ".l2g.pointwise", named);
    registry_.add_group(make_group(Partition::TEnc, i, SublayerKind::Other, take()));
    t_layers_.push_back(std::move(layer));
  }
  t_norm_ = Norm::create(init, d);
  t_norm_.collect("t_enc.norm", named);
  registry_.add_group(make_group(Partition::TEnc, config_.t_enc_layers, SublayerKind::Other, take()));

  dec_embedding_ = init.normal({table, d}, embed_std);
  named.push_back({"decoder.embedding", dec_embedding_});
  registry_.add_group(make_group(Partition::Decoder, -1, SublayerKind::Other, take()));
  for (int i = 0; i < config_.dec_layers; ++i) {
    const std::string pre = layer_prefix("decoder", static_cast<std::size_t>(i));
    DecoderLayer layer{AttentionBlock::create(init, d, h), FeedForwardBlock::create(init, d, ffn),
                       AttentionBlock::create(init, d, h)};
    layer.self_attn.collect(pre + ".self_attn", named);
    registry_.add_group(make_group(Partition::Decoder, i, SublayerKind::Atten, take()));
    layer.ffn.collect(pre + ".ffn", named);
    registry_.add_group(make_group(Partition::Decoder, i, SublayerKind::Ffn, take()));
    layer.cross_attn.collect(pre + ".cross_attn", named);
    registry_.add_group(make_group(Partition::Decoder, i, SublayerKind::Other, take()));
    d_layers_.push_back(std::move(layer));
  }
  d_norm_ = Norm::create(init, d);
  out_proj_ = Linear::create(init, d, table);
  d_norm_.collect("decoder.norm", named);
  out_proj_.collect("decoder.output", named);
  registry_.add_group(make_group(Partition::Decoder, config_.dec_layers, SublayerKind::Other, take()));
}

Tensor Model::maybe_dropout(const Tensor& x, std::mt19937_64* rng) const {
  if (!rng || config_.dropout <= 0.0) return x;
  return dropout(x, config_.dropout, *rng);
}

Tensor Model::encode_layer(const EncoderLayer& layer, const Tensor& x, std::span<const std::size_t> lengths,
                           std::mt19937_64* rng, Tensor* attention_out, AttentionMap* record) const {
  const Tensor a = layer.attn(x, lengths, Tensor{}, lengths, false, record);
  if (attention_out) *attention_out = a;
  const Tensor y = add(x, maybe_dropout(a, rng));
  return add(y, maybe_dropout(layer.ffn(y), rng));
}

Tensor Model::embed_tokens(const Tensor& table, std::span<const int> ids, std::size_t batch,
                           std::size_t length) const {
  return scale(embedding(table, ids, {batch, length}), std::sqrt(static_cast<double>(config_.d_model)));
}

Tensor Model::a_enc_forward(const Tensor& speech, std::span<const std::size_t> lengths, std::mt19937_64* rng) const {
  if (speech.rank() != 3 || speech.dim(2) != static_cast<std::size_t>(config_.frame_dim) ||
      lengths.size() != speech.dim(0)) {
    throw ShapeError("a_enc_forward", "speech " + shape_str(speech.shape()) + " with " +
                                          std::to_string(lengths.size()) + " lengths");
  }
  const std::size_t B = speech.dim(0), T = speech.dim(1);
  if (T == 0) throw ShapeError("a_enc_forward", "empty speech input");
  const auto d = static_cast<std::size_t>(config_.d_model);
  Tensor x = maybe_dropout(add(a_in_(speech), sinusoidal_positions(B, T, d)), rng);
  for (const auto& layer : a_layers_) x = encode_layer(layer, x, lengths, rng, nullptr, nullptr);
  return a_norm_(x);
}

Tensor Model::ctc_log_probs(const Tensor& acoustic) const { return log_softmax(ctc_head_(acoustic)); }

Tensor Model::l2g_branch(const Tensor& x, std::size_t layer, std::span<const std::size_t> lengths) const {
  const auto& e = t_layers_.at(layer).extractor;
  return e.pointwise(depthwise_conv1d(e.norm(x), e.depthwise, e.depthwise_bias, lengths));
}

Tensor Model::l2g_extractor(const Tensor& x, std::size_t layer, std::span<const std::size_t> lengths) const {
  return add(x, l2g_branch(x, layer, lengths));
}

TextEncoding Model::t_enc_forward(const Tensor& features, std::span<const std::size_t> lengths, Stream stream,
                                  bool use_l2g, bool record_attention, std::mt19937_64* rng) const {
  (void)stream;
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (features.rank() != 3 || features.dim(2) != d || lengths.size() != features.dim(0)) {
    throw ShapeError("t_enc_forward", "features " + shape_str(features.shape()) + " with " +
                                          std::to_string(lengths.size()) + " lengths");
  }
  const std::size_t B = features.dim(0), L = features.dim(1);
  if (L == 0) throw ShapeError("t_enc_forward", "empty input");
  TextEncoding enc;
  enc.input = features;
  enc.lengths.assign(lengths.begin(), lengths.end());
  Tensor x = maybe_dropout(add(features, sinusoidal_positions(B, L, d)), rng);
  for (std::size_t i = 0; i < t_layers_.size(); ++i) {
    if (use_l2g) {
      const Tensor branch = l2g_branch(x, i, lengths);
      enc.extractor_outs.push_back(branch);
      x = add(x, maybe_dropout(branch, rng));
    }
    Tensor attn_out;
    AttentionMap map;
    x = encode_layer(t_layers_[i].block, x, lengths, rng, &attn_out, record_attention ? &map : nullptr);
    enc.attention_outs.push_back(attn_out);
    if (record_attention) enc.attention.push_back(std::move(map));
  }
  enc.output = t_norm_(x);
  return enc;
}

Tensor Model::decoder_forward(std::span<const int> prefix, std::size_t batch,
                              std::span<const std::size_t> prefix_lengths, const Tensor& memory,
                              std::span<const std::size_t> memory_lengths, std::mt19937_64* rng) const {
  if (batch == 0 || prefix.empty() || prefix.size() % batch != 0) {
    throw ShapeError("decoder_forward", std::to_string(prefix.size()) + " prefix ids for batch " +
                                            std::to_string(batch));
  }
  if (prefix_lengths.size() != batch || memory.rank() != 3 || memory.dim(0) != batch ||
      memory_lengths.size() != batch) {
    throw ShapeError("decoder_forward", "memory " + shape_str(memory.shape()) + " does not match batch " +
                                            std::to_string(batch));
  }
  const std::size_t L = prefix.size() / batch;
  const auto d = static_cast<std::size_t>(config_.d_model);
  Tensor x = maybe_dropout(add(embed_tokens(dec_embedding_, prefix, batch, L), sinusoidal_positions(batch, L, d)), rng);
  for (const auto& layer : d_layers_) {
    x = add(x, maybe_dropout(layer.self_attn(x, prefix_lengths, Tensor{}, prefix_lengths, true), rng));
    x = add(x, maybe_dropout(layer.cross_attn(x, prefix_lengths, memory, memory_lengths, false), rng));
    x = add(x, maybe_dropout(layer.ffn(x), rng));
  }
  return out_proj_(d_norm_(x));
}

TextEncoding Model::encode_speech(const SyntheticBatch& batch, const Tensor& acoustic,
                                  std::span<const double> ctc_values, const ForwardOptions& options,
                                  std::optional<ShrinkStats>& stats) const {
  stats.reset();
  if (!(options.use_shrink && options.shrink_active)) {
    return t_enc_forward(acoustic, batch.speech_lens, Stream::Speech, options.use_l2g, options.record_attention,
                         options.rng);
  }
  std::vector<double> own;
  if (ctc_values.empty()) {
    NoGradGuard guard;
    const Tensor lp = ctc_log_probs(acoustic);
    own.assign(lp.data().begin(), lp.data().end());
    ctc_values = own;
  }
  auto shrunk = shrink_sequence(acoustic, batch.speech_lens, ctc_values,
                                static_cast<std::size_t>(symbols_.ctc_classes()),
                                options.use_lbm ? &lookback_ : nullptr);
  ShrinkStats s;
  s.frames_total = shrunk.frames_total;
  s.positions_total = shrunk.positions_total;
  s.sequences = std::move(shrunk.sequences);
  stats = std::move(s);
  return t_enc_forward(shrunk.features, shrunk.lengths, Stream::Speech, options.use_l2g, options.record_attention,
                       options.rng);
}

ForwardResult Model::forward(const SyntheticBatch& batch, std::span<const Task> tasks,
                             const ForwardOptions& options) const {
  auto has = [&](Task t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
  const bool st = has(Task::ST), asr = has(Task::ASR), mt = has(Task::MT);
  const bool asr_ctc = asr && options.asr_variant != AsrVariant::Ce;
  const bool asr_ce = asr && options.asr_variant != AsrVariant::Ctc;
  const std::size_t B = batch.batch_size;
  if (B == 0) throw ShapeError("forward", "empty batch");
  const int pad = symbols_.pad();

  ForwardResult result;
  for (Task t : tasks) ++forward_calls_[static_cast<std::size_t>(t)];

  if (st || asr) {
    const Tensor speech = Tensor::from({B, batch.max_frames, batch.frame_dim}, batch.speech);
    const Tensor acoustic = a_enc_forward(speech, batch.speech_lens, options.rng);
    Tensor ctc_lp;
    if (asr_ctc) {
      ctc_lp = ctc_log_probs(acoustic);
      TaskOutputs& out = result.tasks[Task::ASR];
      out.task = Task::ASR;
      out.ctc_log_probs = ctc_lp;
      out.ctc_lengths = batch.speech_lens;
      for (std::size_t b = 0; b < B; ++b) {
        const auto s = batch.src(b);
        out.ctc_targets.emplace_back(s.begin(), s.end());
      }
    }
    if (st || asr_ce) {
      std::optional<ShrinkStats> stats;
      std::span<const double> values;
      if (ctc_lp.defined()) values = ctc_lp.data();
      TextEncoding enc = encode_speech(batch, acoustic, values, options, stats);
      if (st) {
        TaskOutputs& out = result.tasks[Task::ST];
        out.task = Task::ST;
        const auto prefix = shifted_prefix(batch.tgt_tokens, batch.tgt_lens, batch.max_tgt, symbols_.bos(), pad);
        out.logits = decoder_forward(prefix, B, batch.tgt_lens, enc.output, enc.lengths, options.rng);
        out.targets = batch.tgt_tokens;
        out.encoding = enc;
        out.shrink = stats;
      }
      if (asr_ce) {
        TaskOutputs& out = result.tasks[Task::ASR];
        out.task = Task::ASR;
        const auto prefix = shifted_prefix(batch.src_tokens, batch.src_lens, batch.max_src, symbols_.bos_src(), pad);
        out.logits = decoder_forward(prefix, B, batch.src_lens, enc.output, enc.lengths, options.rng);
        out.targets = batch.src_tokens;
        out.encoding = enc;
        out.shrink = stats;
      }
    }
  }

  if (mt) {
    std::vector<std::vector<int>> noisy(B);
    const bool noise = options.use_l2g && options.rng && options.text_noise_prob > 0.0;
    std::size_t width = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto s = batch.src(b);
      noisy[b] = noise ? noise_inject(s, options.text_noise_prob, *options.rng) : std::vector<int>(s.begin(), s.end());
      width = std::max(width, noisy[b].size());
    }
    std::vector<int> ids(B * width, pad);
    std::vector<std::size_t> lens(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy(noisy[b].begin(), noisy[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * width));
      lens[b] = noisy[b].size();
    }
    const Tensor emb = embed_tokens(text_embedding_, ids, B, width);
    TextEncoding enc = t_enc_forward(emb, lens, Stream::Text, options.use_l2g, options.record_attention, options.rng);
    TaskOutputs& out = result.tasks[Task::MT];
    out.task = Task::MT;
    const auto prefix = shifted_prefix(batch.tgt_tokens, batch.tgt_lens, batch.max_tgt, symbols_.bos(), pad);
    out.logits = decoder_forward(prefix, B, batch.tgt_lens, enc.output, enc.lengths, options.rng);
    out.targets = batch.tgt_tokens;
    out.encoding = std::move(enc);
  }

  if (options.want_clean_text) {
    result.clean_text = embed_tokens(text_embedding_, batch.src_tokens, B, batch.max_src);
    result.clean_text_lengths = batch.src_lens;
  }
  return result;
}

TaskOutputs Model::forward_task(const SyntheticBatch& batch, Task task, const ForwardOptions& options) const {
  const Task tasks[] = {task};
  auto r = forward(batch, tasks, options);
  return std::move(r.tasks.at(task));
}

std::vector<std::vector<int>> Model::greedy_translate(const SyntheticBatch& batch,
                                                      const ForwardOptions& options) const {
  NoGradGuard guard;
  const std::size_t B = batch.batch_size;
  ForwardOptions opts = options;
  opts.rng = nullptr;
  opts.record_attention = false;
  const Tensor speech = Tensor::from({B, batch.max_frames, batch.frame_dim}, batch.speech);
  const Tensor acoustic = a_enc_forward(speech, batch.speech_lens);
  std::optional<ShrinkStats> stats;
  const TextEncoding enc = encode_speech(batch, acoustic, {}, opts, stats);

  const std::size_t steps = batch.max_tgt;
  const auto V = static_cast<std::size_t>(symbols_.size());
  const int real_max = symbols_.vocab_size;
  std::vector<std::vector<int>> out(B);
  std::vector<int> prefix(B, symbols_.bos());
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t L = t + 1;
    std::vector<std::size_t> lens(B, L);
    const Tensor logits = decoder_forward(prefix, B, lens, enc.output, enc.lengths);
    const auto values = logits.data();
    std::vector<int> next(B * (L + 1));
    for (std::size_t b = 0; b < B; ++b) {
      const double* row = values.data() + (b * L + t) * V;
      int best = 1;
      for (int c = 2; c <= real_max; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (t < batch.tgt_lens[b]) out[b].push_back(best);
      std::copy(prefix.begin() + static_cast<std::ptrdiff_t>(b * L),
                prefix.begin() + static_cast<std::ptrdiff_t>((b + 1) * L),
                next.begin() + static_cast<std::ptrdiff_t>(b * (L + 1)));
      next[b * (L + 1) + L] = best;
    }
    prefix = std::move(next);
  }
  return out;
}

}  // namespace mtlab
