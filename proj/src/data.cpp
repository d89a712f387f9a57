// SPDX-License-Identifier: Apache-2.0

#include "mtlab/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace mtlab {

namespace {

constexpr std::uint64_t kPrototypeStream = 0x70726f746fULL;
constexpr std::uint64_t kPermutationStream = 0x7065726dULL;
constexpr std::uint64_t kTextStream = 1;
constexpr std::uint64_t kSpeechStream = 2;

}  // namespace

std::string to_string(TranslationRule rule) {
  return rule == TranslationRule::ReverseAndPermute ? "reverse-and-permute" : "fixed-permutation";
}

TranslationRule parse_translation_rule(const std::string& s) {
  if (s == "reverse-and-permute") return TranslationRule::ReverseAndPermute;
  if (s == "fixed-permutation") return TranslationRule::FixedPermutation;
  throw std::invalid_argument("unknown translation_rule '" + s + "'");
}

void CorpusConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("corpus.vocab_size must be >= 2");
  if (min_src_len < 1 || max_src_len < min_src_len) {
    throw std::invalid_argument("corpus lengths must satisfy 1 <= min_src_len <= max_src_len");
  }
  if (expansion_min < 1 || expansion_max < expansion_min) {
    throw std::invalid_argument("corpus expansion must satisfy 1 <= expansion_min <= expansion_max");
  }
  if (!(blank_insert_prob >= 0.0 && blank_insert_prob < 1.0)) {
    throw std::invalid_argument("corpus.blank_insert_prob must lie in [0, 1)");
  }
  if (!(frame_noise_std >= 0.0)) throw std::invalid_argument("corpus.frame_noise_std must be >= 0");
  if (frame_dim < 1) throw std::invalid_argument("corpus.frame_dim must be >= 1");
}

std::span<const int> SyntheticBatch::src(std::size_t b) const {
  return std::span<const int>(src_tokens).subspan(b * max_src, src_lens[b]);
}

std::span<const int> SyntheticBatch::tgt(std::size_t b) const {
  return std::span<const int>(tgt_tokens).subspan(b * max_tgt, tgt_lens[b]);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) { return std::mt19937_64(mix_seed(seed, stream)); }

std::vector<double> token_prototypes(const CorpusConfig& config) {
  const auto rows = static_cast<Eigen::Index>(config.vocab_size + 1);
  const auto cols = static_cast<Eigen::Index>(config.frame_dim);
  const Eigen::Index n = std::max(rows, cols);
  auto rng = make_rng(config.seed, kPrototypeStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd gaussian(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) gaussian(i, j) = normal(rng);
  }
  const Eigen::MatrixXd q = gaussian.householderQr().householderQ();
  const double s = std::sqrt(static_cast<double>(n) / static_cast<double>(cols));
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out[static_cast<std::size_t>(i * cols + j)] = s * q(i, j);
  }
  return out;
}

std::vector<int> token_permutation(const CorpusConfig& config) {
  std::vector<int> perm(static_cast<std::size_t>(config.vocab_size + 1));
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng(config.seed, kPermutationStream);
  std::shuffle(perm.begin() + 1, perm.end(), rng);
  return perm;
}

SpeechFrames expand_to_speech(std::span<const int> src, const CorpusConfig& config, std::uint64_t sample_seed) {
  const auto protos = token_prototypes(config);
  return expand_to_speech(src, config, sample_seed, protos);
}

SpeechFrames expand_to_speech(std::span<const int> src, const CorpusConfig& config, std::uint64_t sample_seed,
                              std::span<const double> prototypes) {
  if (src.empty()) throw std::invalid_argument("expand_to_speech: empty token sequence");
  for (int id : src) {
    if (id < 1 || id > config.vocab_size) {
      throw std::invalid_argument("expand_to_speech: token " + std::to_string(id) + " outside vocabulary");
    }
  }
  const auto F = static_cast<std::size_t>(config.frame_dim);
  auto rng = make_rng(mix_seed(config.seed, sample_seed), kSpeechStream);
  std::uniform_int_distribution<int> repeat(config.expansion_min, config.expansion_max);
  std::bernoulli_distribution blank(config.blank_insert_prob);
  std::normal_distribution<double> noise(0.0, 1.0);

  SpeechFrames out;
  out.frame_dim = F;
  auto emit = [&](int proto_row, int label, int count) {
    for (int r = 0; r < count; ++r) {
      for (std::size_t c = 0; c < F; ++c) {
        const double base = prototypes[static_cast<std::size_t>(proto_row) * F + c];
        out.frames.push_back(config.frame_noise_std > 0.0 ? base + config.frame_noise_std * noise(rng) : base);
      }
      out.alignment.push_back(label);
    }
  };
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (i > 0 && blank(rng)) emit(kBlankId, kBlankFrame, repeat(rng));
    emit(src[i], static_cast<int>(i), repeat(rng));
  }
  out.length = out.alignment.size();
  return out;
}

double expected_frames(const CorpusConfig& config, std::size_t length) {
  const double er = 0.5 * (config.expansion_min + config.expansion_max);
  const double L = static_cast<double>(length);
  return er * L + config.blank_insert_prob * std::max(0.0, L - 1.0) * er;
}

std::vector<int> translate(std::span<const int> src, TranslationRule rule, std::span<const int> permutation) {
  std::vector<int> out(src.begin(), src.end());
  if (rule == TranslationRule::ReverseAndPermute) std::reverse(out.begin(), out.end());
  for (auto& id : out) {
    if (id < 0 || static_cast<std::size_t>(id) >= permutation.size()) {
      throw std::invalid_argument("translate: token " + std::to_string(id) + " outside permutation table");
    }
    id = permutation[static_cast<std::size_t>(id)];
  }
  return out;
}

std::vector<int> noise_inject(std::span<const int> tokens, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("noise_inject: p must lie in [0, 1)");
  std::vector<int> out;
  out.reserve(tokens.size() * 2);
  std::bernoulli_distribution hit(p);
  std::bernoulli_distribution coin(0.5);
  for (int t : tokens) {
    out.push_back(t);
    if (p > 0.0 && hit(rng)) out.push_back(coin(rng) ? kBlankId : t);
  }
  return out;
}

std::size_t count_runs(std::span<const int> labels) {
  std::size_t runs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i == 0 || labels[i] != labels[i - 1]) ++runs;
  }
  return runs;
}

double oracle_length_ratio(const SyntheticBatch& batch) {
  std::size_t runs = 0, frames = 0;
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    runs += count_runs(batch.alignments[b]);
    frames += batch.speech_lens[b];
  }
  return frames ? static_cast<double>(runs) / static_cast<double>(frames) : 0.0;
}

Corpus::Corpus(CorpusConfig config)
    : config_(config), symbols_{config.vocab_size} {
  config_.validate();
  permutation_ = token_permutation(config_);
  prototypes_ = token_prototypes(config_);
}

Sample Corpus::sample(std::uint64_t sample_seed) const {
  Sample s;
  s.seed = sample_seed;
  auto rng = make_rng(mix_seed(config_.seed, sample_seed), kTextStream);
  std::uniform_int_distribution<int> length(config_.min_src_len, config_.max_src_len);
  std::uniform_int_distribution<int> token(1, config_.vocab_size);
  s.src.resize(static_cast<std::size_t>(length(rng)));
  for (auto& t : s.src) t = token(rng);
  s.tgt = translate(s.src, config_.translation_rule, permutation_);
  s.speech = expand_to_speech(s.src, config_, sample_seed, prototypes_);
  return s;
}

SyntheticBatch Corpus::batch(std::span<const std::uint64_t> sample_seeds) const {
  if (sample_seeds.empty()) throw std::invalid_argument("Corpus::batch: no sample seeds");
  std::vector<Sample> samples;
  samples.reserve(sample_seeds.size());
  for (auto seed : sample_seeds) samples.push_back(sample(seed));

  SyntheticBatch b;
  b.batch_size = samples.size();
  b.frame_dim = static_cast<std::size_t>(config_.frame_dim);
  for (const auto& s : samples) {
    b.max_frames = std::max(b.max_frames, s.speech.length);
    b.max_src = std::max(b.max_src, s.src.size());
    b.max_tgt = std::max(b.max_tgt, s.tgt.size());
  }
  const int pad = symbols_.pad();
  b.speech.assign(b.batch_size * b.max_frames * b.frame_dim, 0.0);
  b.src_tokens.assign(b.batch_size * b.max_src, pad);
  b.tgt_tokens.assign(b.batch_size * b.max_tgt, pad);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::copy(s.speech.frames.begin(), s.speech.frames.end(),
              b.speech.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames * b.frame_dim));
    std::copy(s.src.begin(), s.src.end(), b.src_tokens.begin() + static_cast<std::ptrdiff_t>(i * b.max_src));
    std::copy(s.tgt.begin(), s.tgt.end(), b.tgt_tokens.begin() + static_cast<std::ptrdiff_t>(i * b.max_tgt));
    b.speech_lens.push_back(s.speech.length);
    b.src_lens.push_back(s.src.size());
    b.tgt_lens.push_back(s.tgt.size());
    b.sample_seeds.push_back(s.seed);
    b.alignments.push_back(s.speech.alignment);
  }
  return b;
}

void Corpus::export_jsonl(std::span<const std::uint64_t> sample_seeds, std::ostream& out) const {
  for (auto seed : sample_seeds) {
    const auto s = sample(seed);
    nlohmann::json row;
    row["sample_seed"] = seed;
    row["src"] = s.src;
    row["tgt"] = s.tgt;
    row["T"] = s.speech.length;
    out << row.dump() << '\n';
  }
}

}  // namespace mtlab
