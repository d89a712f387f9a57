// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic (speech, transcription, translation) triples.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mtlab {

/// Blank symbol shared by CTC, text noise and the speech generator.
inline constexpr int kBlankId = 0;
/// Alignment label of a generated blank frame.
inline constexpr int kBlankFrame = -1;

enum class TranslationRule { ReverseAndPermute, FixedPermutation };

std::string to_string(TranslationRule rule);
TranslationRule parse_translation_rule(const std::string& s);

struct CorpusConfig {
  int vocab_size = 20;  // real tokens 1..vocab_size; 0 is blank
  int min_src_len = 1;
  int max_src_len = 8;
  int expansion_min = 2;
  int expansion_max = 4;
  double blank_insert_prob = 0.2;
  double frame_noise_std = 0.1;
  int frame_dim = 16;
  TranslationRule translation_rule = TranslationRule::ReverseAndPermute;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Symbol table layout shared by every stream: blank, tokens, then specials.
struct Symbols {
  int vocab_size = 20;

  int blank() const { return kBlankId; }
  int pad() const { return vocab_size + 1; }
  /// Decoder start symbol for translation.
  int bos() const { return vocab_size + 2; }
  /// Decoder start symbol for transcription.
  int bos_src() const { return vocab_size + 3; }
  /// Embedding/output table size.
  int size() const { return vocab_size + 4; }
  /// CTC classes: blank plus tokens.
  int ctc_classes() const { return vocab_size + 1; }
};

struct SpeechFrames {
  std::size_t length = 0;
  std::size_t frame_dim = 0;
  std::vector<double> frames;  // [length, frame_dim]
  std::vector<int> alignment;  // source index per frame, or kBlankFrame
};

struct Sample {
  std::uint64_t seed = 0;
  std::vector<int> src;
  std::vector<int> tgt;
  SpeechFrames speech;
};

struct SyntheticBatch {
  std::size_t batch_size = 0;
  std::size_t max_frames = 0;
  std::size_t max_src = 0;
  std::size_t max_tgt = 0;
  std::size_t frame_dim = 0;
  std::vector<double> speech;  // [B, max_frames, frame_dim], zero padded
  std::vector<std::size_t> speech_lens;
  std::vector<int> src_tokens;  // [B, max_src], pad filled
  std::vector<std::size_t> src_lens;
  std::vector<int> tgt_tokens;  // [B, max_tgt], pad filled
  std::vector<std::size_t> tgt_lens;
  std::vector<std::uint64_t> sample_seeds;
  std::vector<std::vector<int>> alignments;

  std::span<const int> src(std::size_t b) const;
  std::span<const int> tgt(std::size_t b) const;
};

/// Token prototypes [(vocab_size + 1), frame_dim]; row 0 is the blank frame.
/// Rows come from a seeded QR factorization of a Gaussian matrix.
std::vector<double> token_prototypes(const CorpusConfig& config);

/// Bijection over ids 0..vocab_size with the blank fixed.
std::vector<int> token_permutation(const CorpusConfig& config);

/// Renders each token as a run of noisy prototype frames, with optional
/// blank runs between tokens. Pure in (src, config, sample_seed).
SpeechFrames expand_to_speech(std::span<const int> src, const CorpusConfig& config, std::uint64_t sample_seed);
SpeechFrames expand_to_speech(std::span<const int> src, const CorpusConfig& config, std::uint64_t sample_seed,
                              std::span<const double> prototypes);

/// Closed-form E[T] for a source of `length` tokens.
double expected_frames(const CorpusConfig& config, std::size_t length);

std::vector<int> translate(std::span<const int> src, TranslationRule rule, std::span<const int> permutation);

/// Per position, with probability p, either appends a blank after the token
/// or duplicates it (fair coin).
std::vector<int> noise_inject(std::span<const int> tokens, double p, std::mt19937_64& rng);

/// Number of maximal runs of equal labels.
std::size_t count_runs(std::span<const int> labels);

/// Sum of alignment runs over sum of frames: the shrink ratio a perfect
/// CTC path would give.
double oracle_length_ratio(const SyntheticBatch& batch);

/// Seeds a generator from a base seed and a stream tag (splitmix64 mixing).
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

class Corpus {
 public:
  explicit Corpus(CorpusConfig config);

  const CorpusConfig& config() const { return config_; }
  const Symbols& symbols() const { return symbols_; }
  std::span<const int> permutation() const { return permutation_; }
  std::span<const double> prototypes() const { return prototypes_; }

  Sample sample(std::uint64_t sample_seed) const;
  SyntheticBatch batch(std::span<const std::uint64_t> sample_seeds) const;

  /// One JSON object per line: {"sample_seed", "src", "tgt", "T"}.
  void export_jsonl(std::span<const std::uint64_t> sample_seeds, std::ostream& out) const;

 private:
  CorpusConfig config_;
  Symbols symbols_;
  std::vector<int> permutation_;
  std::vector<double> prototypes_;
};

}  // namespace mtlab
