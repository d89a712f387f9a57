// SPDX-License-Identifier: Apache-2.0

#include "mtlab/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mtlab {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the members of one JSON object into fields, rejecting unknown keys.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    doc_ = &doc;
  }

  template <class T>
  Section& field(const std::string& key, T& target) {
    known_.push_back(key);
    if (auto it = doc_->find(key); it != doc_->end()) {
      try {
        target = it->get<T>();
      } catch (const json::exception& e) {
        throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  Section& custom(const std::string& key, const std::function<void(const json&)>& read) {
    known_.push_back(key);
    if (auto it = doc_->find(key); it != doc_->end()) {
      try {
        read(*it);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  void finish() const {
    for (const auto& [key, value] : doc_->items()) {
      if (std::find(known_.begin(), known_.end(), key) == known_.end()) {
        throw ConfigError("config: unknown key '" + (name_.empty() ? key : name_ + "." + key) + "'");
      }
    }
  }

 private:
  const json* doc_ = nullptr;
  std::string name_;
  std::vector<std::string> known_;
};

}  // namespace

void RunConfig::validate() const {
  try {
    corpus.validate();
    model.validate(static_cast<std::size_t>(corpus.max_src_len * corpus.expansion_max * 2));
    scheduler.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.vocab_size_src != corpus.vocab_size || model.vocab_size_tgt != corpus.vocab_size) {
    throw ConfigError("config: model vocabulary sizes must equal corpus.vocab_size");
  }
  if (model.frame_dim != corpus.frame_dim) throw ConfigError("config: model.frame_dim must equal corpus.frame_dim");
  if (training.steps == 0 || training.batch_size == 0) throw ConfigError("config: steps and batch_size must be positive");
  if (toggles.use_cl && training.batch_size < 2) throw ConfigError("config: the contrastive loss needs batch_size >= 2");
  if (!(training.learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  if (training.beta1 < 0.0 || training.beta1 >= 1.0 || training.beta2 < 0.0 || training.beta2 >= 1.0) {
    throw ConfigError("config: Adam betas must lie in [0, 1)");
  }
  if (training.warmup_fraction < 0.0 || training.warmup_fraction > 1.0 || toggles.shrink_warmup_fraction < 0.0 ||
      toggles.shrink_warmup_fraction > 1.0) {
    throw ConfigError("config: warmup fractions must lie in [0, 1]");
  }
  if (toggles.text_noise_prob < 0.0 || toggles.text_noise_prob > 1.0) {
    throw ConfigError("config: text_noise_prob must lie in [0, 1]");
  }
  if (training.log_every == 0 || training.checkpoint_every == 0 || training.eval_every == 0) {
    throw ConfigError("config: logging, checkpoint and eval cadences must be positive");
  }
  if (w_asr < 0.0 || w_mt < 0.0 || w_cl < 0.0) throw ConfigError("config: loss weights must be non-negative");
}

void RunConfig::override_seed(std::uint64_t seed) {
  training.seed = seed;
  model.seed = seed;
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["corpus"] = {{"vocab_size", c.corpus.vocab_size},
                 {"min_src_len", c.corpus.min_src_len},
                 {"max_src_len", c.corpus.max_src_len},
                 {"expansion_min", c.corpus.expansion_min},
                 {"expansion_max", c.corpus.expansion_max},
                 {"blank_insert_prob", c.corpus.blank_insert_prob},
                 {"frame_noise_std", c.corpus.frame_noise_std},
                 {"frame_dim", c.corpus.frame_dim},
                 {"translation_rule", to_string(c.corpus.translation_rule)},
                 {"seed", c.corpus.seed}};
  j["model"] = {{"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"ffn_dim", c.model.ffn_dim},
                {"a_enc_layers", c.model.a_enc_layers},
                {"t_enc_layers", c.model.t_enc_layers},
                {"dec_layers", c.model.dec_layers},
                {"l2g_base_kernel", c.model.l2g_base_kernel},
                {"l2g_stride", c.model.l2g_stride},
                {"dropout", c.model.dropout},
                {"vocab_size_src", c.model.vocab_size_src},
                {"vocab_size_tgt", c.model.vocab_size_tgt},
                {"frame_dim", c.model.frame_dim},
                {"seed", c.model.seed}};
  j["scheduler"] = {{"s_asr", c.scheduler.s_asr},
                    {"s_mt", c.scheduler.s_mt},
                    {"update_every", c.scheduler.update_every},
                    {"prune_threshold", c.scheduler.prune_threshold},
                    {"k", c.scheduler.k},
                    {"exponent_mode", to_string(c.scheduler.exponent_mode)}};
  j["training"] = {{"steps", c.training.steps},
                   {"batch_size", c.training.batch_size},
                   {"learning_rate", c.training.learning_rate},
                   {"beta1", c.training.beta1},
                   {"beta2", c.training.beta2},
                   {"adam_eps", c.training.adam_eps},
                   {"warmup_fraction", c.training.warmup_fraction},
                   {"seed", c.training.seed},
                   {"checkpoint_every", c.training.checkpoint_every},
                   {"log_every", c.training.log_every},
                   {"eval_every", c.training.eval_every},
                   {"eval_samples", c.training.eval_samples}};
  j["toggles"] = {{"use_asr", c.toggles.use_asr},
                  {"use_mt", c.toggles.use_mt},
                  {"use_scheduler", c.toggles.use_scheduler},
                  {"use_shrink", c.toggles.use_shrink},
                  {"use_lbm", c.toggles.use_lbm},
                  {"use_l2g", c.toggles.use_l2g},
                  {"use_cl", c.toggles.use_cl},
                  {"use_consistency", c.toggles.use_consistency},
                  {"shrink_warmup_fraction", c.toggles.shrink_warmup_fraction},
                  {"text_noise_prob", c.toggles.text_noise_prob},
                  {"asr_variant", to_string(c.toggles.asr_variant)}};
  j["loss_weights"] = {{"w_asr", c.w_asr}, {"w_mt", c.w_mt}, {"w_cl", c.w_cl}};
  return j;
}

RunConfig run_config_from_json(const json& doc) {
  RunConfig c;
  auto text = [](auto parse) {
    return [parse](const json& v) { parse(v.get<std::string>()); };
  };
  Section root(doc, "");
  root.custom("corpus", [&](const json& v) {
        Section(v, "corpus")
            .field("vocab_size", c.corpus.vocab_size)
            .field("min_src_len", c.corpus.min_src_len)
            .field("max_src_len", c.corpus.max_src_len)
            .field("expansion_min", c.corpus.expansion_min)
            .field("expansion_max", c.corpus.expansion_max)
            .field("blank_insert_prob", c.corpus.blank_insert_prob)
            .field("frame_noise_std", c.corpus.frame_noise_std)
            .field("frame_dim", c.corpus.frame_dim)
            .custom("translation_rule",
                    text([&](const std::string& s) { c.corpus.translation_rule = parse_translation_rule(s); }))
            .field("seed", c.corpus.seed)
            .finish();
      })
      .custom("model", [&](const json& v) {
        Section(v, "model")
            .field("d_model", c.model.d_model)
            .field("n_heads", c.model.n_heads)
            .field("ffn_dim", c.model.ffn_dim)
            .field("a_enc_layers", c.model.a_enc_layers)
            .field("t_enc_layers", c.model.t_enc_layers)
            .field("dec_layers", c.model.dec_layers)
            .field("l2g_base_kernel", c.model.l2g_base_kernel)
            .field("l2g_stride", c.model.l2g_stride)
            .field("dropout", c.model.dropout)
            .field("vocab_size_src", c.model.vocab_size_src)
            .field("vocab_size_tgt", c.model.vocab_size_tgt)
            .field("frame_dim", c.model.frame_dim)
            .field("seed", c.model.seed)
            .finish();
      })
      .custom("scheduler", [&](const json& v) {
        Section(v, "scheduler")
            .field("s_asr", c.scheduler.s_asr)
            .field("s_mt", c.scheduler.s_mt)
            .field("update_every", c.scheduler.update_every)
            .field("prune_threshold", c.scheduler.prune_threshold)
            .field("k", c.scheduler.k)
            .custom("exponent_mode",
                    text([&](const std::string& s) { c.scheduler.exponent_mode = parse_exponent_mode(s); }))
            .finish();
      })
      .custom("training", [&](const json& v) {
        Section(v, "training")
            .field("steps", c.training.steps)
            .field("batch_size", c.training.batch_size)
            .field("learning_rate", c.training.learning_rate)
            .field("beta1", c.training.beta1)
            .field("beta2", c.training.beta2)
            .field("adam_eps", c.training.adam_eps)
            .field("warmup_fraction", c.training.warmup_fraction)
            .field("seed", c.training.seed)
            .field("checkpoint_every", c.training.checkpoint_every)
            .field("log_every", c.training.log_every)
            .field("eval_every", c.training.eval_every)
            .field("eval_samples", c.training.eval_samples)
            .finish();
      })
      .custom("toggles", [&](const json& v) {
        Section(v, "toggles")
            .field("use_asr", c.toggles.use_asr)
            .field("use_mt", c.toggles.use_mt)
            .field("use_scheduler", c.toggles.use_scheduler)
            .field("use_shrink", c.toggles.use_shrink)
            .field("use_lbm", c.toggles.use_lbm)
            .field("use_l2g", c.toggles.use_l2g)
            .field("use_cl", c.toggles.use_cl)
            .field("use_consistency", c.toggles.use_consistency)
            .field("shrink_warmup_fraction", c.toggles.shrink_warmup_fraction)
            .field("text_noise_prob", c.toggles.text_noise_prob)
            .custom("asr_variant", text([&](const std::string& s) { c.toggles.asr_variant = parse_asr_variant(s); }))
            .finish();
      })
      .custom("loss_weights", [&](const json& v) {
        Section(v, "loss_weights").field("w_asr", c.w_asr).field("w_mt", c.w_mt).field("w_cl", c.w_cl).finish();
      })
      .finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return run_config_from_json(doc);
}

std::string dump_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

}  // namespace mtlab
