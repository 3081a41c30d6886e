#pragma once

// JSON run configuration. Every section rejects keys it does not know.

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "vidcap/error.hpp"
#include "vidcap/grammar.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/model.hpp"
#include "vidcap/objective.hpp"
#include "vidcap/synth.hpp"

namespace vidcap {

using json = nlohmann::ordered_json;

namespace detail {

/// Reads known keys from one object and rejects the rest on finish().
class StrictReader {
 public:
  StrictReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ValidationError("config section '" + section_ + "' must be an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config key '" + where(key) + "' has the wrong type");
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError("unknown config key '" + where(it.key()) + "'");
    }
  }

  std::string where(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---- model ----------------------------------------------------------------

inline json to_json(const ModelConfig& c) {
  return {{"feature_dim", c.feature_dim},       {"context_dim", c.context_dim},
          {"d_model", c.d_model},               {"heads", c.heads},
          {"enc_layers", c.enc_layers},         {"dec_layers", c.dec_layers},
          {"ffn_dim", c.ffn_dim},               {"vocab_size", c.vocab_size},
          {"actobj_dim", c.actobj_dim},         {"max_frames", c.max_frames},
          {"max_snippets", c.max_snippets},     {"max_sentence_len", c.max_sentence_len},
          {"token_stride", c.token_stride},     {"memory_slots", c.memory_slots},
          {"dropout", c.dropout}};
}

inline void read_into(const json& j, ModelConfig& c) {
  detail::StrictReader r(j, "model");
  r.get("feature_dim", c.feature_dim);
  r.get("context_dim", c.context_dim);
  r.get("d_model", c.d_model);
  r.get("heads", c.heads);
  r.get("enc_layers", c.enc_layers);
  r.get("dec_layers", c.dec_layers);
  r.get("ffn_dim", c.ffn_dim);
  r.get("vocab_size", c.vocab_size);
  r.get("actobj_dim", c.actobj_dim);
  r.get("max_frames", c.max_frames);
  r.get("max_snippets", c.max_snippets);
  r.get("max_sentence_len", c.max_sentence_len);
  r.get("token_stride", c.token_stride);
  r.get("memory_slots", c.memory_slots);
  r.get("dropout", c.dropout);
  r.finish();
}

// ---- training ---------------------------------------------------------------

inline json to_json(const TrainConfig& c) {
  return {{"lambda_snippet", c.weights.snippet},
          {"lambda_actobj", c.weights.actobj},
          {"lambda_sentence", c.weights.sentence},
          {"warmup_steps", c.warmup_steps},
          {"lr_scale", c.lr_scale},
          {"batch_size", c.batch_size},
          {"label_smoothing", c.label_smoothing},
          {"max_steps", c.max_steps},
          {"seed", c.seed},
          {"clip_norm", c.clip_norm},
          {"mask_source", to_string(c.mask_source)},
          {"detach_actobj", c.detach_actobj},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every}};
}

inline void read_into(const json& j, TrainConfig& c) {
  detail::StrictReader r(j, "train");
  r.get("lambda_snippet", c.weights.snippet);
  r.get("lambda_actobj", c.weights.actobj);
  r.get("lambda_sentence", c.weights.sentence);
  r.get("warmup_steps", c.warmup_steps);
  r.get("lr_scale", c.lr_scale);
  r.get("batch_size", c.batch_size);
  r.get("label_smoothing", c.label_smoothing);
  r.get("max_steps", c.max_steps);
  r.get("seed", c.seed);
  r.get("clip_norm", c.clip_norm);
  std::string mask = to_string(c.mask_source);
  r.get("mask_source", mask);
  c.mask_source = parse_mask_source(mask);
  r.get("detach_actobj", c.detach_actobj);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("eval_every", c.eval_every);
  r.finish();
}

// ---- providers --------------------------------------------------------------

struct ProviderConfig {
  std::string explicit_kind = "null";
  std::string explicit_file;  ///< for explicit_kind == file
  std::string toy_kb_file;    ///< optional override of the built-in toy KB
  std::string implicit_kind = "null";
  std::string implicit_file;  ///< for implicit_kind == file
  bool hidden = true;
  std::vector<std::string> relations = default_relations();
  std::uint64_t embedder_seed = 0x5EEDull;
};

inline json to_json(const ProviderConfig& c) {
  return {{"explicit", c.explicit_kind}, {"explicit_file", c.explicit_file}, {"toy_kb_file", c.toy_kb_file},
          {"implicit", c.implicit_kind}, {"implicit_file", c.implicit_file}, {"hidden", c.hidden},
          {"relations", c.relations},    {"embedder_seed", c.embedder_seed}};
}

inline void read_into(const json& j, ProviderConfig& c) {
  detail::StrictReader r(j, "providers");
  r.get("explicit", c.explicit_kind);
  r.get("explicit_file", c.explicit_file);
  r.get("toy_kb_file", c.toy_kb_file);
  r.get("implicit", c.implicit_kind);
  r.get("implicit_file", c.implicit_file);
  r.get("hidden", c.hidden);
  r.get("relations", c.relations);
  r.get("embedder_seed", c.embedder_seed);
  r.finish();
}

inline ProviderSet build_providers(const ProviderConfig& c, const Grammar& grammar = default_grammar()) {
  if (c.relations.empty()) throw ValidationError("providers.relations must not be empty");
  ProviderSet ps;
  ps.hidden = c.hidden;
  ps.embedder = SentenceEmbedder(c.embedder_seed);
  switch (parse_provider_kind(c.explicit_kind)) {
    case ProviderKind::Null: ps.explicit_provider = ExplicitProvider::null(c.relations); break;
    case ProviderKind::Vectors: ps.explicit_provider = ExplicitProvider::vectors(c.relations); break;
    case ProviderKind::Toy:
      ps.explicit_provider = ExplicitProvider::toy(
          grammar, c.toy_kb_file.empty() ? default_toy_kb() : load_toy_kb(c.toy_kb_file), c.relations);
      break;
    case ProviderKind::File:
      if (c.explicit_file.empty()) throw ValidationError("providers.explicit_file is required for explicit=file");
      ps.explicit_provider = ExplicitProvider::file(c.explicit_file, c.relations);
      break;
  }
  switch (parse_provider_kind(c.implicit_kind)) {
    case ProviderKind::Null: ps.implicit_provider = ImplicitProvider::null(); break;
    case ProviderKind::Vectors: ps.implicit_provider = ImplicitProvider::vectors(); break;
    case ProviderKind::Toy: ps.implicit_provider = ImplicitProvider::toy(grammar); break;
    case ProviderKind::File:
      if (c.implicit_file.empty()) throw ValidationError("providers.implicit_file is required for implicit=file");
      ps.implicit_provider = ImplicitProvider::file(c.implicit_file);
      break;
  }
  return ps;
}

// ---- generation -------------------------------------------------------------

enum class GenerationMode { Free, GtProposals };

inline GenerationMode parse_generation_mode(const std::string& s) {
  if (s == "free") return GenerationMode::Free;
  if (s == "gt_proposals") return GenerationMode::GtProposals;
  throw ValidationError("unknown generation mode '" + s + "' (expected free|gt_proposals)");
}

inline std::string to_string(GenerationMode m) { return m == GenerationMode::Free ? "free" : "gt_proposals"; }

struct GenerationConfig {
  GenerationMode mode = GenerationMode::GtProposals;
  double stop_threshold = 0.5;
  std::size_t max_snippets = 20;
  std::size_t top_k = 3;

  void validate() const {
    if (!(stop_threshold >= 0 && stop_threshold <= 1)) throw ValidationError("generation.stop_threshold must lie in [0,1]");
    if (max_snippets == 0) throw ValidationError("generation.max_snippets must be positive");
  }
};

inline json to_json(const GenerationConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"stop_threshold", c.stop_threshold},
          {"max_snippets", c.max_snippets},
          {"top_k", c.top_k}};
}

inline void read_into(const json& j, GenerationConfig& c) {
  detail::StrictReader r(j, "generation");
  std::string mode = to_string(c.mode);
  r.get("mode", mode);
  c.mode = parse_generation_mode(mode);
  r.get("stop_threshold", c.stop_threshold);
  r.get("max_snippets", c.max_snippets);
  r.get("top_k", c.top_k);
  r.finish();
}

// ---- synthesis --------------------------------------------------------------

inline json to_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"num_videos", c.num_videos},
          {"frames_per_snippet", c.frames_per_snippet},
          {"snippets_per_video", c.snippets_per_video},
          {"feature_dim", c.feature_dim},
          {"noise_sigma", c.noise_sigma},
          {"occlusion_prob", c.occlusion_prob},
          {"object_persistence", c.object_persistence},
          {"embedder_seed", c.embedder_seed},
          {"dataset", c.dataset},
          {"split", c.split},
          {"max_frames", c.limits.max_frames},
          {"max_snippets", c.limits.max_snippets}};
}

inline void read_into(const json& j, SynthConfig& c) {
  detail::StrictReader r(j, "synth");
  r.get("seed", c.seed);
  r.get("num_videos", c.num_videos);
  r.get("frames_per_snippet", c.frames_per_snippet);
  r.get("snippets_per_video", c.snippets_per_video);
  r.get("feature_dim", c.feature_dim);
  r.get("noise_sigma", c.noise_sigma);
  r.get("occlusion_prob", c.occlusion_prob);
  r.get("object_persistence", c.object_persistence);
  r.get("embedder_seed", c.embedder_seed);
  r.get("dataset", c.dataset);
  r.get("split", c.split);
  r.get("max_frames", c.limits.max_frames);
  r.get("max_snippets", c.limits.max_snippets);
  r.finish();
}

// ---- run --------------------------------------------------------------------

struct DataPaths {
  std::string train;  ///< manifest
  std::string val;    ///< held-out manifest, optional
  std::string vocab;  ///< defaults to the manifest's vocabulary file
};

struct RunConfig {
  std::uint64_t seed = 1;  ///< model initialisation
  ModelConfig model;
  TrainConfig train;
  ProviderConfig providers;
  GenerationConfig generation;
  SynthConfig synth;
  DataPaths data;
  std::string output_dir = "run";
};

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["providers"] = to_json(c.providers);
  j["generation"] = to_json(c.generation);
  j["synth"] = to_json(c.synth);
  j["data"] = {{"train", c.data.train}, {"val", c.data.val}, {"vocab", c.data.vocab}};
  j["output_dir"] = c.output_dir;
  return j;
}

inline void read_into(const json& j, RunConfig& c) {
  detail::StrictReader r(j, "");
  r.get("seed", c.seed);
  if (auto* s = r.child("model")) read_into(*s, c.model);
  if (auto* s = r.child("train")) read_into(*s, c.train);
  if (auto* s = r.child("providers")) read_into(*s, c.providers);
  if (auto* s = r.child("generation")) read_into(*s, c.generation);
  if (auto* s = r.child("synth")) read_into(*s, c.synth);
  if (auto* s = r.child("data")) {
    detail::StrictReader d(*s, "data");
    d.get("train", c.data.train);
    d.get("val", c.data.val);
    d.get("vocab", c.data.vocab);
    d.finish();
  }
  r.get("output_dir", c.output_dir);
  r.finish();
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  read_into(j, c);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace vidcap
