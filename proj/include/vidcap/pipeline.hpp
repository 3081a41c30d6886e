#pragma once

// Glue shared by the CLI and the acceptance suite: loading a split with its
// vocabulary, fitting the model config to the data, and scoring a model.

#include <filesystem>
#include <string>
#include <vector>

#include "vidcap/config.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/generation.hpp"
#include "vidcap/metrics.hpp"
#include "vidcap/model.hpp"
#include "vidcap/objective.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

struct LoadedData {
  DatasetSplit split;
  Vocabulary vocab;
};

/// The vocabulary comes from vocab_path when given, else from the file the
/// manifest names (relative to the manifest's directory).
inline LoadedData load_data(const fs::path& manifest, const std::string& vocab_path = "",
                            const DataLimits& lim = {}) {
  LoadedData d;
  d.split = load_manifest(manifest, lim);
  const fs::path vp = vocab_path.empty() ? manifest.parent_path() / d.split.vocabulary_file : fs::path(vocab_path);
  d.vocab = Vocabulary::load(vp.string());
  return d;
}

/// Zero-valued feature_dim, vocab_size and actobj_dim are taken from the
/// data; non-zero ones must agree with it.
inline ModelConfig resolve_model_config(ModelConfig c, const DatasetSplit& split, const Vocabulary& vocab) {
  auto fit = [](std::size_t& field, std::size_t actual, const char* name, const char* what) {
    if (field == 0) {
      field = actual;
    } else if (field != actual) {
      throw ValidationError(std::string("model.") + name + " is " + std::to_string(field) + " but the " + what +
                            " gives " + std::to_string(actual));
    }
  };
  fit(c.feature_dim, split.feature_dim, "feature_dim", "dataset");
  fit(c.vocab_size, vocab.size(), "vocab_size", "vocabulary");
  fit(c.actobj_dim, split.labels.width(), "actobj_dim", "label space (actions + objects + pseudo)");
  c.validate();
  return c;
}

inline json step_log_json(const StepResult& r) {
  return {{"step", r.step},
          {"lr", r.lr},
          {"snippet_loss", r.loss.snippet_loss},
          {"actobj_loss", r.loss.actobj_loss},
          {"sentence_loss", r.loss.sentence_loss},
          {"total", r.loss.total},
          {"grad_norm", r.grad_norm},
          {"clamped", r.clamped}};
}

inline std::vector<GenerationOutput> generate_split(const DatasetSplit& split, ModelParams<float>& params,
                                                    const ProviderSet& providers, const Vocabulary& vocab,
                                                    const GenerationConfig& gc) {
  std::vector<GenerationOutput> out;
  out.reserve(split.videos.size());
  for (const auto& v : split.videos) out.push_back(generate_paragraph(v, params, providers, vocab, gc));
  return out;
}

inline EvalReport evaluate_model(const DatasetSplit& split, ModelParams<float>& params, const ProviderSet& providers,
                                 const Vocabulary& vocab, const GenerationConfig& gc) {
  return evaluate(to_generated(generate_split(split, params, providers, vocab, gc)), split);
}

/// Fraction of GT snippets whose generated caption equals the GT caption
/// after normalization (gt_proposals outputs).
inline double exact_caption_rate(const std::vector<GenerationOutput>& outs, const DatasetSplit& split) {
  std::size_t hit = 0, total = 0;
  for (const auto& o : outs) {
    const auto& v = split.video(o.id);
    for (std::size_t i = 0; i < v.snippets.size(); ++i) {
      ++total;
      if (i < o.size() && normalize_text(o.captions[i]) == normalize_text(v.snippets[i].caption)) ++hit;
    }
  }
  if (total == 0) throw ValidationError("exact_caption_rate: no snippets");
  return double(hit) / double(total);
}

}  // namespace vidcap
