#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vidcap/autodiff.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/grammar.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t num_videos = 8;
  std::size_t frames_per_snippet = 4;
  std::size_t snippets_per_video = 3;
  std::size_t feature_dim = 32;
  double noise_sigma = 0.1;
  /// Probability that a non-first snippet's object block is blanked out of
  /// its frame features (the object is still labelled and captioned).
  double occlusion_prob = 0.5;
  /// Probability that the next snippet keeps the current object.
  double object_persistence = 0.5;
  std::uint64_t embedder_seed = 0x5EEDull;
  std::string dataset = "synthetic";
  std::string split = "train";
  DataLimits limits;
};

struct SynthResult {
  DatasetSplit split;
  Vocabulary vocab;
  Grammar grammar;
};

inline double standard_normal(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline void validate(const SynthConfig& c, const Grammar& g) {
  if (c.num_videos == 0) throw ValidationError("synth: num_videos must be positive");
  if (c.frames_per_snippet == 0) throw ValidationError("synth: frames_per_snippet must be positive");
  if (c.snippets_per_video == 0) throw ValidationError("synth: snippets_per_video must be positive");
  if (c.snippets_per_video > c.limits.max_snippets) {
    throw ValidationError("synth: snippets_per_video " + std::to_string(c.snippets_per_video) +
                          " exceeds max_snippets " + std::to_string(c.limits.max_snippets));
  }
  if (c.frames_per_snippet * c.snippets_per_video > c.limits.max_frames) {
    throw ValidationError("synth: frames_per_snippet * snippets_per_video = " +
                          std::to_string(c.frames_per_snippet * c.snippets_per_video) + " exceeds max_frames " +
                          std::to_string(c.limits.max_frames));
  }
  if (c.feature_dim < g.actions.size() + g.objects.size()) {
    throw ValidationError("synth: feature_dim must be at least " + std::to_string(g.actions.size() + g.objects.size()));
  }
  if (c.occlusion_prob < 0 || c.occlusion_prob > 1 || c.object_persistence < 0 || c.object_persistence > 1) {
    throw ValidationError("synth: probabilities must lie in [0,1]");
  }
}

/// Scripted instruction videos. Every video opens with "walk to"; later
/// actions move forward through the action list (wrapping after the last),
/// so actions within a short video are distinct. Frames carry one-hot
/// action and object blocks plus Gaussian noise. Each snippet stores oracle
/// knowledge about the snippet that follows it: explicit = embedding of the
/// toy-KB inference string of the next caption, implicit = embedding of the
/// next caption. The last snippet stores zero vectors.
inline SynthResult synth_generate(const SynthConfig& cfg, const Grammar& grammar = default_grammar()) {
  validate(cfg, grammar);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t A = grammar.actions.size(), O = grammar.objects.size();
  const SentenceEmbedder embedder(cfg.embedder_seed);
  const auto kb = ExplicitProvider::toy(grammar);

  SynthResult res;
  res.grammar = grammar;
  res.vocab = build_vocab(grammar.all_sentences());
  auto& split = res.split;
  split.dataset = cfg.dataset;
  split.split = cfg.split;
  split.feature_dim = cfg.feature_dim;
  split.labels.actions = grammar.actions;
  split.labels.objects = grammar.objects;
  split.labels.pseudo = grammar.pseudo_classes;

  auto pick = [&](std::size_t n) { return std::min(n - 1, std::size_t(uniform01(rng) * double(n))); };

  for (std::size_t vi = 0; vi < cfg.num_videos; ++vi) {
    VideoRecord v;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%s_%04zu", cfg.split.c_str(), vi);
    v.id = idbuf;
    const std::size_t n = cfg.snippets_per_video, fps = cfg.frames_per_snippet;
    const std::size_t T = n * fps;
    v.features = Tensor<float>(T, cfg.feature_dim);

    std::vector<ParsedInstruction> script;
    std::size_t action = 0, object = pick(O);
    for (std::size_t s = 0; s < n; ++s) {
      if (s > 0) {
        if (action + 1 >= A) {
          action = 0;
        } else {
          const std::size_t hi = std::min(A - 1, action + grammar.max_jump);
          action = action + 1 + pick(hi - action);
        }
        if (uniform01(rng) >= cfg.object_persistence) object = pick(O);
      }
      script.push_back({action, object});
    }

    for (std::size_t s = 0; s < n; ++s) {
      const bool occluded = s > 0 && uniform01(rng) < cfg.occlusion_prob;
      for (std::size_t t = s * fps; t < (s + 1) * fps; ++t) {
        auto row = v.features.row_span(t);
        for (auto& x : row) x = float(cfg.noise_sigma * standard_normal(rng));
        row[script[s].action] += 1.0f;
        if (!occluded) row[A + script[s].object] += 1.0f;
      }
      SnippetAnnotation ann;
      ann.start_frame = s * fps;
      ann.end_frame = (s + 1) * fps;
      ann.caption = grammar.instantiate(script[s].action, script[s].object);
      ann.action_labels.assign(A, 0);
      ann.object_labels.assign(O, 0);
      ann.pseudo_labels.assign(grammar.pseudo_classes.size(), 0);
      ann.action_labels[script[s].action] = 1;
      ann.object_labels[script[s].object] = 1;
      ann.pseudo_labels[grammar.object_pseudo[script[s].object]] = 1;
      v.snippets.push_back(std::move(ann));
    }
    for (std::size_t s = 0; s < n; ++s) {
      auto& ann = v.snippets[s];
      if (s + 1 < n) {
        const std::string& next = v.snippets[s + 1].caption;
        ann.explicit_knowledge = embedder.embed(render_inference_string(kb.infer(next), kb.relations()));
        ann.implicit_knowledge = embedder.embed(next);
      } else {
        ann.explicit_knowledge.assign(kContextDim, 0.0f);
        ann.implicit_knowledge.assign(kContextDim, 0.0f);
      }
    }
    validate_video(v, split.labels, cfg.limits);
    split.videos.push_back(std::move(v));
  }
  return res;
}

}  // namespace vidcap
