#pragma once

// Small fixed setups shared by the CLI, tests and the acceptance suite.

#include <cstdint>
#include <string>
#include <vector>

#include "vidcap/config.hpp"
#include "vidcap/gradcheck.hpp"
#include "vidcap/grammar.hpp"
#include "vidcap/model.hpp"
#include "vidcap/objective.hpp"
#include "vidcap/synth.hpp"

namespace vidcap {

/// 16 terminal words, so its vocabulary has 20 entries.
inline Grammar gradcheck_grammar() {
  Grammar g;
  g.actions = {"walk to", "open", "pick up", "slice", "wash", "put down"};
  g.objects = {"mug", "apple", "bowl", "rag", "knife", "tomato"};
  g.pseudo_classes = {"container", "food", "tool"};
  g.object_pseudo = {0, 1, 0, 2, 2, 1};
  g.canonical_next = {2, 2, 4, 5, 5, 0};
  return g;
}

struct GradcheckSetup {
  ModelConfig model;
  TrainConfig train;
  std::vector<PreparedVideo> data;
  std::uint64_t init_seed = 11;
};

/// One 8-frame video with two snippets, toy providers (so every context
/// block is non-zero), d_model 16, 2 heads, one encoder and one decoder
/// layer, vocabulary 20, dropout off.
inline GradcheckSetup gradcheck_setup(std::uint64_t seed = 3) {
  const Grammar grammar = gradcheck_grammar();
  SynthConfig sc;
  sc.seed = seed;
  sc.num_videos = 1;
  sc.snippets_per_video = 2;
  sc.frames_per_snippet = 4;
  sc.feature_dim = 12;
  const auto res = synth_generate(sc, grammar);
  ProviderConfig pc;
  pc.explicit_kind = "toy";
  pc.implicit_kind = "toy";
  GradcheckSetup s;
  s.data = prepare_split(res.split, build_providers(pc, grammar), res.vocab);
  s.model.feature_dim = sc.feature_dim;
  s.model.d_model = 16;
  s.model.heads = 2;
  s.model.enc_layers = 1;
  s.model.dec_layers = 1;
  s.model.ffn_dim = 32;
  s.model.vocab_size = res.vocab.size();
  s.model.actobj_dim = res.split.labels.width();
  s.model.dropout = 0.0;
  return s;
}

struct ModelGradCheck {
  GradCheckReport report;
  std::vector<std::string> unused_blocks;  ///< blocks the loss never reads
  bool passed() const { return report.passed && unused_blocks.empty(); }
};

/// Finite-difference check of the full teacher-forced loss (all three
/// terms) in double precision over every parameter block.
inline ModelGradCheck run_model_gradcheck(const GradcheckSetup& s, double rel_tol, GradCheckOptions opts = {}) {
  if (s.model.dropout != 0.0) throw ValidationError("gradcheck requires model.dropout = 0");
  auto params = init_model_params<double>(s.model, s.init_seed);
  std::vector<const PreparedVideo*> videos;
  for (const auto& v : s.data) videos.push_back(&v);
  LossClosure closure = [&](Graph<double>& g) {
    return batch_loss<double>(g, params, videos, s.train, nullptr).total;
  };
  auto all = params.all();
  ModelGradCheck out;
  out.report = grad_check(closure, all, rel_tol, opts);
  Graph<double> g(false);
  closure(g);
  for (const auto* p : all)
    if (!g.reads(*p)) out.unused_blocks.push_back(p->name);
  return out;
}

/// d_model 64, 4 heads, 2 encoder and 2 decoder layers. Dataset-dependent
/// sizes are left at 0 so resolve_model_config fills them in.
inline ModelConfig small_model() {
  ModelConfig m;
  m.feature_dim = 0;
  m.actobj_dim = 0;
  m.d_model = 64;
  m.heads = 4;
  m.enc_layers = 2;
  m.dec_layers = 2;
  return m;
}

/// 8 synthetic videos of 3 snippets (seed 7), null providers, 2000 steps of
/// batch 4 with the default loss weights and label smoothing.
inline RunConfig overfit_preset() {
  RunConfig c;
  c.seed = 1;
  c.model = small_model();
  c.train.max_steps = 2000;
  c.train.seed = 7;
  c.synth.seed = 7;
  c.synth.num_videos = 8;
  c.output_dir = "runs/overfit";
  return c;
}

/// 64 training videos from synth seed `seed`; the same seed initialises the
/// model and orders the batches. `knowledge` names both provider kinds.
inline RunConfig ablation_preset(std::uint64_t seed, const std::string& knowledge) {
  RunConfig c;
  c.seed = seed;
  c.model = small_model();
  c.train.max_steps = 2000;
  c.train.seed = seed;
  c.providers.explicit_kind = knowledge;
  c.providers.implicit_kind = knowledge;
  c.synth.seed = seed;
  c.synth.num_videos = 64;
  c.output_dir = "runs/ablation_" + knowledge + "_" + std::to_string(seed);
  return c;
}

/// Held-out companion of a training synth config: 32 videos, disjoint seed.
inline SynthConfig heldout_synth(const SynthConfig& train) {
  SynthConfig v = train;
  v.seed = train.seed + 1000;
  v.num_videos = 32;
  v.split = "val";
  return v;
}

}  // namespace vidcap
