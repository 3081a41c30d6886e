#pragma once

// Greedy multi-sentence inference and the generation document.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "vidcap/config.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/model.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

enum class StopReason { GtCount, MaxSnippets, LowConfidence };

inline std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::GtCount: return "gt_count";
    case StopReason::MaxSnippets: return "max_snippets";
    case StopReason::LowConfidence: return "low_confidence";
  }
  return "?";
}

struct GenerationOutput {
  std::string id;
  std::size_t num_frames = 0;
  GenerationMode mode = GenerationMode::GtProposals;
  std::vector<std::vector<int>> sentences;    ///< without BOS and EOS
  std::vector<std::string> captions;          ///< detokenized sentences
  std::vector<std::vector<float>> masks;      ///< selector output per step, length T
  std::vector<std::vector<float>> actobj;     ///< predictor output per step
  std::vector<KnowledgeContext> contexts;     ///< conditioning used at each step
  StopReason stop = StopReason::GtCount;

  std::size_t size() const { return sentences.size(); }
};

/// Greedy decoding from BOS against encoder output E. Ties go to the lowest
/// token id. At most model.max_sentence_len tokens.
inline std::vector<int> generate_sentence(Forward<float>& f, Graph<float>::Var E) {
  std::vector<int> prefix{Vocabulary::kBos};
  auto M = E;
  while (prefix.size() <= f.p.config.max_sentence_len) {
    auto step = f.decoder_step(prefix, M);
    const auto& probs = f.g.value(step.probs).values();
    const int next = int(std::max_element(probs.begin(), probs.end()) - probs.begin());
    if (next == Vocabulary::kEos) break;
    prefix.push_back(next);
    M = step.memory;
  }
  return {prefix.begin() + 1, prefix.end()};
}

/// Paragraph for one video. In gt_proposals mode the video's annotated
/// segments replace the selector output when pulling features (the selector
/// output is still recorded); otherwise generation stops once no frame
/// reaches stop_threshold. Stored knowledge vectors (for the `vectors`
/// provider kind) come from the video's annotation of step i-1, or are zero
/// when the video has no such snippet.
inline GenerationOutput generate_paragraph(const VideoRecord& video, ModelParams<float>& params,
                                           const ProviderSet& providers, const Vocabulary& vocab,
                                           const GenerationConfig& gc) {
  gc.validate();
  if (vocab.size() != params.config.vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) + " entries, model.vocab_size is " +
                          std::to_string(params.config.vocab_size));
  }
  GenerationOutput out;
  out.id = video.id;
  out.num_frames = video.num_frames();
  out.mode = gc.mode;
  const std::size_t cap = std::min(gc.max_snippets, params.config.max_snippets);
  const bool gt = gc.mode == GenerationMode::GtProposals;
  if (gt && video.snippets.size() > cap) {
    throw ValidationError("video '" + video.id + "' has " + std::to_string(video.snippets.size()) +
                          " snippets, more than the cap of " + std::to_string(cap));
  }
  const std::vector<float> zeros(kContextDim, 0.0f);
  const Tensor<float> V_value = video.features;

  for (std::size_t i = 0;; ++i) {
    if (gt && i == video.snippets.size()) {
      out.stop = StopReason::GtCount;
      break;
    }
    if (i == cap) {
      out.stop = StopReason::MaxSnippets;
      break;
    }
    std::optional<std::string> prev;
    StoredKnowledge stored;
    if (i > 0) {
      prev = out.captions.back();
      stored = {&zeros, &zeros};
      if (i - 1 < video.snippets.size()) {
        const auto& prior = video.snippets[i - 1];
        if (!prior.explicit_knowledge.empty()) stored.explicit_vec = &prior.explicit_knowledge;
        if (!prior.implicit_knowledge.empty()) stored.implicit_vec = &prior.implicit_knowledge;
      }
    }
    KnowledgeContext ctx;
    try {
      ctx = context_for_step(prev, providers, stored);
    } catch (const Error& e) {
      throw ValidationError("video '" + video.id + "' step " + std::to_string(i) + ": " + e.what());
    }

    Graph<float> g(false);
    Forward<float> f{g, params, nullptr};
    auto V = g.constant(V_value);
    auto c = g.constant(context_row<float>(ctx));
    auto n = f.snippet_selector(V, c);
    const auto& nv = g.value(n).values();
    std::vector<float> mask(nv.begin(), nv.end());
    if (!gt && (mask.empty() || *std::max_element(mask.begin(), mask.end()) < float(gc.stop_threshold))) {
      out.stop = StopReason::LowConfidence;
      break;
    }
    auto pull = n;
    if (gt) {
      const auto m = video.gt_mask(i);
      pull = g.constant(Tensor<float>(m.size(), 1, std::vector<float>(m.begin(), m.end())));
    }
    auto Vi = f.apply_snippet_mask(V, pull);
    auto a = f.action_object(Vi, c);
    const auto& av = g.value(a).values();
    std::vector<float> actobj(av.begin(), av.end());
    auto E = f.encoder(Vi, a, c);
    auto sentence = generate_sentence(f, E);

    out.captions.push_back(detokenize(sentence, vocab));
    out.sentences.push_back(std::move(sentence));
    out.masks.push_back(std::move(mask));
    out.actobj.push_back(std::move(actobj));
    out.contexts.push_back(std::move(ctx));
  }
  return out;
}

// ---- thresholded views -------------------------------------------------------

/// Frames with probability >= threshold map to 1.
inline std::vector<std::uint8_t> threshold_mask(const std::vector<float>& probs, double threshold = 0.5) {
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

/// [first, last + 1) of the frames at or above threshold; nullopt if none.
inline std::optional<std::pair<std::size_t, std::size_t>> predicted_range(const std::vector<float>& probs,
                                                                          double threshold = 0.5) {
  std::optional<std::pair<std::size_t, std::size_t>> r;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (probs[t] < threshold) continue;
    if (!r) r = std::pair{t, t + 1};
    r->second = t + 1;
  }
  return r;
}

/// Indices of the k largest entries, ties to the lower index.
inline std::vector<std::size_t> top_k_indices(const std::vector<float>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, v.size());
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  return idx;
}

// ---- generation document -----------------------------------------------------

/// One entry per video:
///   {id, num_frames, mode, stop, snippets: [{frames: [b, e] | null, caption,
///    top_labels, mask, actobj}]}
inline json generation_to_json(const std::vector<GenerationOutput>& outs, const LabelSpace& labels,
                               std::size_t top_k) {
  json videos = json::array();
  for (const auto& o : outs) {
    json snippets = json::array();
    for (std::size_t i = 0; i < o.size(); ++i) {
      json s;
      const auto r = predicted_range(o.masks[i]);
      s["frames"] = r ? json::array({r->first, r->second}) : json(nullptr);
      s["caption"] = o.captions[i];
      json names = json::array();
      if (labels.width() == o.actobj[i].size())
        for (auto k : top_k_indices(o.actobj[i], top_k)) names.push_back(labels.name(k));
      s["top_labels"] = names;
      s["mask"] = o.masks[i];
      s["actobj"] = o.actobj[i];
      snippets.push_back(std::move(s));
    }
    videos.push_back({{"id", o.id},
                      {"num_frames", o.num_frames},
                      {"mode", to_string(o.mode)},
                      {"stop", to_string(o.stop)},
                      {"snippets", std::move(snippets)}});
  }
  return {{"format", 1}, {"videos", std::move(videos)}};
}

/// What metrics needs back from a generation document.
struct GeneratedSnippet {
  std::string caption;
  std::vector<float> mask;
  std::vector<float> actobj;
};

struct GeneratedVideo {
  std::string id;
  GenerationMode mode = GenerationMode::GtProposals;
  std::vector<GeneratedSnippet> snippets;
};

inline std::vector<GeneratedVideo> generation_from_json(const json& j, const std::string& source = "generation") {
  std::vector<GeneratedVideo> out;
  try {
    if (j.at("format").get<int>() != 1) throw ValidationError(source + ": unsupported format");
    for (const auto& jv : j.at("videos")) {
      GeneratedVideo v;
      v.id = jv.at("id").get<std::string>();
      v.mode = parse_generation_mode(jv.at("mode").get<std::string>());
      for (const auto& js : jv.at("snippets")) {
        GeneratedSnippet s;
        s.caption = js.at("caption").get<std::string>();
        s.mask = js.at("mask").get<std::vector<float>>();
        s.actobj = js.at("actobj").get<std::vector<float>>();
        v.snippets.push_back(std::move(s));
      }
      out.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return out;
}

inline std::vector<GeneratedVideo> to_generated(const std::vector<GenerationOutput>& outs) {
  std::vector<GeneratedVideo> v;
  for (const auto& o : outs) {
    GeneratedVideo gv{o.id, o.mode, {}};
    for (std::size_t i = 0; i < o.size(); ++i) gv.snippets.push_back({o.captions[i], o.masks[i], o.actobj[i]});
    v.push_back(std::move(gv));
  }
  return v;
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace vidcap
