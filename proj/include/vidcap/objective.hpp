#pragma once

// Training objective: per-snippet selector and action-object BCE, the
// label-smoothed sentence loss with an unlikelihood penalty on repeated
// tokens, their weighted sum, the warm-up schedule and the training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vidcap/autodiff.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/model.hpp"
#include "vidcap/optim.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

struct LossWeights {
  double snippet = 10.0;
  double actobj = 10.0;
  double sentence = 1.0;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double snippet_loss = 0.0;
  double actobj_loss = 0.0;
  double sentence_loss = 0.0;
  double total = 0.0;
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

inline LossBreakdown loss_total(double snippet, double actobj, double sentence, const LossWeights& w) {
  if (!std::isfinite(snippet) || !std::isfinite(actobj) || !std::isfinite(sentence)) {
    throw NumericError("loss_total: non-finite loss part");
  }
  return {snippet, actobj, sentence, w.snippet * snippet + w.actobj * actobj + w.sentence * sentence};
}

enum class MaskSource { Predicted, GroundTruth };

inline MaskSource parse_mask_source(const std::string& s) {
  if (s == "predicted") return MaskSource::Predicted;
  if (s == "gt") return MaskSource::GroundTruth;
  throw ValidationError("unknown mask source '" + s + "' (expected predicted|gt)");
}

inline std::string to_string(MaskSource m) { return m == MaskSource::Predicted ? "predicted" : "gt"; }

struct TrainConfig {
  LossWeights weights;
  std::size_t warmup_steps = 2000;
  double lr_scale = 1.0;
  std::size_t batch_size = 4;
  double label_smoothing = 0.1;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  /// Which mask pulls snippet features during training.
  MaskSource mask_source = MaskSource::Predicted;
  /// Feed a detached a_i to the encoder so f_a only learns from its own loss.
  bool detach_actobj = false;
  std::size_t checkpoint_every = 0;  ///< 0 = final checkpoint only
  std::size_t eval_every = 0;        ///< 0 = no periodic held-out evaluation

  void validate() const {
    if (weights.snippet < 0 || weights.actobj < 0 || weights.sentence < 0) {
      throw ValidationError("train.lambda values must be >= 0");
    }
    if (warmup_steps < 1) throw ValidationError("train.warmup_steps must be >= 1");
    if (!(lr_scale >= 0) || !std::isfinite(lr_scale)) throw ValidationError("train.lr_scale must be finite and >= 0");
    if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ValidationError("train.label_smoothing must lie in [0,1)");
    if (!(clip_norm > 0)) throw ValidationError("train.clip_norm must be positive");
  }
};

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double lr_schedule(std::uint64_t step, std::size_t warmup, std::size_t d_model) {
  if (step == 0) throw ValidationError("lr_schedule: step must be >= 1");
  if (warmup == 0) throw ValidationError("lr_schedule: warmup must be >= 1");
  const double s = double(step);
  return std::pow(double(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

// ---------------------------------------------------------------------------
// Loss ops

template <typename T>
typename Graph<T>::Var loss_snippet(Graph<T>& g, typename Graph<T>::Var n, std::span<const float> gt) {
  const auto& nv = g.value(n);
  if (nv.size() != gt.size()) {
    throw ShapeError("loss_snippet: " + std::to_string(nv.size()) + " predictions for " + std::to_string(gt.size()) +
                     " frames");
  }
  Tensor<T> target(nv.rows(), nv.cols());
  for (std::size_t i = 0; i < gt.size(); ++i) target[i] = T(gt[i]);
  return g.bce_mean(n, target);
}

template <typename T>
typename Graph<T>::Var loss_actobj(Graph<T>& g, typename Graph<T>::Var a, std::span<const float> gt) {
  return loss_snippet(g, a, gt);
}

/// Candidate set for the prediction of ids[j + 1]: distinct tokens among
/// ids[1..j] (the already emitted words; BOS excluded) minus the gold token.
inline std::vector<std::vector<int>> unlikelihood_candidates(std::span<const int> ids) {
  std::vector<std::vector<int>> out;
  std::set<int> seen;
  for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
    if (j >= 1) seen.insert(ids[j]);
    std::vector<int> c;
    for (int t : seen)
      if (t != ids[j + 1]) c.push_back(t);
    out.push_back(std::move(c));
  }
  return out;
}

/// Label-smoothed NLL averaged over the J predicted positions, plus the
/// unlikelihood penalty sum over positions of -log(1 - p(c)).
/// `probs` row j is the distribution for ids[j + 1].
template <typename T>
typename Graph<T>::Var loss_sentence(Graph<T>& g, typename Graph<T>::Var probs, std::span<const int> ids, T eps) {
  if (ids.size() < 2) throw ValidationError("loss_sentence: need BOS and at least one target");
  std::vector<int> targets(ids.begin() + 1, ids.end());
  auto nll = g.smoothed_nll(probs, targets, eps);
  auto ul = g.unlikelihood(probs, unlikelihood_candidates(ids));
  return g.add(nll, ul);
}

// ---------------------------------------------------------------------------
// Prepared training data

struct PreparedSnippet {
  std::vector<float> context;  ///< (m | g | h), teacher-forced from the GT previous caption
  std::vector<float> gt_mask;
  std::vector<float> actobj_target;
  std::vector<int> tokens;  ///< BOS caption EOS
};

struct PreparedVideo {
  std::string id;
  Tensor<float> features;
  std::vector<PreparedSnippet> snippets;
};

inline PreparedVideo prepare_video(const VideoRecord& v, const ProviderSet& providers, const Vocabulary& vocab) {
  PreparedVideo out;
  out.id = v.id;
  out.features = v.features;
  for (std::size_t i = 0; i < v.snippets.size(); ++i) {
    PreparedSnippet s;
    std::optional<std::string> prev;
    StoredKnowledge stored;
    if (i > 0) {
      prev = v.snippets[i - 1].caption;
      stored = {&v.snippets[i - 1].explicit_knowledge, &v.snippets[i - 1].implicit_knowledge};
    }
    KnowledgeContext ctx;
    try {
      ctx = context_for_step(prev, providers, stored);
    } catch (const ValidationError& e) {
      throw ValidationError("video '" + v.id + "' snippet " + std::to_string(i) + ": " + e.what());
    }
    const auto row = context_row<float>(ctx);
    s.context.assign(row.values().begin(), row.values().end());
    s.gt_mask = v.gt_mask(i);
    const auto target = v.snippets[i].actobj_target();
    s.actobj_target.assign(target.begin(), target.end());
    s.tokens = tokenize(v.snippets[i].caption, vocab);
    out.snippets.push_back(std::move(s));
  }
  return out;
}

inline std::vector<PreparedVideo> prepare_split(const DatasetSplit& split, const ProviderSet& providers,
                                                const Vocabulary& vocab) {
  std::vector<PreparedVideo> out;
  for (const auto& v : split.videos) out.push_back(prepare_video(v, providers, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Forward + loss for a batch

template <typename T>
struct BatchLoss {
  typename Graph<T>::Var total;  ///< mean over snippets of the weighted per-snippet loss
  LossBreakdown parts;           ///< means over snippets
  std::size_t snippets = 0;
};

/// Teacher-forced loss of one snippet. The decoder runs one step per target
/// token; the memory starts as the encoder output and is updated after
/// every step.
template <typename T>
std::array<typename Graph<T>::Var, 3> snippet_loss(Forward<T>& f, typename Graph<T>::Var V, const PreparedSnippet& s,
                                                    const TrainConfig& tc) {
  auto& g = f.g;
  using Var = typename Graph<T>::Var;
  const std::size_t Tn = g.value(V).rows();
  Tensor<T> ctx_t(1, s.context.size());
  for (std::size_t i = 0; i < s.context.size(); ++i) ctx_t[i] = T(s.context[i]);
  Var ctx = g.constant(std::move(ctx_t));

  Var n = f.snippet_selector(V, ctx);
  Var mask = n;
  if (tc.mask_source == MaskSource::GroundTruth) {
    Tensor<T> m(Tn, 1);
    for (std::size_t t = 0; t < Tn; ++t) m[t] = T(s.gt_mask.at(t));
    mask = g.constant(std::move(m));
  }
  Var Vi = f.apply_snippet_mask(V, mask);
  Var a = f.action_object(Vi, ctx);
  Var e = f.encoder(Vi, tc.detach_actobj ? g.detach(a) : a, ctx);

  const std::span<const int> ids(s.tokens);
  std::vector<Var> rows;
  Var M = e;
  for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
    const auto prefix = ids.subspan(0, j + 1);
    if (j + 2 == ids.size()) {
      auto out = f.decoder(prefix, M);
      rows.push_back(g.slice_rows(out.probs, j, j + 1));
    } else {
      auto step = f.decoder_step(prefix, M);
      rows.push_back(step.probs);
      M = step.memory;
    }
  }
  Var probs = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
  return {loss_snippet(g, n, s.gt_mask), loss_actobj(g, a, s.actobj_target),
          loss_sentence(g, probs, ids, T(tc.label_smoothing))};
}

template <typename T>
BatchLoss<T> batch_loss(Graph<T>& g, ModelParams<T>& params, std::span<const PreparedVideo* const> videos,
                        const TrainConfig& tc, std::mt19937_64* dropout_rng) {
  using Var = typename Graph<T>::Var;
  Forward<T> f{g, params, dropout_rng};
  std::vector<Var> weighted;
  double ssum = 0, asum = 0, tsum = 0;
  for (const auto* v : videos) {
    if (v->snippets.size() > params.config.max_snippets) {
      throw ValidationError("video '" + v->id + "' has more snippets than model.max_snippets");
    }
    Var V = g.constant(v->features.template cast<T>());
    for (const auto& s : v->snippets) {
      auto [ls, la, lt] = snippet_loss(f, V, s, tc);
      ssum += double(g.value(ls)[0]);
      asum += double(g.value(la)[0]);
      tsum += double(g.value(lt)[0]);
      Var w = g.add(g.add(g.scale(ls, T(tc.weights.snippet)), g.scale(la, T(tc.weights.actobj))),
                    g.scale(lt, T(tc.weights.sentence)));
      weighted.push_back(w);
    }
  }
  if (weighted.empty()) throw ValidationError("batch has no snippets");
  const double k = double(weighted.size());
  Var total = weighted.size() == 1 ? weighted[0] : g.sum(g.concat_rows(weighted));
  total = g.scale(total, T(1.0 / k));
  BatchLoss<T> out{total, loss_total(ssum / k, asum / k, tsum / k, tc.weights), weighted.size()};
  out.parts.total = double(g.value(total)[0]);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepResult {
  std::uint64_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;
  std::size_t clamped = 0;  ///< saturated unlikelihood entries
};

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_state_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw ValidationError("malformed RNG state");
  return rng;
}

/// Owns the float parameters, optimizer state and dropout stream. Batches
/// are a pure function of (seed, step): sample k of step s is position
/// (s * B + k) mod N of the epoch permutation drawn from (seed, epoch).
class Trainer {
 public:
  Trainer(ModelParams<float> params, TrainConfig cfg, std::vector<PreparedVideo> data)
      : params_(std::move(params)), cfg_(std::move(cfg)), data_(std::move(data)), dropout_rng_(cfg_.seed ^ 0xD5011ull) {
    cfg_.validate();
    if (data_.empty()) throw ValidationError("training set is empty");
    for (const auto& v : data_) {
      if (v.features.cols() != params_.config.feature_dim) {
        throw ValidationError("video '" + v.id + "' has feature_dim " + std::to_string(v.features.cols()) +
                              " but model.feature_dim is " + std::to_string(params_.config.feature_dim));
      }
      for (const auto& s : v.snippets) {
        if (s.actobj_target.size() != params_.config.actobj_dim) {
          throw ValidationError("video '" + v.id + "' has action-object width " +
                                std::to_string(s.actobj_target.size()) + " but model.actobj_dim is " +
                                std::to_string(params_.config.actobj_dim));
        }
        if (s.context.size() != params_.config.context_width()) {
          throw ValidationError("knowledge width does not match model.context_dim");
        }
        for (int id : s.tokens)
          if (id >= int(params_.config.vocab_size)) throw ValidationError("token id outside model.vocab_size");
      }
    }
  }

  std::vector<std::size_t> batch_indices(std::uint64_t step) const {
    const std::size_t N = data_.size();
    std::vector<std::size_t> out;
    std::uint64_t cached_epoch = ~0ull;
    std::vector<std::size_t> perm;
    for (std::size_t k = 0; k < cfg_.batch_size; ++k) {
      const std::uint64_t idx = step * cfg_.batch_size + k;
      const std::uint64_t epoch = idx / N;
      if (epoch != cached_epoch) {
        perm = epoch_permutation(epoch);
        cached_epoch = epoch;
      }
      out.push_back(perm[idx % N]);
    }
    return out;
  }

  /// One optimizer step on the next batch. A non-finite loss or gradient
  /// aborts the step with parameters and optimizer state untouched.
  StepResult step() {
    const std::uint64_t s = steps_ + 1;
    auto all = params_.all();
    const std::span<Parameter<float>* const> ps(all);
    zero_grads(ps);
    const auto idx = batch_indices(steps_);
    std::vector<const PreparedVideo*> batch;
    for (auto i : idx) batch.push_back(&data_[i]);

    StepResult r;
    r.step = s;
    r.lr = cfg_.lr_scale * lr_schedule(s, cfg_.warmup_steps, params_.config.d_model);
    const std::string saved_rng = rng_state_string(dropout_rng_);
    try {
      Graph<float> g;
      auto loss = batch_loss<float>(g, params_, batch, cfg_, &dropout_rng_);
      g.backward(loss.total);
      r.loss = loss.parts;
      r.clamped = g.clamped_count();
      r.grad_norm = clip_grad_norm(ps, cfg_.clip_norm);
      if (!std::isfinite(r.grad_norm)) throw NumericError("non-finite gradient norm");
      adam_step(ps, adam_, r.lr);
    } catch (const NumericError& e) {
      zero_grads(ps);
      dropout_rng_ = rng_from_state_string(saved_rng);
      throw NumericError("training step " + std::to_string(s) + " aborted: " + e.what());
    }
    steps_ = s;
    return r;
  }

  std::uint64_t steps_done() const { return steps_; }
  ModelParams<float>& params() { return params_; }
  const TrainConfig& config() const { return cfg_; }
  AdamState<float>& adam() { return adam_; }
  std::mt19937_64& dropout_rng() { return dropout_rng_; }
  const std::vector<PreparedVideo>& data() const { return data_; }

  /// Restores progress saved by a checkpoint.
  void restore(std::uint64_t steps, AdamState<float> adam, const std::string& rng_state) {
    steps_ = steps;
    adam_ = std::move(adam);
    dropout_rng_ = rng_from_state_string(rng_state);
  }

 private:
  std::vector<std::size_t> epoch_permutation(std::uint64_t epoch) const {
    std::vector<std::size_t> perm(data_.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ull + epoch);
    // Fisher-Yates with the portable uniform draw
    for (std::size_t i = perm.size(); i > 1; --i) {
      const std::size_t j = std::min(i - 1, std::size_t(uniform01(rng) * double(i)));
      std::swap(perm[i - 1], perm[j]);
    }
    return perm;
  }

  ModelParams<float> params_;
  TrainConfig cfg_;
  std::vector<PreparedVideo> data_;
  AdamState<float> adam_;
  std::mt19937_64 dropout_rng_;
  std::uint64_t steps_ = 0;
};

}  // namespace vidcap
