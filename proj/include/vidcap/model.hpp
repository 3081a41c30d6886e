#pragma once

// Forward computations: snippet selector, snippet mask, action-object head,
// transformer encoder, gated snippet memory and the memory-conditioned
// transformer decoder. All functions build onto a caller-owned Graph so the
// same code serves training (float), gradient checks (double) and inference.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vidcap/autodiff.hpp"
#include "vidcap/error.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/tensor.hpp"

namespace vidcap {

struct ModelConfig {
  std::size_t feature_dim = 4096;
  std::size_t context_dim = kContextDim;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t enc_layers = 3;
  std::size_t dec_layers = 3;
  std::size_t ffn_dim = 0;  ///< 0 means 4 * d_model
  std::size_t vocab_size = 0;
  std::size_t actobj_dim = 677;
  std::size_t max_frames = 150;
  std::size_t max_snippets = 20;
  std::size_t max_sentence_len = 150;
  std::size_t token_stride = 1;
  std::size_t memory_slots = 0;  ///< 0 means one slot per encoded token
  double dropout = 0.1;

  std::size_t ffn() const { return ffn_dim == 0 ? 4 * d_model : ffn_dim; }
  std::size_t context_width() const { return 3 * context_dim; }
  std::size_t encoded_tokens(std::size_t frames) const { return (frames + token_stride - 1) / token_stride + 1; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ValidationError(std::string("model.") + name + " must be positive");
    };
    positive(feature_dim, "feature_dim");
    positive(context_dim, "context_dim");
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(enc_layers, "enc_layers");
    positive(dec_layers, "dec_layers");
    positive(vocab_size, "vocab_size");
    positive(actobj_dim, "actobj_dim");
    positive(max_frames, "max_frames");
    positive(max_snippets, "max_snippets");
    positive(max_sentence_len, "max_sentence_len");
    positive(token_stride, "token_stride");
    if (d_model % heads != 0) {
      throw ValidationError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                            std::to_string(heads) + ")");
    }
    if (vocab_size < 5) throw ValidationError("model.vocab_size must cover the 4 reserved tokens plus one word");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model.dropout must lie in [0,1)");
  }
};

template <typename T>
struct Linear {
  Parameter<T> w;  ///< in x out
  Parameter<T> b;  ///< 1 x out
};

template <typename T>
struct LayerNormParams {
  Parameter<T> gain;
  Parameter<T> bias;
};

template <typename T>
struct AttentionParams {
  Linear<T> q, k, v, o;
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> ln_attn, ln_ffn;
  AttentionParams<T> attn;
  Linear<T> ffn_in, ffn_out;
};

template <typename T>
struct DecoderLayerParams {
  LayerNormParams<T> ln_self, ln_cross, ln_ffn;
  AttentionParams<T> self_attn, cross_attn;
  Linear<T> ffn_in, ffn_out;
};

template <typename T>
struct MemoryParams {
  Linear<T> query, erase, add;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<Linear<T>> selector;  ///< 3 layers, scalar output
  std::vector<Linear<T>> actobj;    ///< 3 layers, actobj_dim output
  Linear<T> frame_proj;
  Linear<T> context_proj;
  std::vector<EncoderLayerParams<T>> encoder;
  MemoryParams<T> memory;
  Parameter<T> token_embedding;  ///< vocab x d
  std::vector<DecoderLayerParams<T>> decoder;
  LayerNormParams<T> final_ln;
  Linear<T> output;

  /// Every parameter in a fixed order (the checkpoint order).
  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    auto lin = [&](Linear<T>& l) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    };
    auto ln = [&](LayerNormParams<T>& l) {
      out.push_back(&l.gain);
      out.push_back(&l.bias);
    };
    auto att = [&](AttentionParams<T>& a) {
      lin(a.q);
      lin(a.k);
      lin(a.v);
      lin(a.o);
    };
    for (auto& l : selector) lin(l);
    for (auto& l : actobj) lin(l);
    lin(frame_proj);
    lin(context_proj);
    for (auto& e : encoder) {
      ln(e.ln_attn);
      att(e.attn);
      ln(e.ln_ffn);
      lin(e.ffn_in);
      lin(e.ffn_out);
    }
    lin(memory.query);
    lin(memory.erase);
    lin(memory.add);
    out.push_back(&token_embedding);
    for (auto& d : decoder) {
      ln(d.ln_self);
      att(d.self_attn);
      ln(d.ln_cross);
      att(d.cross_attn);
      ln(d.ln_ffn);
      lin(d.ffn_in);
      lin(d.ffn_out);
    }
    ln(final_ln);
    lin(output);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : all()) n += p->value.size();
    return n;
  }
};

namespace detail {

template <typename T>
Linear<T> make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  // Xavier-uniform weights drawn in double so float and double models agree.
  const double limit = std::sqrt(6.0 / double(in + out));
  std::vector<T> w(in * out);
  for (auto& v : w) v = T((2.0 * uniform01(rng) - 1.0) * limit);
  return {Parameter<T>(name + ".w", Tensor<T>(in, out, std::move(w))), Parameter<T>(name + ".b", Tensor<T>(1, out))};
}

template <typename T>
LayerNormParams<T> make_ln(const std::string& name, std::size_t d) {
  return {Parameter<T>(name + ".gain", Tensor<T>(1, d, T{1})), Parameter<T>(name + ".bias", Tensor<T>(1, d))};
}

template <typename T>
AttentionParams<T> make_attention(const std::string& name, std::size_t d, std::mt19937_64& rng) {
  AttentionParams<T> a;
  a.q = make_linear<T>(name + ".q", d, d, rng);
  a.k = make_linear<T>(name + ".k", d, d, rng);
  a.v = make_linear<T>(name + ".v", d, d, rng);
  a.o = make_linear<T>(name + ".o", d, d, rng);
  return a;
}

}  // namespace detail

template <typename T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  using detail::make_linear;
  const std::size_t d = cfg.d_model, C = cfg.context_width(), D = cfg.feature_dim;
  ModelParams<T> p;
  p.config = cfg;
  p.selector.push_back(make_linear<T>("selector.0", D + C, d, rng));
  p.selector.push_back(make_linear<T>("selector.1", d, d, rng));
  p.selector.push_back(make_linear<T>("selector.2", d, 1, rng));
  p.actobj.push_back(make_linear<T>("actobj.0", D + C, d, rng));
  p.actobj.push_back(make_linear<T>("actobj.1", d, d, rng));
  p.actobj.push_back(make_linear<T>("actobj.2", d, cfg.actobj_dim, rng));
  p.frame_proj = make_linear<T>("frame_proj", D, d, rng);
  p.context_proj = make_linear<T>("context_proj", cfg.actobj_dim + C, d, rng);
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
    const std::string n = "enc." + std::to_string(l);
    EncoderLayerParams<T> e;
    e.ln_attn = detail::make_ln<T>(n + ".ln_attn", d);
    e.attn = detail::make_attention<T>(n + ".attn", d, rng);
    e.ln_ffn = detail::make_ln<T>(n + ".ln_ffn", d);
    e.ffn_in = make_linear<T>(n + ".ffn_in", d, cfg.ffn(), rng);
    e.ffn_out = make_linear<T>(n + ".ffn_out", cfg.ffn(), d, rng);
    p.encoder.push_back(std::move(e));
  }
  p.memory.query = make_linear<T>("memory.query", d, d, rng);
  p.memory.erase = make_linear<T>("memory.erase", d, d, rng);
  p.memory.add = make_linear<T>("memory.add", d, d, rng);
  {
    auto emb = make_linear<T>("token_embedding", cfg.vocab_size, d, rng);
    p.token_embedding = std::move(emb.w);
    p.token_embedding.name = "token_embedding";
  }
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    const std::string n = "dec." + std::to_string(l);
    DecoderLayerParams<T> e;
    e.ln_self = detail::make_ln<T>(n + ".ln_self", d);
    e.self_attn = detail::make_attention<T>(n + ".self_attn", d, rng);
    e.ln_cross = detail::make_ln<T>(n + ".ln_cross", d);
    e.cross_attn = detail::make_attention<T>(n + ".cross_attn", d, rng);
    e.ln_ffn = detail::make_ln<T>(n + ".ln_ffn", d);
    e.ffn_in = make_linear<T>(n + ".ffn_in", d, cfg.ffn(), rng);
    e.ffn_out = make_linear<T>(n + ".ffn_out", cfg.ffn(), d, rng);
    p.decoder.push_back(std::move(e));
  }
  p.final_ln = detail::make_ln<T>("final_ln", d);
  p.output = make_linear<T>("output", d, cfg.vocab_size, rng);
  return p;
}

/// Same weights in another scalar type.
template <typename U, typename T>
ModelParams<U> cast_params(ModelParams<T>& src) {
  ModelParams<U> out = init_model_params<U>(src.config, 0);
  auto from = src.all();
  auto to = out.all();
  for (std::size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value.template cast<U>();
  return out;
}

/// Fixed sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd cos.
template <typename T>
Tensor<T> positional_encoding(std::size_t len, std::size_t d) {
  Tensor<T> pe(len, d);
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double angle = double(pos) / std::pow(10000.0, double(2 * (i / 2)) / double(d));
      pe(pos, i) = T(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

/// Row vector (m | g | h) of width 3 * context_dim.
template <typename T>
Tensor<T> context_row(const KnowledgeContext& ctx) {
  std::vector<T> row;
  row.reserve(ctx.m.size() + ctx.g.size() + ctx.h.size());
  for (const auto* v : {&ctx.m, &ctx.g, &ctx.h})
    for (float x : *v) row.push_back(T(x));
  return Tensor<T>::row(std::move(row));
}

/// Graph plus the dropout source for one forward pass. A null rng or a
/// zero rate disables dropout.
template <typename T>
struct Forward {
  Graph<T>& g;
  ModelParams<T>& p;
  std::mt19937_64* rng = nullptr;

  using Var = typename Graph<T>::Var;

  Var linear(Linear<T>& l, Var x) { return g.add(g.matmul(x, g.param(l.w)), g.param(l.b)); }
  Var norm(LayerNormParams<T>& l, Var x) { return g.layer_norm(x, g.param(l.gain), g.param(l.bias)); }
  Var drop(Var x) {
    if (rng == nullptr || p.config.dropout <= 0.0) return x;
    return g.dropout(x, T(p.config.dropout), *rng);
  }

  /// Three layers, tanh between, sigmoid on the output.
  Var mlp3(std::vector<Linear<T>>& layers, Var x) {
    Var h = g.tanh(linear(layers[0], x));
    h = g.tanh(linear(layers[1], h));
    return g.sigmoid(linear(layers[2], h));
  }

  Var attention(AttentionParams<T>& a, Var query_in, Var kv_in, bool causal) {
    const std::size_t d = p.config.d_model, H = p.config.heads, dk = d / H;
    Var Q = linear(a.q, query_in);
    Var K = linear(a.k, kv_in);
    Var Vv = linear(a.v, kv_in);
    const std::size_t n = g.value(Q).rows(), m = g.value(K).rows();
    std::optional<Var> mask;
    if (causal) {
      Tensor<T> mk(n, m);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < m; ++j) mk(i, j) = T(-1e9);
      mask = g.constant(std::move(mk));
    }
    std::vector<Var> heads;
    for (std::size_t h = 0; h < H; ++h) {
      Var qh = g.slice_cols(Q, h * dk, (h + 1) * dk);
      Var kh = g.slice_cols(K, h * dk, (h + 1) * dk);
      Var vh = g.slice_cols(Vv, h * dk, (h + 1) * dk);
      Var s = g.scale(g.matmul_nt(qh, kh), T(1.0 / std::sqrt(double(dk))));
      if (mask) s = g.add(s, *mask);
      heads.push_back(g.matmul(g.softmax_rows(s), vh));
    }
    Var cat = H == 1 ? heads[0] : g.concat_cols(heads);
    return linear(a.o, cat);
  }

  Var ffn(Linear<T>& in, Linear<T>& out, Var x) { return linear(out, g.tanh(linear(in, x))); }

  // ---- public forward ops ---------------------------------------------------

  /// Per-frame snippet membership probabilities, T x 1.
  Var snippet_selector(Var V, Var ctx) {
    check_features(V);
    check_context(ctx);
    const std::size_t T_ = g.value(V).rows();
    return mlp3(p.selector, g.concat_cols({V, g.tile_rows(ctx, T_)}));
  }

  /// Row t of V scaled by n[t].
  Var apply_snippet_mask(Var V, Var n) {
    const auto& Vv = g.value(V);
    const auto& nv = g.value(n);
    if (nv.rows() != Vv.rows() || nv.cols() != 1) {
      throw ShapeError("snippet mask " + nv.shape_str() + " does not fit features " + Vv.shape_str());
    }
    return g.mul(V, n);
  }

  /// Action/object/pseudo-class probabilities, 1 x actobj_dim.
  Var action_object(Var Vi, Var ctx) {
    check_features(Vi);
    check_context(ctx);
    return mlp3(p.actobj, g.concat_cols({g.mean_rows(Vi), ctx}));
  }

  /// Encoded tokens, (ceil(T / stride) + 1) x d. Token 0 carries the
  /// projected (a_i, m, g, h); the rest are pooled, projected frames.
  Var encoder(Var Vi, Var a, Var ctx) {
    check_features(Vi);
    check_context(ctx);
    if (g.value(a).rows() != 1 || g.value(a).cols() != p.config.actobj_dim) {
      throw ShapeError("encoder: action-object row " + g.value(a).shape_str());
    }
    Var frames = linear(p.frame_proj, g.mean_pool(Vi, p.config.token_stride));
    Var head = linear(p.context_proj, g.concat_cols({a, ctx}));
    Var x = g.concat_rows({head, frames});
    const auto L = g.value(x).rows();
    if (p.config.memory_slots != 0 && p.config.memory_slots != L) {
      throw ValidationError("model.memory_slots " + std::to_string(p.config.memory_slots) + " but the video encodes to " +
                            std::to_string(L) + " tokens");
    }
    x = drop(g.add(x, g.constant(positional_encoding<T>(L, p.config.d_model))));
    for (auto& layer : p.encoder) {
      Var n1 = norm(layer.ln_attn, x);
      x = g.add(x, drop(attention(layer.attn, n1, n1, false)));
      x = g.add(x, drop(ffn(layer.ffn_in, layer.ffn_out, norm(layer.ln_ffn, x))));
    }
    return x;
  }

  /// Gated write: M'_j = M_j * (1 - w_j e) + w_j u, with w (1 x S),
  /// e and u (1 x d).
  Var memory_write(Var M, Var w, Var e, Var u) {
    Var wt = g.transpose(w);
    Var erase = g.mul(M, g.matmul(wt, e));
    return g.add(g.sub(M, erase), g.matmul(wt, u));
  }

  /// w = softmax(M Wq q), e = sigmoid(We q), u = tanh(Wa q).
  Var memory_update(Var M, Var q) {
    if (!g.value(q).all_finite()) throw NumericError("memory_update: non-finite query");
    Var k = linear(p.memory.query, q);
    Var w = g.softmax_rows(g.matmul_nt(k, M));
    Var e = g.sigmoid(linear(p.memory.erase, q));
    Var u = g.tanh(linear(p.memory.add, q));
    return memory_write(M, w, e, u);
  }

  struct DecoderOut {
    Var probs;  ///< prefix_len x vocab
    Var state;  ///< top-layer states before the final norm, prefix_len x d
  };

  /// Decoder over a whole prefix against memory M (causal self-attention).
  DecoderOut decoder(std::span<const int> prefix, Var M) {
    if (prefix.empty()) throw ValidationError("decoder: empty prefix");
    if (prefix.size() > p.config.max_sentence_len + 1) {
      throw ValidationError("decoder: prefix of " + std::to_string(prefix.size()) + " tokens exceeds max_sentence_len " +
                            std::to_string(p.config.max_sentence_len));
    }
    Var x = g.embedding(g.param(p.token_embedding), prefix);
    x = drop(g.add(x, g.constant(positional_encoding<T>(prefix.size(), p.config.d_model))));
    for (auto& layer : p.decoder) {
      Var n1 = norm(layer.ln_self, x);
      x = g.add(x, drop(attention(layer.self_attn, n1, n1, true)));
      x = g.add(x, drop(attention(layer.cross_attn, norm(layer.ln_cross, x), M, false)));
      x = g.add(x, drop(ffn(layer.ffn_in, layer.ffn_out, norm(layer.ln_ffn, x))));
    }
    Var logits = linear(p.output, norm(p.final_ln, x));
    return {g.softmax_rows(logits), x};
  }

  struct StepOut {
    Var probs;   ///< 1 x vocab, distribution of the next token
    Var memory;  ///< memory after this step's update
  };

  /// Next-token distribution for the last prefix position, then one memory
  /// update with that position's top-layer state as query.
  StepOut decoder_step(std::span<const int> prefix, Var M) {
    auto out = decoder(prefix, M);
    const std::size_t last = prefix.size() - 1;
    Var probs = g.slice_rows(out.probs, last, last + 1);
    Var q = g.slice_rows(out.state, last, last + 1);
    return {probs, memory_update(M, q)};
  }

 private:
  void check_features(Var V) const {
    const auto& v = g.value(V);
    if (v.cols() != p.config.feature_dim) {
      throw ShapeError("features " + v.shape_str() + " but model.feature_dim is " + std::to_string(p.config.feature_dim));
    }
    if (v.rows() > p.config.max_frames) {
      throw ValidationError(std::to_string(v.rows()) + " frames exceed model.max_frames " +
                            std::to_string(p.config.max_frames));
    }
  }
  void check_context(Var ctx) const {
    const auto& c = g.value(ctx);
    if (c.rows() != 1 || c.cols() != p.config.context_width()) {
      throw ShapeError("context row " + c.shape_str() + " but expected width " + std::to_string(p.config.context_width()));
    }
  }
};

}  // namespace vidcap
