#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "vidcap/model.hpp"

namespace vidcap {
namespace {

using Mat = std::vector<std::vector<double>>;
using G = Graph<double>;

// ---- independent dense reference ------------------------------------------

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat transpose(const Mat& a) {
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

Mat lin(const Linear<double>& l, const Mat& x) {
  Mat y = mm(x, to_mat(l.w.value));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.b.value(0, j);
  return y;
}

Mat apply(Mat x, double (*f)(double)) {
  for (auto& r : x)
    for (auto& v : r) v = f(v);
  return x;
}

double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double tanh_(double v) { return std::tanh(v); }

Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) a[i][j] += b[i][j];
  return a;
}

Mat softmax(Mat x) {
  for (auto& r : x) {
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double s = 0;
    for (auto& v : r) s += (v = std::exp(v - mx));
    for (auto& v : r) v /= s;
  }
  return x;
}

Mat lnorm(const LayerNormParams<double>& p, Mat x) {
  for (auto& r : x) {
    double mu = 0, var = 0;
    for (double v : r) mu += v;
    mu /= r.size();
    for (double v : r) var += (v - mu) * (v - mu);
    var /= r.size();
    for (std::size_t j = 0; j < r.size(); ++j)
      r[j] = (r[j] - mu) / std::sqrt(var + 1e-5) * p.gain.value(0, j) + p.bias.value(0, j);
  }
  return x;
}

Mat attend(const AttentionParams<double>& a, const Mat& xq, const Mat& xkv, std::size_t heads, bool causal) {
  const Mat Q = lin(a.q, xq), K = lin(a.k, xkv), V = lin(a.v, xkv);
  const std::size_t d = Q[0].size(), dk = d / heads;
  Mat out(Q.size(), std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < Q.size(); ++i) {
      std::vector<double> s(K.size());
      for (std::size_t j = 0; j < K.size(); ++j) {
        double dot = 0;
        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) dot += Q[i][c] * K[j][c];
        s[j] = (causal && j > i) ? -1e300 : dot / std::sqrt(double(dk));
      }
      const auto w = softmax(Mat{s})[0];
      for (std::size_t j = 0; j < K.size(); ++j)
        for (std::size_t c = h * dk; c < (h + 1) * dk; ++c) out[i][c] += w[j] * V[j][c];
    }
  }
  return lin(a.o, out);
}

Mat ffn(const Linear<double>& in, const Linear<double>& out, const Mat& x) { return lin(out, apply(lin(in, x), tanh_)); }

double pe(std::size_t pos, std::size_t i, std::size_t d) {
  const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d);
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

Mat add_pe(Mat x) {
  for (std::size_t p = 0; p < x.size(); ++p)
    for (std::size_t i = 0; i < x[0].size(); ++i) x[p][i] += pe(p, i, x[0].size());
  return x;
}

void expect_close(const Tensor<double>& got, const Mat& want, double tol) {
  ASSERT_EQ(got.rows(), want.size());
  ASSERT_EQ(got.cols(), want[0].size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[0].size(); ++j) EXPECT_NEAR(got(i, j), want[i][j], tol) << i << "," << j;
}

ModelConfig tiny(std::size_t D = 2, std::size_t C = 1) {
  ModelConfig c;
  c.feature_dim = D;
  c.context_dim = C;
  c.d_model = 4;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn_dim = 6;
  c.vocab_size = 7;
  c.actobj_dim = 3;
  c.dropout = 0.0;
  return c;
}

Tensor<double> random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = 2.0 * uniform01(rng) - 1.0;
  return t;
}

// ---- config -----------------------------------------------------------------

TEST(ModelConfig, RejectsIndivisibleHeads) {
  auto c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(ModelConfig, ParameterOrderIsStableAndNamesUnique) {
  auto a = init_model_params<double>(tiny(), 1);
  auto b = init_model_params<float>(tiny(), 1);
  auto pa = a.all();
  auto pb = b.all();
  ASSERT_EQ(pa.size(), pb.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_TRUE(names.insert(pa[i]->name).second) << pa[i]->name;
    // float model is the rounded double model
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k) EXPECT_EQ(float(pa[i]->value[k]), pb[i]->value[k]);
  }
}

// ---- selector ---------------------------------------------------------------

TEST(Selector, ZeroFinalLayerGivesHalf) {
  auto p = init_model_params<double>(tiny(), 3);
  p.selector[2].w.value.fill(0.0);
  G g;
  Forward<double> f{g, p};
  auto n = f.snippet_selector(g.constant(random_tensor(5, 2, 1)), g.constant(Tensor<double>(1, 3)));
  for (double v : g.value(n).values()) EXPECT_EQ(v, 0.5);
}

TEST(Selector, FullSizeInputGivesOnePerFrame) {
  auto c = tiny(4096, kContextDim);
  c.d_model = 8;
  auto p = init_model_params<double>(c, 3);
  G g(false);
  Forward<double> f{g, p};
  auto n = f.snippet_selector(g.constant(random_tensor(150, 4096, 2)), g.constant(Tensor<double>(1, 3 * kContextDim)));
  EXPECT_EQ(g.value(n).rows(), 150u);
  EXPECT_EQ(g.value(n).cols(), 1u);
  EXPECT_THROW(f.snippet_selector(g.constant(random_tensor(151, 4096, 2)), g.constant(Tensor<double>(1, 3 * kContextDim))),
               ValidationError);
}

TEST(Selector, HandComputedTinyWeights) {
  auto p = init_model_params<double>(tiny(), 5);
  const Tensor<double> V(2, 2, std::vector<double>{1.0, -0.5, 0.25, 2.0});
  G g;
  Forward<double> f{g, p};
  auto n = f.snippet_selector(g.constant(V), g.constant(Tensor<double>(1, 3)));
  Mat x = {{1.0, -0.5, 0, 0, 0}, {0.25, 2.0, 0, 0, 0}};
  Mat h = apply(lin(p.selector[0], x), tanh_);
  h = apply(lin(p.selector[1], h), tanh_);
  expect_close(g.value(n), apply(lin(p.selector[2], h), sigm), 1e-12);
}

TEST(Selector, RejectsWrongWidths) {
  auto p = init_model_params<double>(tiny(), 5);
  G g;
  Forward<double> f{g, p};
  EXPECT_THROW(f.snippet_selector(g.constant(Tensor<double>(2, 3)), g.constant(Tensor<double>(1, 3))), ShapeError);
  EXPECT_THROW(f.snippet_selector(g.constant(Tensor<double>(2, 2)), g.constant(Tensor<double>(1, 4))), ShapeError);
}

// ---- mask -------------------------------------------------------------------

TEST(Mask, Examples) {
  auto p = init_model_params<double>(tiny(), 5);
  G g;
  Forward<double> f{g, p};
  const Tensor<double> Vt(2, 2, std::vector<double>{2, 2, 3, 3});
  auto V = g.constant(Vt);
  auto masked = [&](std::vector<double> n) { return Tensor<double>(g.value(f.apply_snippet_mask(V, g.constant(Tensor<double>(2, 1, n))))); };
  EXPECT_EQ(masked({1, 1}), Vt);
  EXPECT_EQ(masked({0, 0}), Tensor<double>(2, 2));
  EXPECT_EQ(masked({1, 0}), Tensor<double>(2, 2, std::vector<double>{2, 2, 0, 0}));
  EXPECT_THROW(f.apply_snippet_mask(V, g.constant(Tensor<double>(3, 1))), ShapeError);
}

TEST(Mask, LinearInTheMask) {
  auto p = init_model_params<double>(tiny(), 5);
  for (std::uint64_t s = 0; s < 20; ++s) {
    G g;
    Forward<double> f{g, p};
    const auto V = random_tensor(4, 2, s);
    auto n = random_tensor(4, 1, s + 100);
    const double alpha = 0.3 + 0.1 * double(s);
    auto a = g.value(f.apply_snippet_mask(g.constant(V), g.constant(n)));
    for (auto& v : n.values()) v *= alpha;
    auto b = g.value(f.apply_snippet_mask(g.constant(V), g.constant(n)));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], alpha * a[i], 1e-12);
  }
}

// ---- action-object head ---------------------------------------------------

TEST(ActionObject, ZeroFinalLayerGivesHalf) {
  auto c = tiny();
  c.actobj_dim = 677;
  auto p = init_model_params<double>(c, 2);
  p.actobj[2].w.value.fill(0.0);
  G g;
  Forward<double> f{g, p};
  auto a = f.action_object(g.constant(random_tensor(3, 2, 9)), g.constant(random_tensor(1, 3, 4)));
  EXPECT_EQ(g.value(a).cols(), 677u);
  for (double v : g.value(a).values()) EXPECT_EQ(v, 0.5);
}

TEST(ActionObject, HandComputedTinyWeights) {
  auto p = init_model_params<double>(tiny(), 8);
  const auto V = random_tensor(3, 2, 1);
  const auto ctx = random_tensor(1, 3, 2);
  G g;
  Forward<double> f{g, p};
  auto a = f.action_object(g.constant(V), g.constant(ctx));
  Mat x = {{(V(0, 0) + V(1, 0) + V(2, 0)) / 3, (V(0, 1) + V(1, 1) + V(2, 1)) / 3, ctx[0], ctx[1], ctx[2]}};
  Mat h = apply(lin(p.actobj[0], x), tanh_);
  h = apply(lin(p.actobj[1], h), tanh_);
  expect_close(g.value(a), apply(lin(p.actobj[2], h), sigm), 1e-12);
}

// ---- encoder ----------------------------------------------------------------

Mat encoder_input(ModelParams<double>& p, const Tensor<double>& V, const Tensor<double>& a,
                  const Tensor<double>& ctx) {
  Mat head_in = {{}};
  for (double v : a.values()) head_in[0].push_back(v);
  for (double v : ctx.values()) head_in[0].push_back(v);
  Mat x = lin(p.context_proj, head_in);
  for (const auto& r : lin(p.frame_proj, to_mat(V))) x.push_back(r);
  return add_pe(x);
}

TEST(Encoder, ZeroUpdatesAreIdentity) {
  auto p = init_model_params<double>(tiny(), 4);
  for (auto& l : p.encoder) {
    l.attn.o.w.value.fill(0.0);
    l.ffn_out.w.value.fill(0.0);
  }
  const auto V = random_tensor(3, 2, 1), a = random_tensor(1, 3, 2), ctx = random_tensor(1, 3, 3);
  G g;
  Forward<double> f{g, p};
  auto e = f.encoder(g.constant(V), g.constant(a), g.constant(ctx));
  expect_close(g.value(e), encoder_input(p, V, a, ctx), 1e-12);
}

TEST(Encoder, SingleHeadLayerMatchesReference) {
  auto c = tiny();
  c.d_model = 2;
  c.heads = 1;
  auto p = init_model_params<double>(c, 6);
  p.encoder[0].ln_attn.gain.value = Tensor<double>(1, 2, std::vector<double>{0.7, 1.3});
  p.encoder[0].ln_attn.bias.value = Tensor<double>(1, 2, std::vector<double>{0.1, -0.2});
  const auto V = random_tensor(1, 2, 11), a = random_tensor(1, 3, 12), ctx = random_tensor(1, 3, 13);
  G g;
  Forward<double> f{g, p};
  auto e = f.encoder(g.constant(V), g.constant(a), g.constant(ctx));
  ASSERT_EQ(g.value(e).rows(), 2u);
  const auto& L = p.encoder[0];
  Mat x = encoder_input(p, V, a, ctx);
  Mat n1 = lnorm(L.ln_attn, x);
  x = plus(x, attend(L.attn, n1, n1, 1, false));
  x = plus(x, ffn(L.ffn_in, L.ffn_out, lnorm(L.ln_ffn, x)));
  expect_close(g.value(e), x, 1e-12);
}

TEST(Encoder, StridePoolsFramesIntoTokens) {
  auto c = tiny();
  c.token_stride = 4;
  auto p = init_model_params<double>(c, 6);
  G g;
  Forward<double> f{g, p};
  auto e = f.encoder(g.constant(random_tensor(10, 2, 1)), g.constant(random_tensor(1, 3, 2)),
                     g.constant(random_tensor(1, 3, 3)));
  EXPECT_EQ(g.value(e).rows(), c.encoded_tokens(10));
  EXPECT_EQ(g.value(e).rows(), 4u);
}

TEST(Encoder, DefaultShape) {
  ModelConfig c;
  c.feature_dim = 8;
  c.vocab_size = 10;
  c.enc_layers = 1;
  c.dec_layers = 1;
  auto p = init_model_params<float>(c, 1);
  Graph<float> g(false);
  Forward<float> f{g, p};
  auto e = f.encoder(g.constant(Tensor<float>(5, 8, 0.1f)), g.constant(Tensor<float>(1, 677, 0.5f)),
                     g.constant(Tensor<float>(1, 3 * kContextDim)));
  EXPECT_EQ(g.value(e).rows(), 6u);
  EXPECT_EQ(g.value(e).cols(), 512u);
}

// ---- memory -----------------------------------------------------------------

TEST(Memory, ZeroGatesLeaveMemoryUnchanged) {
  auto p = init_model_params<double>(tiny(), 1);
  G g;
  Forward<double> f{g, p};
  const auto M = random_tensor(5, 4, 3);
  auto out = f.memory_write(g.constant(M), g.constant(Tensor<double>(1, 5, 0.2)), g.constant(Tensor<double>(1, 4)),
                            g.constant(Tensor<double>(1, 4)));
  EXPECT_EQ(g.value(out), M);
}

TEST(Memory, ZeroAddPathIsNonExpansive) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto p = init_model_params<double>(tiny(), s);
    p.memory.add.w.value.fill(0.0);
    p.memory.add.b.value.fill(0.0);
    G g;
    Forward<double> f{g, p};
    const auto M = random_tensor(6, 4, s + 1);
    auto out = g.value(f.memory_update(g.constant(M), g.constant(random_tensor(1, 4, s + 2))));
    for (std::size_t j = 0; j < 6; ++j) {
      double before = 0, after = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        before += M(j, c) * M(j, c);
        after += out(j, c) * out(j, c);
      }
      EXPECT_LE(after, before + 1e-15);
    }
  }
}

TEST(Memory, OneSlotHandComputed) {
  auto p = init_model_params<double>(tiny(), 7);
  p.memory.erase.b.value = random_tensor(1, 4, 8);
  p.memory.add.b.value = random_tensor(1, 4, 9);
  const auto M = random_tensor(1, 4, 10), q = random_tensor(1, 4, 11);
  G g;
  Forward<double> f{g, p};
  auto out = f.memory_update(g.constant(M), g.constant(q));
  // a single slot receives the whole write weight
  const Mat e = apply(lin(p.memory.erase, to_mat(q)), sigm);
  const Mat u = apply(lin(p.memory.add, to_mat(q)), tanh_);
  Mat want = to_mat(M);
  for (std::size_t c = 0; c < 4; ++c) want[0][c] = want[0][c] * (1 - e[0][c]) + u[0][c];
  expect_close(g.value(out), want, 1e-12);
}

TEST(Memory, WriteWeightsFollowSlotSimilarity) {
  auto p = init_model_params<double>(tiny(), 7);
  const auto M = random_tensor(3, 4, 10), q = random_tensor(1, 4, 11);
  G g;
  Forward<double> f{g, p};
  auto out = f.memory_update(g.constant(M), g.constant(q));
  const Mat w = softmax(mm(lin(p.memory.query, to_mat(q)), transpose(to_mat(M))));
  const Mat e = apply(lin(p.memory.erase, to_mat(q)), sigm);
  const Mat u = apply(lin(p.memory.add, to_mat(q)), tanh_);
  Mat want = to_mat(M);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t c = 0; c < 4; ++c) want[j][c] = want[j][c] * (1 - w[0][j] * e[0][c]) + w[0][j] * u[0][c];
  expect_close(g.value(out), want, 1e-12);
}

TEST(Memory, NonFiniteQueryRejected) {
  auto p = init_model_params<double>(tiny(), 7);
  G g;
  Forward<double> f{g, p};
  Tensor<double> q(1, 4);
  q[2] = std::nan("");
  EXPECT_THROW(f.memory_update(g.constant(random_tensor(2, 4, 1)), g.constant(q)), NumericError);
}

// ---- decoder ----------------------------------------------------------------

TEST(Decoder, DistributionSumsToOne) {
  auto p = init_model_params<double>(tiny(), 2);
  G g;
  Forward<double> f{g, p};
  const std::vector<int> prefix = {0, 4, 5};
  auto step = f.decoder_step(prefix, g.constant(random_tensor(3, 4, 1)));
  double s = 0;
  for (double v : g.value(step.probs).values()) s += v;
  EXPECT_NEAR(s, 1.0, 1e-6);
  EXPECT_EQ(g.value(step.probs).cols(), 7u);
}

TEST(Decoder, CausalMaskHidesFutureTokens) {
  auto c = tiny();
  c.dec_layers = 2;
  auto p = init_model_params<double>(c, 2);
  const auto M = random_tensor(3, 4, 1);
  for (int variant = 4; variant < 7; ++variant) {
    G g;
    Forward<double> f{g, p};
    const std::vector<int> a = {0, 4, 5, 6}, b = {0, 4, variant, 1};
    auto pa = g.value(f.decoder(a, g.constant(M)).probs);
    auto pb = g.value(f.decoder(b, g.constant(M)).probs);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(pa(t, k), pb(t, k));
  }
}

TEST(Decoder, SingleLayerLogitsMatchReference) {
  auto p = init_model_params<double>(tiny(), 12);
  const auto M = random_tensor(3, 4, 5);
  const std::vector<int> prefix = {0, 5};
  G g;
  Forward<double> f{g, p};
  auto out = f.decoder(prefix, g.constant(M));
  Mat x;
  for (int id : prefix) x.push_back(to_mat(p.token_embedding.value)[std::size_t(id)]);
  x = add_pe(x);
  const auto& L = p.decoder[0];
  Mat n1 = lnorm(L.ln_self, x);
  x = plus(x, attend(L.self_attn, n1, n1, 2, true));
  x = plus(x, attend(L.cross_attn, lnorm(L.ln_cross, x), to_mat(M), 2, false));
  x = plus(x, ffn(L.ffn_in, L.ffn_out, lnorm(L.ln_ffn, x)));
  expect_close(g.value(out.state), x, 1e-12);
  expect_close(g.value(out.probs), softmax(lin(p.output, lnorm(p.final_ln, x))), 1e-12);
}

TEST(Decoder, StepUpdatesMemoryWithLastState) {
  auto p = init_model_params<double>(tiny(), 12);
  const auto M = random_tensor(3, 4, 5);
  const std::vector<int> prefix = {0, 5, 6};
  G g;
  Forward<double> f{g, p};
  auto full = f.decoder(prefix, g.constant(M));
  auto step = f.decoder_step(prefix, g.constant(M));
  for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(g.value(step.probs)[k], g.value(full.probs)(2, k));
  auto q = g.slice_rows(full.state, 2, 3);
  auto again = f.memory_update(g.constant(M), q);
  EXPECT_EQ(g.value(step.memory), g.value(again));
}

TEST(Decoder, RejectsOverlongPrefix) {
  auto c = tiny();
  c.max_sentence_len = 3;
  auto p = init_model_params<double>(c, 1);
  G g;
  Forward<double> f{g, p};
  const std::vector<int> prefix = {0, 4, 4, 4, 4};
  EXPECT_THROW(f.decoder(prefix, g.constant(random_tensor(2, 4, 1))), ValidationError);
  EXPECT_THROW(f.decoder(std::vector<int>{}, g.constant(random_tensor(2, 4, 1))), ValidationError);
}

// ---- determinism ------------------------------------------------------------

TEST(Forward, DeterministicWithoutDropoutAndSeededWithIt) {
  auto c = tiny();
  c.dropout = 0.3;
  auto p = init_model_params<double>(c, 2);
  auto run = [&](std::mt19937_64* rng) {
    G g;
    Forward<double> f{g, p, rng};
    auto V = g.constant(random_tensor(4, 2, 1));
    auto ctx = g.constant(random_tensor(1, 3, 2));
    auto n = f.snippet_selector(V, ctx);
    auto Vi = f.apply_snippet_mask(V, n);
    auto a = f.action_object(Vi, ctx);
    auto e = f.encoder(Vi, a, ctx);
    const std::vector<int> prefix = {0, 4};
    return g.value(f.decoder_step(prefix, e).probs);
  };
  EXPECT_EQ(run(nullptr), run(nullptr));
  std::mt19937_64 r1(9), r2(9);
  EXPECT_EQ(run(&r1), run(&r2));
  std::mt19937_64 r3(9);
  EXPECT_NE(run(&r3), run(nullptr));
}

TEST(Forward, CastPreservesWeights) {
  auto p = init_model_params<float>(tiny(), 3);
  auto d = cast_params<double>(p);
  auto pf = p.all();
  auto pd = d.all();
  for (std::size_t i = 0; i < pf.size(); ++i) EXPECT_EQ(pd[i]->value, pf[i]->value.cast<double>());
}

}  // namespace
}  // namespace vidcap
