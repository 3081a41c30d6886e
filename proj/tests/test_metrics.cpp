#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "vidcap/metrics.hpp"
#include "vidcap/synth.hpp"
#include "oracles.hpp"

namespace vidcap {
namespace {

using namespace oracle;

Tokens words(const std::string& s) { return split_words(s); }

// ---- BLEU ---------------------------------------------------------------------

TEST(Bleu, IdenticalCandidatesScoreOne) {
  std::vector<Tokens> c = {words("pick up the mug"), words("wash the red apple now")};
  std::vector<std::vector<Tokens>> r = {{c[0]}, {c[1]}};
  for (int n = 1; n <= 4; ++n) EXPECT_DOUBLE_EQ(bleu(c, r, n), 1.0);
}

TEST(Bleu, NoFourGramOverlapIsZero) {
  std::vector<Tokens> c = {words("a b c d e")};
  std::vector<std::vector<Tokens>> r = {{words("a b c x d e")}};
  EXPECT_EQ(bleu(c, r, 4), 0.0);
  EXPECT_GT(bleu(c, r, 3), 0.0);
}

TEST(Bleu, BrevityPenaltyByHand) {
  // 3 of 3 unigrams match, reference length 6: bp = exp(1 - 6/3)
  std::vector<Tokens> c = {words("a b c")};
  std::vector<std::vector<Tokens>> r = {{words("a b c d e f")}};
  EXPECT_NEAR(bleu(c, r, 1), std::exp(-1.0), 1e-15);
}

TEST(Bleu, MatchesOracleOnRandomCorpora) {
  std::mt19937_64 rng(21);
  int nonzero = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const auto c = random_corpus(rng);
    for (int n = 1; n <= 4; ++n) {
      const double want = bleu_oracle(c.cands, c.refs, n);
      EXPECT_NEAR(bleu(c.cands, c.refs, n), want, 1e-9) << trial << " n=" << n;
      nonzero += want > 0;
    }
  }
  EXPECT_GT(nonzero, 40);
}

TEST(Bleu, NonIncreasingInOrder) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 30; ++trial) {
    const auto c = random_corpus(rng);
    for (int n = 2; n <= 4; ++n) EXPECT_LE(bleu(c.cands, c.refs, n), bleu(c.cands, c.refs, n - 1) + 1e-12);
  }
}

TEST(Bleu, RejectsEmptyOrMisalignedCorpus) {
  EXPECT_THROW(bleu({}, {}, 4), ValidationError);
  EXPECT_THROW(bleu({words("a")}, {}, 4), ValidationError);
  EXPECT_THROW(bleu({words("a")}, {{words("a")}}, 5), ValidationError);
}

// ---- CIDEr --------------------------------------------------------------------

TEST(Cider, DisjointCandidateScoresZero) {
  std::vector<Tokens> c = {words("x y z"), words("pick up the mug")};
  std::vector<std::vector<Tokens>> r = {{words("a b c")}, {words("pick up the mug")}};
  const double s = cider(c, r);
  // only the second item contributes, and only orders whose n-grams are not in every item
  EXPECT_NEAR(s, cider_oracle(c, r), 1e-12);
  std::vector<Tokens> c0 = {words("x y z"), words("q r")};
  EXPECT_EQ(cider(c0, r), 0.0);
}

TEST(Cider, InvariantToReferenceOrder) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = random_corpus(rng);
    const double a = cider(c.cands, c.refs);
    for (auto& rs : c.refs) std::reverse(rs.begin(), rs.end());
    EXPECT_NEAR(cider(c.cands, c.refs), a, 1e-12);
  }
}

TEST(Cider, MatchesOracleOnRandomCorpora) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 25; ++trial) {
    const auto c = random_corpus(rng);
    EXPECT_NEAR(cider(c.cands, c.refs), cider_oracle(c.cands, c.refs), 1e-6) << trial;
  }
}

TEST(Cider, RejectsSingleItemCorpus) {
  try {
    cider({words("a b")}, {{words("a b")}});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("at least 2"), std::string::npos);
  }
}

// ---- METEOR-lite ----------------------------------------------------------------

TEST(MeteorLite, IdenticalFourTokens) {
  EXPECT_DOUBLE_EQ(meteor_lite(words("pick up the mug"), words("pick up the mug")), 0.9921875);
}

TEST(MeteorLite, ZeroMatchesAndEmptyReference) {
  EXPECT_EQ(meteor_lite(words("a b"), words("c d")), 0.0);
  EXPECT_EQ(meteor_lite({}, words("c d")), 0.0);
  EXPECT_THROW(meteor_lite(words("a"), {}), ValidationError);
}

TEST(MeteorLite, ChunksAreMinimalOverAlignments) {
  // "a b a b" vs "a b": two matches; pairing the first "a b" or the second keeps one chunk
  const auto al = meteor_align(words("a b a b"), words("a b"));
  EXPECT_EQ(al.matches, 2u);
  EXPECT_EQ(al.chunks, 1u);
  EXPECT_TRUE(al.exact);
  const auto al2 = meteor_align(words("b a x"), words("a x b a"));
  EXPECT_EQ(al2.matches, 3u);
  EXPECT_EQ(al2.chunks, 2u);
}

TEST(MeteorLite, MatchesBruteForceOnRandomPairs) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_sentence(rng, 0, 7, 3), r = random_sentence(rng, 1, 7, 3);
    const auto [m, ch] = brute_align(c, r);
    const auto al = meteor_align(c, r);
    EXPECT_EQ(int(al.matches), m);
    EXPECT_EQ(int(al.chunks), ch);
    EXPECT_NEAR(meteor_lite(c, r), meteor_oracle(c, r), 1e-9);
  }
}

TEST(MeteorLite, CorpusIsMeanOfBestReference) {
  std::vector<Tokens> c = {words("a b c"), words("d e")};
  std::vector<std::vector<Tokens>> r = {{words("x"), words("a b c")}, {words("d")}};
  const double want = (meteor_oracle(c[0], r[0][1]) + meteor_oracle(c[1], r[1][0])) / 2;
  EXPECT_NEAR(meteor_lite_corpus(c, r), want, 1e-12);
}

TEST(MeteorLite, BudgetFallbackStillCountsMatches) {
  Tokens c(30, "a"), r(30, "a");
  const auto al = meteor_align(c, r, 10);
  EXPECT_EQ(al.matches, 30u);
  EXPECT_FALSE(al.exact);
  EXPECT_EQ(al.chunks, 1u);
}

// ---- permutation invariance --------------------------------------------------------

TEST(Metrics, InvariantToItemOrder) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_corpus(rng);
    std::vector<std::size_t> perm(c.cands.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Corpus p;
    for (auto i : perm) {
      p.cands.push_back(c.cands[i]);
      p.refs.push_back(c.refs[i]);
    }
    for (int n = 1; n <= 4; ++n) EXPECT_NEAR(bleu(c.cands, c.refs, n), bleu(p.cands, p.refs, n), 1e-12);
    EXPECT_NEAR(cider(c.cands, c.refs), cider(p.cands, p.refs), 1e-12);
    EXPECT_NEAR(meteor_lite_corpus(c.cands, c.refs), meteor_lite_corpus(p.cands, p.refs), 1e-12);
  }
}

// ---- accuracies ---------------------------------------------------------------------

TEST(Accuracy, SnippetCounting) {
  std::vector<float> gt = {1, 1, 1, 0, 0, 0, 0, 1, 1, 0};
  std::vector<float> pred = {0.9f, 0.8f, 0.2f, 0.1f, 0.0f, 0.7f, 0.3f, 0.6f, 0.5f, 0.4f};  // frames 2 and 5 disagree
  EXPECT_DOUBLE_EQ(snippet_accuracy({pred}, {gt}), 0.8);
  EXPECT_DOUBLE_EQ(snippet_accuracy({gt}, {gt}), 1.0);
  // constant 0.5 thresholds to 1, so accuracy is the fraction of positive frames
  EXPECT_DOUBLE_EQ(snippet_accuracy({std::vector<float>(10, 0.5f)}, {gt}), 0.5);
  EXPECT_THROW(snippet_accuracy({{0.1f}}, {gt}), ValidationError);
}

TEST(Accuracy, ActobjCounting) {
  std::vector<float> gt(677, 0.0f);
  for (std::size_t i : {3, 80, 400, 676}) gt[i] = 1.0f;
  EXPECT_DOUBLE_EQ(actobj_accuracy({std::vector<float>(677, 0.0f)}, {gt}), 673.0 / 677.0);
  auto pred = gt;
  pred[3] = 0.2f;   // miss
  pred[10] = 0.9f;  // false positive
  pred[80] = 0.5f;  // tie counts as positive
  EXPECT_DOUBLE_EQ(actobj_accuracy({pred}, {gt}), 675.0 / 677.0);
  EXPECT_DOUBLE_EQ(actobj_accuracy({gt}, {gt}), 1.0);
}

// ---- evaluation over a split ----------------------------------------------------------

std::vector<GeneratedVideo> perfect_copy(const DatasetSplit& s) {
  std::vector<GeneratedVideo> out;
  for (const auto& v : s.videos) {
    GeneratedVideo g{v.id, GenerationMode::GtProposals, {}};
    for (std::size_t i = 0; i < v.snippets.size(); ++i)
      g.snippets.push_back({v.snippets[i].caption, v.gt_mask(i), v.snippets[i].actobj_target()});
    out.push_back(std::move(g));
  }
  return out;
}

TEST(Evaluate, PerfectCopiesScoreOne) {
  const auto data = synth_generate(SynthConfig{});
  const auto rep = evaluate(perfect_copy(data.split), data.split);
  EXPECT_DOUBLE_EQ(rep.bleu[3], 1.0);
  EXPECT_DOUBLE_EQ(rep.snippet_acc, 1.0);
  EXPECT_DOUBLE_EQ(rep.actobj_acc, 1.0);
  EXPECT_EQ(rep.caption_unit, "sentence");
  EXPECT_EQ(rep.caption_items, 24u);
  EXPECT_EQ(rep.snippets, 24u);
  EXPECT_EQ(to_json(rep)["note"], kMeteorNote);
}

TEST(Evaluate, FreeModeScoresParagraphsAndPadsMissingSteps) {
  const auto data = synth_generate(SynthConfig{});
  auto gen = perfect_copy(data.split);
  for (auto& g : gen) {
    g.mode = GenerationMode::Free;
    g.snippets.pop_back();
  }
  const auto rep = evaluate(gen, data.split);
  EXPECT_EQ(rep.caption_unit, "paragraph");
  EXPECT_EQ(rep.caption_items, 8u);
  EXPECT_LT(rep.bleu[0], 1.0);
  // the last snippet of each video is scored against all-zero predictions
  BinaryAgreement want;
  for (const auto& v : data.split.videos) {
    for (std::size_t i = 0; i + 1 < v.snippets.size(); ++i) want.add(v.gt_mask(i), v.gt_mask(i));
    want.add(std::vector<float>(v.num_frames(), 0.0f), v.gt_mask(v.snippets.size() - 1));
  }
  EXPECT_DOUBLE_EQ(rep.snippet_acc, want.fraction());
}

TEST(Evaluate, RejectsMismatches) {
  const auto data = synth_generate(SynthConfig{});
  EXPECT_THROW(evaluate({}, data.split), ValidationError);
  auto gen = perfect_copy(data.split);
  gen[0].id = "nope";
  EXPECT_THROW(evaluate(gen, data.split), ValidationError);
  gen = perfect_copy(data.split);
  gen[1].snippets.pop_back();
  EXPECT_THROW(evaluate(gen, data.split), ValidationError);
  gen = perfect_copy(data.split);
  gen.push_back(gen[0]);
  EXPECT_THROW(evaluate(gen, data.split), ValidationError);
  gen = perfect_copy(data.split);
  gen[0].snippets[0].mask.pop_back();
  EXPECT_THROW(evaluate(gen, data.split), ValidationError);
}

TEST(AblationTable, RowsInGivenOrder) {
  EvalReport a, b;
  a.bleu[3] = 0.1718;
  a.meteor_lite = 0.2306;
  a.cider = 0.1948;
  const auto t = ablation_table({{"full", a}, {"no commonsense", b}});
  EXPECT_NE(t.find("| full | 17.18 | 23.06 | 19.48 |"), std::string::npos) << t;
  EXPECT_LT(t.find("full"), t.find("no commonsense"));
}

}  // namespace
}  // namespace vidcap
