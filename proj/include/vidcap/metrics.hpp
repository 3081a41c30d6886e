#pragma once

// Caption metrics (corpus BLEU, CIDEr, METEOR-lite) and the auxiliary head
// accuracies. Captions are tokenized with split_words.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "vidcap/config.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/generation.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

using Tokens = std::vector<std::string>;

namespace detail {

using NgramCounts = std::map<Tokens, std::size_t>;

inline NgramCounts ngrams(const Tokens& s, std::size_t n) {
  NgramCounts c;
  if (s.size() < n) return c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[Tokens(s.begin() + std::ptrdiff_t(i), s.begin() + std::ptrdiff_t(i + n))];
  return c;
}

inline void check_corpus(std::size_t cands, const std::vector<std::vector<Tokens>>& refs, const char* what) {
  if (cands == 0) throw ValidationError(std::string(what) + ": empty corpus");
  if (cands != refs.size()) {
    throw ValidationError(std::string(what) + ": " + std::to_string(cands) + " candidates but " +
                          std::to_string(refs.size()) + " reference sets");
  }
  for (const auto& r : refs)
    if (r.empty()) throw ValidationError(std::string(what) + ": item without references");
}

}  // namespace detail

// ---- BLEU --------------------------------------------------------------------

/// Corpus BLEU up to order n: clipped n-gram precisions pooled over the
/// corpus, geometric mean with uniform weights, brevity penalty against the
/// closest reference length (shorter wins ties). No smoothing.
inline double bleu(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& refs, int n) {
  detail::check_corpus(cands.size(), refs, "bleu");
  if (n < 1 || n > 4) throw ValidationError("bleu: order must be 1..4");
  std::vector<double> hit(std::size_t(n), 0.0), total(std::size_t(n), 0.0);
  double c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    c_len += double(c.size());
    std::size_t best = refs[i][0].size();
    for (const auto& r : refs[i]) {
      const auto d = [&](std::size_t len) { return len > c.size() ? len - c.size() : c.size() - len; };
      if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    r_len += double(best);
    for (int k = 1; k <= n; ++k) {
      const auto cc = detail::ngrams(c, std::size_t(k));
      std::map<Tokens, std::size_t> max_ref;
      for (const auto& r : refs[i])
        for (const auto& [g, cnt] : detail::ngrams(r, std::size_t(k))) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cc) {
        auto it = max_ref.find(g);
        hit[std::size_t(k - 1)] += double(std::min(cnt, it == max_ref.end() ? std::size_t{0} : it->second));
        total[std::size_t(k - 1)] += double(cnt);
      }
    }
  }
  double log_sum = 0;
  for (int k = 0; k < n; ++k) {
    if (hit[std::size_t(k)] == 0) return 0.0;
    log_sum += std::log(hit[std::size_t(k)] / total[std::size_t(k)]);
  }
  const double bp = c_len < r_len ? std::exp(1.0 - r_len / c_len) : 1.0;
  return bp * std::exp(log_sum / n);
}

// ---- CIDEr -------------------------------------------------------------------

/// Mean over n = 1..4 of the TF-IDF cosine between candidate and each
/// reference (averaged over references), times 10. idf = log(N / df) with
/// df the number of items whose references contain the n-gram; n-grams seen
/// in no reference use df = 1.
inline double cider(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& refs) {
  detail::check_corpus(cands.size(), refs, "cider");
  if (cands.size() < 2) throw ValidationError("cider: needs at least 2 items, idf = log(N/df) is 0 for every n-gram of a single item");
  const double N = double(cands.size());
  double score = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<Tokens, double> df;
    for (const auto& rs : refs) {
      std::set<Tokens> seen;
      for (const auto& r : rs)
        for (const auto& [g, c] : detail::ngrams(r, n)) seen.insert(g);
      for (const auto& g : seen) df[g] += 1.0;
    }
    auto vec = [&](const Tokens& s) {
      std::map<Tokens, double> v;
      for (const auto& [g, c] : detail::ngrams(s, n)) {
        auto it = df.find(g);
        v[g] = double(c) * std::log(N / (it == df.end() ? 1.0 : it->second));
      }
      return v;
    };
    auto norm = [](const std::map<Tokens, double>& v) {
      double s = 0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    double order_sum = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto cv = vec(cands[i]);
      const double cn = norm(cv);
      double item = 0;
      for (const auto& r : refs[i]) {
        const auto rv = vec(r);
        const double rn = norm(rv);
        if (cn == 0 || rn == 0) continue;
        double dot = 0;
        for (const auto& [g, x] : cv)
          if (auto it = rv.find(g); it != rv.end()) dot += x * it->second;
        item += dot / (cn * rn);
      }
      order_sum += item / double(refs[i].size());
    }
    score += order_sum / N;
  }
  return 10.0 * score / 4.0;
}

// ---- METEOR-lite -------------------------------------------------------------

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  bool exact = true;  ///< false if the chunk search hit its budget and fell back to greedy
};

namespace detail {

/// Among alignments with the maximum number of exact unigram matches, the
/// fewest chunks (runs adjacent in both sentences). Memoized search over
/// (candidate position, previous ref position, used ref positions).
class ChunkSearch {
 public:
  ChunkSearch(const Tokens& c, const Tokens& r, std::size_t budget) : c_(c), r_(r), budget_(budget) {
    std::map<std::string, std::size_t> cc, rc;
    for (const auto& w : c) ++cc[w];
    for (const auto& w : r) ++rc[w];
    for (const auto& [w, k] : cc) {
      auto it = rc.find(w);
      const std::size_t need = it == rc.end() ? 0 : std::min(k, it->second);
      need_[w] = need;
      matches_ += need;
    }
    used_.assign(r.size(), false);
  }

  MeteorAlignment run() {
    MeteorAlignment a;
    a.matches = matches_;
    if (matches_ == 0) return a;
    auto remaining_cand = count_remaining();
    const int best = search(0, -1, remaining_cand);
    if (best >= 0 && !overflow_) {
      a.chunks = std::size_t(best);
      return a;
    }
    a.chunks = greedy();
    a.exact = false;
    return a;
  }

 private:
  std::map<std::string, std::size_t> count_remaining() const {
    std::map<std::string, std::size_t> m;
    for (const auto& w : c_) ++m[w];
    return m;
  }

  std::string key(std::size_t i, int last) const {
    std::string k = std::to_string(i) + ":" + std::to_string(last) + ":";
    for (bool u : used_) k.push_back(u ? '1' : '0');
    for (const auto& [w, n] : need_) k += "," + std::to_string(n);
    return k;
  }

  // Minimum additional chunks from candidate position i; last is the ref
  // position matched by candidate i-1, or -1.
  int search(std::size_t i, int last, std::map<std::string, std::size_t>& rest) {
    if (i == c_.size()) return 0;
    if (overflow_) return -1;
    const auto k = key(i, last);
    if (auto it = memo_.find(k); it != memo_.end()) return it->second;
    if (memo_.size() >= budget_) {
      overflow_ = true;
      return -1;
    }
    const auto& w = c_[i];
    auto& need = need_[w];
    int best = std::numeric_limits<int>::max();
    --rest[w];
    // Leave unmatched only if the remaining occurrences can still supply every needed match.
    if (rest[w] >= need) {
      const int sub = search(i + 1, -1, rest);
      if (sub >= 0) best = std::min(best, sub);
    }
    if (need > 0) {
      for (std::size_t p = 0; p < r_.size(); ++p) {
        if (used_[p] || r_[p] != w) continue;
        used_[p] = true;
        --need;
        const int sub = search(i + 1, int(p), rest);
        ++need;
        used_[p] = false;
        if (sub >= 0) best = std::min(best, sub + (last >= 0 && int(p) == last + 1 ? 0 : 1));
      }
    }
    ++rest[w];
    if (overflow_) return -1;
    memo_.emplace(k, best);
    return best;
  }

  // Left to right: continue the current run when possible, else take the
  // first unused occurrence.
  std::size_t greedy() const {
    std::vector<bool> used(r_.size(), false);
    auto need = need_;
    std::size_t chunks = 0;
    int last = -1;
    for (const auto& w : c_) {
      if (need[w] == 0) {
        last = -1;
        continue;
      }
      int pick = -1;
      if (last >= 0 && std::size_t(last + 1) < r_.size() && !used[std::size_t(last + 1)] && r_[std::size_t(last + 1)] == w)
        pick = last + 1;
      for (std::size_t p = 0; pick < 0 && p < r_.size(); ++p)
        if (!used[p] && r_[p] == w) pick = int(p);
      used[std::size_t(pick)] = true;
      --need[w];
      if (!(last >= 0 && pick == last + 1)) ++chunks;
      last = pick;
    }
    return chunks;
  }

  const Tokens& c_;
  const Tokens& r_;
  std::size_t budget_;
  std::map<std::string, std::size_t> need_;
  std::size_t matches_ = 0;
  std::vector<bool> used_;
  std::unordered_map<std::string, int> memo_;
  bool overflow_ = false;
};

}  // namespace detail

inline MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref, std::size_t budget = 200000) {
  return detail::ChunkSearch(cand, ref, budget).run();
}

/// Exact-match unigram F-mean (recall weighted 9:1) with fragmentation
/// penalty 0.5 * (chunks / m)^3. Not comparable to full METEOR.
inline double meteor_lite(const Tokens& cand, const Tokens& ref) {
  if (ref.empty()) throw ValidationError("meteor_lite: empty reference");
  const auto a = meteor_align(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = double(a.matches);
  const double P = m / double(cand.size()), R = m / double(ref.size());
  const double F = P * R / (0.9 * P + 0.1 * R);
  const double frag = double(a.chunks) / m;
  return F * (1.0 - 0.5 * frag * frag * frag);
}

/// Mean over items of the best score against any reference.
inline double meteor_lite_corpus(const std::vector<Tokens>& cands, const std::vector<std::vector<Tokens>>& refs) {
  detail::check_corpus(cands.size(), refs, "meteor_lite");
  double s = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double best = 0;
    for (const auto& r : refs[i]) best = std::max(best, meteor_lite(cands[i], r));
    s += best;
  }
  return s / double(cands.size());
}

// ---- head accuracies -----------------------------------------------------------

/// Running count of thresholded predictions agreeing with 0/1 targets.
struct BinaryAgreement {
  std::size_t agree = 0;
  std::size_t total = 0;

  void add(const std::vector<float>& probs, const std::vector<float>& target, double threshold = 0.5) {
    if (probs.size() != target.size()) {
      throw ValidationError("accuracy: " + std::to_string(probs.size()) + " predictions for " +
                            std::to_string(target.size()) + " targets");
    }
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const float pred = probs[i] >= threshold ? 1.0f : 0.0f;
      agree += pred == target[i] ? 1 : 0;
    }
    total += probs.size();
  }
  double fraction() const {
    if (total == 0) throw ValidationError("accuracy: nothing to score");
    return double(agree) / double(total);
  }
};

/// Frame-level agreement over all snippets; predictions >= 0.5 count as 1.
inline double snippet_accuracy(const std::vector<std::vector<float>>& predicted,
                               const std::vector<std::vector<float>>& gt) {
  if (predicted.size() != gt.size()) throw ValidationError("snippet_accuracy: snippet count mismatch");
  BinaryAgreement a;
  for (std::size_t i = 0; i < gt.size(); ++i) a.add(predicted[i], gt[i]);
  return a.fraction();
}

/// Element-level agreement over the snippets x actobj_dim grid.
inline double actobj_accuracy(const std::vector<std::vector<float>>& predicted,
                              const std::vector<std::vector<float>>& gt) {
  if (predicted.size() != gt.size()) throw ValidationError("actobj_accuracy: snippet count mismatch");
  BinaryAgreement a;
  for (std::size_t i = 0; i < gt.size(); ++i) a.add(predicted[i], gt[i]);
  return a.fraction();
}

// ---- evaluation report -----------------------------------------------------------

inline constexpr const char* kMeteorNote =
    "meteor_lite uses exact unigram matches only; it is not comparable to published METEOR scores";

struct EvalReport {
  double bleu[4] = {0, 0, 0, 0};
  double meteor_lite = 0;
  double cider = 0;
  double snippet_acc = 0;
  double actobj_acc = 0;
  std::size_t videos = 0;
  std::size_t snippets = 0;        ///< GT snippets scored by the head accuracies
  std::size_t caption_items = 0;   ///< corpus items for the caption metrics
  std::string caption_unit;        ///< "sentence" (gt_proposals) or "paragraph" (free)
};

inline json to_json(const EvalReport& r) {
  return {{"note", kMeteorNote},
          {"caption_unit", r.caption_unit},
          {"videos", r.videos},
          {"snippets", r.snippets},
          {"caption_items", r.caption_items},
          {"bleu1", r.bleu[0]},
          {"bleu2", r.bleu[1]},
          {"bleu3", r.bleu[2]},
          {"bleu4", r.bleu[3]},
          {"meteor_lite", r.meteor_lite},
          {"cider", r.cider},
          {"snippet_acc", r.snippet_acc},
          {"actobj_acc", r.actobj_acc}};
}

/// Scores generated paragraphs against the split. In gt_proposals mode each
/// generated sentence is one corpus item against its GT caption; in free mode
/// each paragraph (sentences joined) is one item against the GT paragraph.
/// Head accuracies pair generated step i with GT snippet i; GT snippets
/// without a generated counterpart are scored against all-zero predictions.
inline EvalReport evaluate(const std::vector<GeneratedVideo>& gen, const DatasetSplit& split) {
  if (gen.empty()) throw ValidationError("evaluate: no generated videos");
  EvalReport rep;
  const GenerationMode mode = gen.front().mode;
  std::set<std::string> seen;
  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  BinaryAgreement snip, act;
  for (const auto& gv : gen) {
    if (gv.mode != mode) throw ValidationError("evaluate: generation document mixes modes");
    if (!seen.insert(gv.id).second) throw ValidationError("evaluate: video '" + gv.id + "' appears twice");
    const auto& v = split.video(gv.id);
    const std::size_t T = v.num_frames();
    if (mode == GenerationMode::GtProposals) {
      if (gv.snippets.size() != v.snippets.size()) {
        throw ValidationError("evaluate: video '" + gv.id + "' has " + std::to_string(gv.snippets.size()) +
                              " generated sentences for " + std::to_string(v.snippets.size()) + " GT snippets");
      }
      for (std::size_t i = 0; i < v.snippets.size(); ++i) {
        cands.push_back(split_words(gv.snippets[i].caption));
        refs.push_back({split_words(v.snippets[i].caption)});
      }
    } else {
      Tokens c, r;
      for (const auto& s : gv.snippets)
        for (auto& w : split_words(s.caption)) c.push_back(std::move(w));
      for (const auto& s : v.snippets)
        for (auto& w : split_words(s.caption)) r.push_back(std::move(w));
      cands.push_back(std::move(c));
      refs.push_back({std::move(r)});
    }
    const std::size_t width = split.labels.width();
    for (std::size_t i = 0; i < v.snippets.size(); ++i) {
      const bool have = i < gv.snippets.size();
      const auto mask = have ? gv.snippets[i].mask : std::vector<float>(T, 0.0f);
      const auto ao = have ? gv.snippets[i].actobj : std::vector<float>(width, 0.0f);
      if (mask.size() != T) {
        throw ValidationError("evaluate: video '" + gv.id + "' step " + std::to_string(i) + " mask has " +
                              std::to_string(mask.size()) + " frames, video has " + std::to_string(T));
      }
      snip.add(mask, v.gt_mask(i));
      act.add(ao, v.snippets[i].actobj_target());
    }
    rep.snippets += v.snippets.size();
  }
  rep.videos = gen.size();
  rep.caption_items = cands.size();
  rep.caption_unit = mode == GenerationMode::GtProposals ? "sentence" : "paragraph";
  for (int n = 1; n <= 4; ++n) rep.bleu[n - 1] = bleu(cands, refs, n);
  rep.meteor_lite = meteor_lite_corpus(cands, refs);
  rep.cider = cider(cands, refs);
  rep.snippet_acc = snip.total ? snip.fraction() : 0.0;
  rep.actobj_acc = act.total ? act.fraction() : 0.0;
  return rep;
}

/// Markdown table in the layout of an ablation table: one row per setting,
/// BLEU@4 / METEOR-lite / CIDEr scaled by 100.
inline std::string ablation_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << "| Setting | B@4 | M | C |\n|---|---:|---:|---:|\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& [name, r] : rows)
    os << "| " << name << " | " << 100 * r.bleu[3] << " | " << 100 * r.meteor_lite << " | " << 100 * r.cider << " |\n";
  os << "\nScores x100. M column: " << kMeteorNote << ".\n";
  return os.str();
}

}  // namespace vidcap
