#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vidcap/error.hpp"

namespace vidcap {

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token. "Pick up the mug." -> {pick, up, the, mug, .}
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s.push_back(' ');
    s += w;
  }
  return s;
}

/// The canonical form tokenize/detokenize round-trips to.
inline std::string normalize_text(std::string_view text) { return join_words(split_words(text)); }

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kPad = 3;
  static constexpr int kReserved = 4;

  Vocabulary() = default;

  /// Tokens get ids 4, 5, ... in the given order; duplicates and reserved
  /// spellings are rejected.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto& t = tokens_[i];
      if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
        throw ValidationError("vocabulary: invalid token '" + t + "'");
      }
      if (!index_.emplace(t, kReserved + int(i)).second) {
        throw ValidationError("vocabulary: duplicate token '" + t + "'");
      }
    }
  }

  std::size_t size() const { return tokens_.size() + kReserved; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::string token(int id) const {
    switch (id) {
      case kBos: return "<bos>";
      case kEos: return "<eos>";
      case kUnk: return "<unk>";
      case kPad: return "<pad>";
      default: break;
    }
    if (id < 0 || std::size_t(id) >= size()) throw ValidationError("vocabulary: id out of range");
    return tokens_[std::size_t(id - kReserved)];
  }

  /// One token per line; line n (0-based) is id n + 4.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary " + path);
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      toks.push_back(line);
    }
    return Vocabulary(std::move(toks));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline constexpr std::size_t kMaxSentenceTokens = 150;

/// [BOS, w1..wn, EOS]; OOV words map to UNK; at most max_len interior tokens.
inline std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab,
                                 std::size_t max_len = kMaxSentenceTokens) {
  std::vector<int> ids{Vocabulary::kBos};
  for (const auto& w : split_words(text)) {
    if (ids.size() - 1 >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

/// Inverse of tokenize on in-vocabulary text. Stops at the first EOS and
/// skips BOS/PAD.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    words.push_back(vocab.token(id));
  }
  return join_words(words);
}

/// Frequency-descending, then lexicographic. Tokens seen fewer than
/// min_count times are dropped.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
  if (corpus.empty()) throw ValidationError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& w : split_words(line)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> toks;
  for (auto& [w, c] : items)
    if (c >= min_count) toks.push_back(w);
  if (toks.empty()) throw ValidationError("build_vocab: no token reaches min_count");
  return Vocabulary(std::move(toks));
}

}  // namespace vidcap
