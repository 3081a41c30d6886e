#pragma once

// Per-step conditioning vectors derived from the previous sentence:
//   m  explicit commonsense  (relation inferences rendered to one string)
//   g  implicit commonsense  (a one-sentence completion)
//   h  hidden feature        (the previous sentence itself)
// Each is a 384-wide sentence embedding.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vidcap/error.hpp"
#include "vidcap/grammar.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

inline constexpr std::size_t kContextDim = 384;

inline std::vector<std::string> default_relations() {
  return {"AtLocation", "ObjectUse", "xNeed",       "xEffect", "xWant",   "xIntent",
          "isAfter",    "isBefore",  "HasSubEvent", "Causes",  "oEffect", "oWant"};
}

/// "AtLocation" -> "At Location", "xEffect" -> "Effect", "oWant" -> "Other Want".
inline std::string natural_relation_name(const std::string& rel) {
  std::string body = rel;
  std::string prefix;
  if (body.size() > 1 && std::isupper(static_cast<unsigned char>(body[1]))) {
    if (body[0] == 'x') body.erase(0, 1);
    else if (body[0] == 'o') {
      body.erase(0, 1);
      prefix = "Other ";
    }
  }
  std::string out;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const auto c = static_cast<unsigned char>(body[i]);
    if (i > 0 && std::isupper(c)) out.push_back(' ');
    out.push_back(i == 0 ? char(std::toupper(c)) : body[i]);
  }
  return prefix + out;
}

struct RelationInference {
  std::string relation;
  std::string text;
  friend bool operator==(const RelationInference&, const RelationInference&) = default;
};

/// "<Name> <text> <PAD> <Name> <text> ..." in the order of `relations`.
/// Inferences for relations outside that list are rejected.
inline std::string render_inference_string(const std::vector<RelationInference>& inferences,
                                           const std::vector<std::string>& relations = default_relations()) {
  for (const auto& inf : inferences) {
    if (std::find(relations.begin(), relations.end(), inf.relation) == relations.end()) {
      throw ValidationError("unknown relation '" + inf.relation + "'");
    }
  }
  std::string out;
  for (const auto& rel : relations) {
    for (const auto& inf : inferences) {
      if (inf.relation != rel) continue;
      if (!out.empty()) out += " <PAD> ";
      out += natural_relation_name(rel);
      if (!inf.text.empty()) out += " " + inf.text;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sentence embedder

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Hashed bag-of-words followed by a fixed Gaussian random projection and L2
/// normalisation. Each distinct token hashes to its own projection row,
/// generated on demand from (token hash, seed). Empty text embeds to zeros.
class SentenceEmbedder {
 public:
  explicit SentenceEmbedder(std::uint64_t seed = 0x5EEDull, std::size_t dim = kContextDim)
      : seed_(seed), dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<float> embed(std::string_view text) const {
    std::map<std::string, int> bag;
    for (auto& w : split_words(text)) ++bag[w];
    std::vector<double> acc(dim_, 0.0);
    for (const auto& [word, count] : bag) {
      std::uint64_t state = detail::fnv1a64(word) ^ (seed_ * 0xD1B54A32D192ED03ull);
      for (std::size_t i = 0; i < dim_; i += 2) {
        // Box-Muller on two 53-bit uniforms
        const double u1 = (double(detail::splitmix64(state) >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = double(detail::splitmix64(state) >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        acc[i] += count * r * std::cos(6.283185307179586 * u2);
        if (i + 1 < dim_) acc[i + 1] += count * r * std::sin(6.283185307179586 * u2);
      }
    }
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    std::vector<float> out(dim_, 0.0f);
    if (norm == 0.0) return out;
    for (std::size_t i = 0; i < dim_; ++i) out[i] = float(acc[i] / norm);
    return out;
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Providers

/// null: empty inferences; toy: built-in grammar knowledge; file: texts
/// precomputed offline; vectors: embeddings stored per snippet in the
/// manifest (synthetic oracle or exported sentence-transformer vectors).
enum class ProviderKind { Null, Toy, File, Vectors };

inline ProviderKind parse_provider_kind(const std::string& s) {
  if (s == "null") return ProviderKind::Null;
  if (s == "toy") return ProviderKind::Toy;
  if (s == "file") return ProviderKind::File;
  if (s == "vectors") return ProviderKind::Vectors;
  throw ValidationError("unknown provider kind '" + s + "' (expected null|toy|file|vectors)");
}

inline std::string to_string(ProviderKind k) {
  switch (k) {
    case ProviderKind::Null: return "null";
    case ProviderKind::Toy: return "toy";
    case ProviderKind::File: return "file";
    case ProviderKind::Vectors: return "vectors";
  }
  return "?";
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

/// Toy knowledge-base file: {"verbs": {verb: {relation: text}},
///                           "objects": {object: {relation: text}}}
inline ToyKnowledgeBase load_toy_kb(const std::string& path) {
  const auto j = read_json_file(path);
  ToyKnowledgeBase kb;
  if (j.contains("verbs")) kb.by_verb = j.at("verbs").get<decltype(kb.by_verb)>();
  if (j.contains("objects")) kb.by_object = j.at("objects").get<decltype(kb.by_object)>();
  return kb;
}

class ExplicitProvider {
 public:
  static ExplicitProvider null(std::vector<std::string> relations = default_relations()) {
    return ExplicitProvider(ProviderKind::Null, std::move(relations));
  }
  static ExplicitProvider vectors(std::vector<std::string> relations = default_relations()) {
    return ExplicitProvider(ProviderKind::Vectors, std::move(relations));
  }
  static ExplicitProvider toy(Grammar grammar = default_grammar(), ToyKnowledgeBase kb = default_toy_kb(),
                              std::vector<std::string> relations = default_relations()) {
    ExplicitProvider p(ProviderKind::Toy, std::move(relations));
    p.grammar_ = std::move(grammar);
    p.kb_ = std::move(kb);
    return p;
  }
  /// File: {sentence: {relation: text}}; keys are matched after normalisation.
  static ExplicitProvider file(const std::string& path, std::vector<std::string> relations = default_relations()) {
    ExplicitProvider p(ProviderKind::File, std::move(relations));
    const auto j = read_json_file(path);
    for (auto& [k, v] : j.items()) {
      p.table_[normalize_text(k)] = v.get<std::map<std::string, std::string>>();
    }
    return p;
  }

  ProviderKind kind() const { return kind_; }
  const std::vector<std::string>& relations() const { return relations_; }

  /// One inference per configured relation, in configuration order.
  std::vector<RelationInference> infer(const std::string& sentence) const {
    if (normalize_text(sentence).empty()) throw ValidationError("explicit_inferences: empty sentence");
    std::vector<RelationInference> out;
    out.reserve(relations_.size());
    switch (kind_) {
      case ProviderKind::Null:
        for (const auto& r : relations_) out.push_back({r, ""});
        break;
      case ProviderKind::Toy: {
        const auto parsed = grammar_.parse(sentence);
        for (const auto& r : relations_) out.push_back({r, parsed ? toy_text(*parsed, r) : ""});
        break;
      }
      case ProviderKind::File: {
        const std::string key = normalize_text(sentence);
        auto it = table_.find(key);
        if (it == table_.end()) throw ValidationError("explicit provider has no entry for sentence '" + key + "'");
        for (const auto& r : relations_) {
          auto jt = it->second.find(r);
          out.push_back({r, jt == it->second.end() ? "" : jt->second});
        }
        break;
      }
      case ProviderKind::Vectors:
        throw ValidationError("explicit provider 'vectors' has no text inferences");
    }
    return out;
  }

 private:
  ExplicitProvider(ProviderKind k, std::vector<std::string> rel) : kind_(k), relations_(std::move(rel)) {}

  std::string toy_text(const ParsedInstruction& p, const std::string& rel) const {
    const std::string& obj = grammar_.objects[p.object];
    if (auto o = kb_.by_object.find(obj); o != kb_.by_object.end()) {
      if (auto t = o->second.find(rel); t != o->second.end()) return t->second;
    }
    if (auto v = kb_.by_verb.find(grammar_.actions[p.action]); v != kb_.by_verb.end()) {
      if (auto t = v->second.find(rel); t != v->second.end()) {
        std::string s = t->second;
        for (auto pos = s.find("{obj}"); pos != std::string::npos; pos = s.find("{obj}"))
          s.replace(pos, 5, obj);
        return s;
      }
    }
    return "";
  }

  ProviderKind kind_;
  std::vector<std::string> relations_;
  Grammar grammar_;
  ToyKnowledgeBase kb_;
  std::map<std::string, std::map<std::string, std::string>> table_;
};

class ImplicitProvider {
 public:
  static ImplicitProvider null() { return ImplicitProvider(ProviderKind::Null); }
  static ImplicitProvider vectors() { return ImplicitProvider(ProviderKind::Vectors); }
  static ImplicitProvider toy(Grammar grammar = default_grammar()) {
    ImplicitProvider p(ProviderKind::Toy);
    p.grammar_ = std::move(grammar);
    return p;
  }
  /// File: {sentence: completion}
  static ImplicitProvider file(const std::string& path) {
    ImplicitProvider p(ProviderKind::File);
    const auto j = read_json_file(path);
    for (auto& [k, v] : j.items()) p.table_[normalize_text(k)] = v.get<std::string>();
    return p;
  }

  ProviderKind kind() const { return kind_; }

  std::string complete(const std::string& sentence) const {
    if (normalize_text(sentence).empty()) throw ValidationError("implicit_completion: empty sentence");
    switch (kind_) {
      case ProviderKind::Null: return "";
      case ProviderKind::Toy: {
        const auto parsed = grammar_.parse(sentence);
        if (!parsed) return "";
        return grammar_.instantiate(grammar_.canonical_next[parsed->action], parsed->object);
      }
      case ProviderKind::File: {
        const std::string key = normalize_text(sentence);
        auto it = table_.find(key);
        if (it == table_.end()) throw ValidationError("implicit provider has no entry for sentence '" + key + "'");
        return it->second;
      }
      case ProviderKind::Vectors:
        throw ValidationError("implicit provider 'vectors' has no text completions");
    }
    return "";
  }

 private:
  explicit ImplicitProvider(ProviderKind k) : kind_(k) {}
  ProviderKind kind_;
  Grammar grammar_;
  std::map<std::string, std::string> table_;
};

struct KnowledgeContext {
  std::vector<float> m = std::vector<float>(kContextDim, 0.0f);
  std::vector<float> g = std::vector<float>(kContextDim, 0.0f);
  std::vector<float> h = std::vector<float>(kContextDim, 0.0f);
  friend bool operator==(const KnowledgeContext&, const KnowledgeContext&) = default;
};

struct ProviderSet {
  ExplicitProvider explicit_provider = ExplicitProvider::null();
  ImplicitProvider implicit_provider = ImplicitProvider::null();
  bool hidden = true;  ///< false zeroes h
  SentenceEmbedder embedder;
};

/// Vectors stored for the previous snippet (used by the `vectors` kind).
struct StoredKnowledge {
  const std::vector<float>* explicit_vec = nullptr;
  const std::vector<float>* implicit_vec = nullptr;
};

/// Conditioning for the next sentence. Without a previous sentence (first
/// snippet) all three vectors are zero.
inline KnowledgeContext context_for_step(const std::optional<std::string>& prev_sentence,
                                         const ProviderSet& providers, StoredKnowledge stored = {}) {
  KnowledgeContext ctx;
  if (!prev_sentence) return ctx;
  const auto& emb = providers.embedder;
  auto take = [](const std::vector<float>* v, const char* what) {
    if (v == nullptr || v->empty()) throw ValidationError(std::string("no stored ") + what + " knowledge vector");
    if (v->size() != kContextDim) throw ValidationError(std::string(what) + " knowledge vector has wrong width");
    return *v;
  };
  // An empty previous sentence (a generated caption that was just EOS) still
  // counts as a step; text providers see it as no evidence.
  const bool has_text = !normalize_text(*prev_sentence).empty();

  const auto& ep = providers.explicit_provider;
  if (ep.kind() == ProviderKind::Vectors) {
    ctx.m = take(stored.explicit_vec, "explicit");
  } else if (has_text) {
    ctx.m = emb.embed(render_inference_string(ep.infer(*prev_sentence), ep.relations()));
  } else {
    ctx.m = emb.embed(render_inference_string(ExplicitProvider::null(ep.relations()).infer("-"), ep.relations()));
  }

  const auto& ip = providers.implicit_provider;
  if (ip.kind() == ProviderKind::Vectors) {
    ctx.g = take(stored.implicit_vec, "implicit");
  } else if (has_text) {
    ctx.g = emb.embed(ip.complete(*prev_sentence));
  }

  if (providers.hidden) ctx.h = emb.embed(*prev_sentence);
  return ctx;
}

}  // namespace vidcap
