#pragma once

// Dataset schema and on-disk formats.
//
// Feature blobs are raw little-endian float32, row-major [T x feature_dim],
// no header. Knowledge blobs are 384 float32 values. The manifest is a JSON
// document naming every blob relative to the manifest's directory.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vidcap/error.hpp"
#include "vidcap/knowledge.hpp"
#include "vidcap/tensor.hpp"
#include "vidcap/text.hpp"

namespace vidcap {

namespace fs = std::filesystem;

inline constexpr std::size_t kDefaultMaxFrames = 150;
inline constexpr std::size_t kDefaultMaxSnippets = 20;

// ---- blobs -----------------------------------------------------------------

inline void write_f32_blob(const fs::path& path, std::span<const float> values) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    char b[4];
    std::memcpy(b, &bits, 4);
    out.write(b, 4);
  }
}

inline std::uintmax_t file_size_or_throw(const fs::path& path, const std::string& owner) {
  std::error_code ec;
  const auto sz = fs::file_size(path, ec);
  if (ec) throw ValidationError("video '" + owner + "': missing blob " + path.string());
  return sz;
}

inline std::vector<float> read_f32_blob(const fs::path& path, std::size_t expected_values,
                                        const std::string& owner) {
  const auto sz = file_size_or_throw(path, owner);
  if (sz != expected_values * 4) {
    throw ValidationError("video '" + owner + "': blob " + path.string() + " has " + std::to_string(sz) +
                          " bytes, expected " + std::to_string(expected_values * 4));
  }
  std::ifstream in(path, std::ios::binary);
  std::vector<float> out(expected_values);
  for (auto& v : out) {
    char b[4];
    in.read(b, 4);
    std::uint32_t bits;
    std::memcpy(&bits, b, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v = std::bit_cast<float>(bits);
  }
  if (!in) throw IoError("short read on " + path.string());
  return out;
}

// ---- records ---------------------------------------------------------------

struct SnippetAnnotation {
  std::size_t start_frame = 0;  // inclusive
  std::size_t end_frame = 0;    // exclusive
  std::string caption;
  std::vector<std::uint8_t> action_labels;
  std::vector<std::uint8_t> object_labels;
  std::vector<std::uint8_t> pseudo_labels;
  // Knowledge derived from this snippet's sentence, conditioning the next
  // one. Empty when the manifest carries none.
  std::vector<float> explicit_knowledge;
  std::vector<float> implicit_knowledge;

  std::vector<float> actobj_target() const {
    std::vector<float> t;
    for (auto* part : {&action_labels, &object_labels, &pseudo_labels})
      for (auto v : *part) t.push_back(float(v));
    return t;
  }

  friend bool operator==(const SnippetAnnotation&, const SnippetAnnotation&) = default;
};

struct VideoRecord {
  std::string id;
  Tensor<float> features;  // T x feature_dim
  std::vector<SnippetAnnotation> snippets;

  std::size_t num_frames() const { return features.rows(); }

  /// Per-frame 0/1 membership of snippet i.
  std::vector<float> gt_mask(std::size_t i) const {
    std::vector<float> m(num_frames(), 0.0f);
    const auto& s = snippets.at(i);
    for (std::size_t t = s.start_frame; t < s.end_frame; ++t) m[t] = 1.0f;
    return m;
  }

  friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

struct LabelSpace {
  std::vector<std::string> actions;
  std::vector<std::string> objects;
  std::vector<std::string> pseudo;
  std::size_t width() const { return actions.size() + objects.size() + pseudo.size(); }
  std::string name(std::size_t i) const {
    if (i < actions.size()) return actions[i];
    i -= actions.size();
    if (i < objects.size()) return objects[i];
    return pseudo.at(i - objects.size());
  }
  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;
};

struct DatasetSplit {
  std::string dataset = "synthetic";
  std::string split = "train";
  std::size_t feature_dim = 0;
  std::string vocabulary_file = "vocab.txt";
  LabelSpace labels;
  std::vector<VideoRecord> videos;

  const VideoRecord& video(const std::string& id) const {
    for (const auto& v : videos)
      if (v.id == id) return v;
    throw ValidationError("unknown video id '" + id + "'");
  }

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

struct DataLimits {
  std::size_t max_frames = kDefaultMaxFrames;
  std::size_t max_snippets = kDefaultMaxSnippets;
};

/// Structural checks shared by the loader and the synthetic generator.
inline void validate_video(const VideoRecord& v, const LabelSpace& labels, const DataLimits& lim) {
  const std::string& id = v.id;
  if (v.num_frames() == 0) throw ValidationError("video '" + id + "': no frames");
  if (v.num_frames() > lim.max_frames) {
    throw ValidationError("video '" + id + "': " + std::to_string(v.num_frames()) + " frames exceeds max_frames " +
                          std::to_string(lim.max_frames));
  }
  if (v.snippets.size() > lim.max_snippets) {
    throw ValidationError("video '" + id + "': " + std::to_string(v.snippets.size()) +
                          " snippets exceeds max_snippets " + std::to_string(lim.max_snippets));
  }
  std::vector<int> used(v.num_frames(), 0);
  for (std::size_t i = 0; i < v.snippets.size(); ++i) {
    const auto& s = v.snippets[i];
    const std::string where = "video '" + id + "' snippet " + std::to_string(i);
    if (s.start_frame >= s.end_frame || s.end_frame > v.num_frames()) {
      throw ValidationError(where + ": frame range [" + std::to_string(s.start_frame) + "," +
                            std::to_string(s.end_frame) + ") outside [0," + std::to_string(v.num_frames()) + ")");
    }
    for (std::size_t t = s.start_frame; t < s.end_frame; ++t) {
      if (used[t]++) throw ValidationError(where + ": overlaps another snippet at frame " + std::to_string(t));
    }
    auto check_bits = [&](const std::vector<std::uint8_t>& b, std::size_t width, const char* what) {
      if (b.size() != width) {
        throw ValidationError(where + ": " + what + " has width " + std::to_string(b.size()) + ", expected " +
                              std::to_string(width));
      }
      for (auto x : b)
        if (x > 1) throw ValidationError(where + ": " + what + " must be binary");
    };
    check_bits(s.action_labels, labels.actions.size(), "action_labels");
    check_bits(s.object_labels, labels.objects.size(), "object_labels");
    check_bits(s.pseudo_labels, labels.pseudo.size(), "pseudo_labels");
    for (auto* k : {&s.explicit_knowledge, &s.implicit_knowledge}) {
      if (!k->empty() && k->size() != kContextDim) throw ValidationError(where + ": knowledge vector width");
    }
  }
}

// ---- manifest --------------------------------------------------------------

inline std::string feature_blob_name(const std::string& video_id) { return "features/" + video_id + ".f32"; }
inline std::string knowledge_blob_name(const std::string& video_id, std::size_t snippet, const char* kind) {
  return "knowledge/" + video_id + "_" + std::to_string(snippet) + "_" + kind + ".f32";
}

/// Writes blobs and the manifest under `dir`. Returns the manifest path.
inline fs::path save_manifest(const DatasetSplit& split, const fs::path& dir,
                              const std::string& manifest_name = "manifest.json") {
  fs::create_directories(dir);
  nlohmann::ordered_json j;
  j["dataset"] = split.dataset;
  j["split"] = split.split;
  j["feature_dim"] = split.feature_dim;
  j["vocabulary"] = split.vocabulary_file;
  j["labels"] = {{"actions", split.labels.actions}, {"objects", split.labels.objects}, {"pseudo", split.labels.pseudo}};
  j["videos"] = nlohmann::ordered_json::array();
  for (const auto& v : split.videos) {
    if (v.features.cols() != split.feature_dim) {
      throw ValidationError("video '" + v.id + "': feature width " + std::to_string(v.features.cols()) +
                            " != feature_dim " + std::to_string(split.feature_dim));
    }
    nlohmann::ordered_json jv;
    jv["id"] = v.id;
    jv["num_frames"] = v.num_frames();
    jv["features"] = feature_blob_name(v.id);
    write_f32_blob(dir / feature_blob_name(v.id), v.features.values());
    jv["snippets"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < v.snippets.size(); ++i) {
      const auto& s = v.snippets[i];
      nlohmann::ordered_json js;
      js["start_frame"] = s.start_frame;
      js["end_frame"] = s.end_frame;
      js["caption"] = s.caption;
      js["action_labels"] = s.action_labels;
      js["object_labels"] = s.object_labels;
      js["pseudo_labels"] = s.pseudo_labels;
      if (!s.explicit_knowledge.empty() || !s.implicit_knowledge.empty()) {
        nlohmann::ordered_json jk = nlohmann::ordered_json::object();
        if (!s.explicit_knowledge.empty()) {
          jk["explicit"] = knowledge_blob_name(v.id, i, "explicit");
          write_f32_blob(dir / knowledge_blob_name(v.id, i, "explicit"), s.explicit_knowledge);
        }
        if (!s.implicit_knowledge.empty()) {
          jk["implicit"] = knowledge_blob_name(v.id, i, "implicit");
          write_f32_blob(dir / knowledge_blob_name(v.id, i, "implicit"), s.implicit_knowledge);
        }
        js["knowledge"] = jk;
      }
      jv["snippets"].push_back(js);
    }
    j["videos"].push_back(jv);
  }
  const fs::path path = dir / manifest_name;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  return path;
}

/// Loads and validates a manifest eagerly. Every failure names the video.
inline DatasetSplit load_manifest(const fs::path& path, const DataLimits& lim = {}) {
  const auto j = read_json_file(path.string());
  const fs::path base = path.parent_path();
  DatasetSplit split;
  try {
    split.dataset = j.at("dataset").get<std::string>();
    split.split = j.at("split").get<std::string>();
    split.feature_dim = j.at("feature_dim").get<std::size_t>();
    split.vocabulary_file = j.at("vocabulary").get<std::string>();
    const auto& jl = j.at("labels");
    split.labels.actions = jl.at("actions").get<std::vector<std::string>>();
    split.labels.objects = jl.at("objects").get<std::vector<std::string>>();
    split.labels.pseudo = jl.at("pseudo").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  if (split.feature_dim == 0) throw ValidationError(path.string() + ": feature_dim must be positive");

  for (const auto& jv : j.at("videos")) {
    VideoRecord v;
    v.id = jv.value("id", std::string{});
    try {
      const auto T = jv.at("num_frames").get<std::size_t>();
      if (T == 0) throw ValidationError("video '" + v.id + "': num_frames must be positive");
      if (T > lim.max_frames) {
        throw ValidationError("video '" + v.id + "': " + std::to_string(T) + " frames exceeds max_frames " +
                              std::to_string(lim.max_frames));
      }
      auto data = read_f32_blob(base / jv.at("features").get<std::string>(), T * split.feature_dim, v.id);
      v.features = Tensor<float>(T, split.feature_dim, std::move(data));
      std::size_t i = 0;
      for (const auto& js : jv.at("snippets")) {
        SnippetAnnotation s;
        s.start_frame = js.at("start_frame").get<std::size_t>();
        s.end_frame = js.at("end_frame").get<std::size_t>();
        s.caption = js.at("caption").get<std::string>();
        s.action_labels = js.at("action_labels").get<std::vector<std::uint8_t>>();
        s.object_labels = js.at("object_labels").get<std::vector<std::uint8_t>>();
        s.pseudo_labels = js.at("pseudo_labels").get<std::vector<std::uint8_t>>();
        if (js.contains("knowledge")) {
          const auto& jk = js.at("knowledge");
          if (jk.contains("explicit"))
            s.explicit_knowledge = read_f32_blob(base / jk.at("explicit").get<std::string>(), kContextDim, v.id);
          if (jk.contains("implicit"))
            s.implicit_knowledge = read_f32_blob(base / jk.at("implicit").get<std::string>(), kContextDim, v.id);
        }
        v.snippets.push_back(std::move(s));
        ++i;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("video '" + v.id + "': " + e.what());
    }
    validate_video(v, split.labels, lim);
    split.videos.push_back(std::move(v));
  }
  return split;
}

}  // namespace vidcap
