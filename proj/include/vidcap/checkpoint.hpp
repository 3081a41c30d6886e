#pragma once

// Checkpoint directory:
//   checkpoint.json           config, step, RNG state, parameter table
//   params/<name>.f32         little-endian float32 values, row-major
//   adam/<name>.m.f32, .v.f32 optimizer moments (absent before the first step)

#include <filesystem>
#include <fstream>
#include <string>

#include "vidcap/config.hpp"
#include "vidcap/dataset.hpp"
#include "vidcap/model.hpp"
#include "vidcap/objective.hpp"
#include "vidcap/optim.hpp"

namespace vidcap {

inline constexpr int kCheckpointFormat = 1;

struct Checkpoint {
  ModelParams<float> params;
  AdamState<float> adam;
  std::uint64_t step = 0;
  std::string rng_state;
  json run_config;  ///< effective configuration of the run that wrote it
};

inline void save_checkpoint(const fs::path& dir, ModelParams<float>& params, const AdamState<float>& adam,
                            std::uint64_t step, const std::string& rng_state, const json& run_config) {
  fs::create_directories(dir / "params");
  json j;
  j["format"] = kCheckpointFormat;
  j["step"] = step;
  j["rng_state"] = rng_state;
  j["model"] = to_json(params.config);
  j["run_config"] = run_config;
  j["adam"] = {{"step_count", adam.step_count}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"epsilon", adam.epsilon}};
  const bool has_moments = !adam.first_moment.empty();
  if (has_moments) fs::create_directories(dir / "adam");
  json table = json::array();
  auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto* p = all[i];
    const std::string file = "params/" + p->name + ".f32";
    write_f32_blob(dir / file, p->value.values());
    json e = {{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"file", file}};
    if (has_moments) {
      e["adam_m"] = "adam/" + p->name + ".m.f32";
      e["adam_v"] = "adam/" + p->name + ".v.f32";
      write_f32_blob(dir / e["adam_m"].get<std::string>(), adam.first_moment.at(i).values());
      write_f32_blob(dir / e["adam_v"].get<std::string>(), adam.second_moment.at(i).values());
    }
    table.push_back(e);
  }
  j["parameters"] = table;
  std::ofstream out(dir / "checkpoint.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const auto path = dir / "checkpoint.json";
  const auto raw = read_json_file(path.string());
  const json j = json::parse(raw.dump());
  Checkpoint ck;
  try {
    if (j.at("format").get<int>() != kCheckpointFormat) throw ValidationError(path.string() + ": unsupported format");
    ModelConfig mc;
    read_into(j.at("model"), mc);
    ck.params = init_model_params<float>(mc, 0);
    ck.step = j.at("step").get<std::uint64_t>();
    ck.rng_state = j.at("rng_state").get<std::string>();
    ck.run_config = j.value("run_config", json::object());
    const auto& ja = j.at("adam");
    ck.adam.step_count = ja.at("step_count").get<std::uint64_t>();
    ck.adam.beta1 = ja.at("beta1").get<double>();
    ck.adam.beta2 = ja.at("beta2").get<double>();
    ck.adam.epsilon = ja.at("epsilon").get<double>();
    auto all = ck.params.all();
    const auto& table = j.at("parameters");
    if (table.size() != all.size()) {
      throw ValidationError(path.string() + ": " + std::to_string(table.size()) + " parameters, model needs " +
                            std::to_string(all.size()));
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto* p = all[i];
      const auto& e = table[i];
      const auto name = e.at("name").get<std::string>();
      const auto rows = e.at("rows").get<std::size_t>(), cols = e.at("cols").get<std::size_t>();
      if (name != p->name || rows != p->value.rows() || cols != p->value.cols()) {
        throw ValidationError(path.string() + ": parameter " + std::to_string(i) + " is " + name + " [" +
                              std::to_string(rows) + "x" + std::to_string(cols) + "], expected " + p->name + " " +
                              p->value.shape_str());
      }
      p->value = Tensor<float>(rows, cols, read_f32_blob(dir / e.at("file").get<std::string>(), rows * cols, name));
      if (!p->value.all_finite()) throw NumericError(path.string() + ": non-finite values in " + name);
      if (e.contains("adam_m")) {
        ck.adam.first_moment.emplace_back(rows, cols,
                                          read_f32_blob(dir / e.at("adam_m").get<std::string>(), rows * cols, name));
        ck.adam.second_moment.emplace_back(rows, cols,
                                           read_f32_blob(dir / e.at("adam_v").get<std::string>(), rows * cols, name));
      }
    }
    if (!ck.adam.first_moment.empty() && ck.adam.first_moment.size() != all.size()) {
      throw ValidationError(path.string() + ": optimizer moments missing for some parameters");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return ck;
}

inline void save_trainer(const fs::path& dir, Trainer& t, const json& run_config) {
  save_checkpoint(dir, t.params(), t.adam(), t.steps_done(), rng_state_string(t.dropout_rng()), run_config);
}

/// Trainer continuing exactly where the checkpoint stopped.
inline Trainer resume_trainer(const fs::path& dir, const TrainConfig& cfg, std::vector<PreparedVideo> data) {
  auto ck = load_checkpoint(dir);
  Trainer t(std::move(ck.params), cfg, std::move(data));
  t.restore(ck.step, std::move(ck.adam), ck.rng_state);
  return t;
}

}  // namespace vidcap
