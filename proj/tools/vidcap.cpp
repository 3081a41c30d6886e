// vidcap: synth | train | generate | eval | gradcheck
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
// 3 a check (gradcheck) ran and failed.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vidcap/checkpoint.hpp"
#include "vidcap/config.hpp"
#include "vidcap/generation.hpp"
#include "vidcap/metrics.hpp"
#include "vidcap/pipeline.hpp"
#include "vidcap/presets.hpp"
#include "vidcap/synth.hpp"

namespace fs = std::filesystem;
using namespace vidcap;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;

/// Creates dir; a non-empty existing dir needs force (files are then overwritten in place).
void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ValidationError("output directory " + dir.string() + " is not empty (use --force to write into it)");
  }
  fs::create_directories(dir);
}

RunConfig base_config(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

void write_effective_config(const fs::path& dir, const RunConfig& cfg) { write_json_file(dir / "config.json", to_json(cfg)); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

void print_report(const EvalReport& r) {
  std::cout << "videos " << r.videos << ", snippets " << r.snippets << ", caption unit " << r.caption_unit << "\n"
            << "BLEU@1-4 " << fmt(r.bleu[0]) << " " << fmt(r.bleu[1]) << " " << fmt(r.bleu[2]) << " "
            << fmt(r.bleu[3]) << "\n"
            << "METEOR-lite " << fmt(r.meteor_lite) << "  CIDEr " << fmt(r.cider) << "\n"
            << "snippet acc " << fmt(r.snippet_acc) << "  action-object acc " << fmt(r.actobj_acc) << "\n"
            << "(" << kMeteorNote << ")\n";
}

// ---- synth ---------------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> num_videos, snippets, frames, feature_dim;
  std::optional<std::string> split;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  RunConfig cfg = base_config(a.config);
  if (a.seed) cfg.synth.seed = *a.seed;
  if (a.num_videos) cfg.synth.num_videos = *a.num_videos;
  if (a.snippets) cfg.synth.snippets_per_video = *a.snippets;
  if (a.frames) cfg.synth.frames_per_snippet = *a.frames;
  if (a.feature_dim) cfg.synth.feature_dim = *a.feature_dim;
  if (a.split) cfg.synth.split = *a.split;
  const auto res = synth_generate(cfg.synth);
  prepare_output_dir(a.out, a.force);
  const auto manifest = save_manifest(res.split, a.out);
  res.vocab.save((fs::path(a.out) / res.split.vocabulary_file).string());
  write_effective_config(a.out, cfg);
  std::size_t snippets = 0;
  for (const auto& v : res.split.videos) snippets += v.snippets.size();
  std::cout << "wrote " << manifest.string() << ": " << res.split.videos.size() << " videos, " << snippets
            << " snippets, feature_dim " << res.split.feature_dim << ", vocabulary " << res.vocab.size()
            << " ids, action-object width " << res.split.labels.width() << "\n";
  return 0;
}

// ---- shared provider flags ---------------------------------------------------------

struct ProviderFlags {
  std::optional<std::string> explicit_kind, implicit_kind, explicit_file, implicit_file;
  std::optional<bool> hidden;

  void add(CLI::App* app) {
    app->add_option("--explicit", explicit_kind, "explicit commonsense provider: null|toy|file|vectors");
    app->add_option("--implicit", implicit_kind, "implicit commonsense provider: null|toy|file|vectors");
    app->add_option("--explicit-file", explicit_file, "JSON of precomputed explicit inferences");
    app->add_option("--implicit-file", implicit_file, "JSON of precomputed implicit completions");
    app->add_option("--hidden", hidden, "use the hidden feature of the previous sentence (true|false)");
  }
  void apply(ProviderConfig& p) const {
    if (explicit_kind) p.explicit_kind = *explicit_kind;
    if (implicit_kind) p.implicit_kind = *implicit_kind;
    if (explicit_file) p.explicit_file = *explicit_file;
    if (implicit_file) p.implicit_file = *implicit_file;
    if (hidden) p.hidden = *hidden;
  }
};

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, train, val, vocab, resume;
  std::optional<std::size_t> max_steps, warmup, batch_size, checkpoint_every, eval_every;
  std::optional<std::uint64_t> seed, train_seed;
  std::optional<double> lambda_snippet, lambda_actobj, lambda_sentence, lr_scale;
  ProviderFlags providers;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = base_config(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (!a.train.empty()) cfg.data.train = a.train;
  if (!a.val.empty()) cfg.data.val = a.val;
  if (!a.vocab.empty()) cfg.data.vocab = a.vocab;
  if (a.seed) cfg.seed = *a.seed;
  if (a.train_seed) cfg.train.seed = *a.train_seed;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  if (a.warmup) cfg.train.warmup_steps = *a.warmup;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.eval_every) cfg.train.eval_every = *a.eval_every;
  if (a.lambda_snippet) cfg.train.weights.snippet = *a.lambda_snippet;
  if (a.lambda_actobj) cfg.train.weights.actobj = *a.lambda_actobj;
  if (a.lambda_sentence) cfg.train.weights.sentence = *a.lambda_sentence;
  if (a.lr_scale) cfg.train.lr_scale = *a.lr_scale;
  a.providers.apply(cfg.providers);
  if (cfg.data.train.empty()) throw ValidationError("data.train is required (config or --train)");
  cfg.train.validate();
  cfg.generation.validate();

  const auto train = load_data(cfg.data.train, cfg.data.vocab);
  std::optional<LoadedData> val;
  if (!cfg.data.val.empty()) {
    val = load_data(cfg.data.val, cfg.data.vocab);
    if (!(val->vocab == train.vocab)) throw ValidationError("validation vocabulary differs from the training one");
  }
  cfg.model = resolve_model_config(cfg.model, train.split, train.vocab);
  const auto providers = build_providers(cfg.providers);
  auto data = prepare_split(train.split, providers, train.vocab);

  const fs::path out = cfg.output_dir;
  prepare_output_dir(out, a.force);
  write_effective_config(out, cfg);
  const json run_json = to_json(cfg);

  std::optional<Trainer> trainer;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    if (!(to_json(ck.params.config) == to_json(cfg.model))) {
      throw ValidationError("checkpoint model config differs from the run's model config");
    }
    trainer.emplace(std::move(ck.params), cfg.train, std::move(data));
    trainer->restore(ck.step, std::move(ck.adam), ck.rng_state);
    std::cout << "resumed from " << a.resume << " at step " << ck.step << "\n";
  } else {
    trainer.emplace(init_model_params<float>(cfg.model, cfg.seed), cfg.train, std::move(data));
  }
  Trainer& t = *trainer;

  std::ofstream log(out / "train_log.jsonl", std::ios::binary);
  std::ofstream eval_log;
  if (val && cfg.train.eval_every > 0) eval_log.open(out / "eval_log.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot write " + (out / "train_log.jsonl").string());

  const auto start = std::chrono::steady_clock::now();
  std::optional<StepResult> first, last;
  while (t.steps_done() < cfg.train.max_steps) {
    const auto r = t.step();
    if (!first) first = r;
    last = r;
    log << step_log_json(r).dump() << '\n';
    const auto s = r.step;
    if (s % 100 == 0 || s == cfg.train.max_steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "step " << s << " loss " << fmt(r.loss.total) << " (snippet " << fmt(r.loss.snippet_loss)
                << ", actobj " << fmt(r.loss.actobj_loss) << ", sentence " << fmt(r.loss.sentence_loss) << ") lr "
                << std::scientific << std::setprecision(3) << r.lr << std::defaultfloat << "  " << fmt(secs, 1)
                << "s\n";
    }
    if (cfg.train.checkpoint_every > 0 && s % cfg.train.checkpoint_every == 0) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << s;
      save_trainer(out / "checkpoints" / name.str(), t, run_json);
    }
    if (eval_log.is_open() && s % cfg.train.eval_every == 0) {
      const auto rep = evaluate_model(val->split, t.params(), providers, val->vocab, cfg.generation);
      json j = to_json(rep);
      j["step"] = s;
      eval_log << j.dump() << '\n';
      std::cout << "  held-out BLEU@4 " << fmt(rep.bleu[3]) << "\n";
    }
  }
  save_trainer(out / "checkpoint", t, run_json);
  if (first && last) {
    std::cout << "trained " << t.steps_done() << " steps; loss " << fmt(first->loss.total) << " -> "
              << fmt(last->loss.total) << "; checkpoint " << (out / "checkpoint").string() << "\n";
  }
  return 0;
}

// ---- generate ---------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, data, vocab, out, config;
  std::optional<std::string> mode;
  std::optional<double> stop_threshold;
  std::optional<std::size_t> max_snippets;
  std::vector<std::string> videos;
  ProviderFlags providers;
  bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  RunConfig cfg = a.config.empty() ? run_config_from_json(ck.run_config) : load_run_config(a.config);
  cfg.model = ck.params.config;
  if (a.mode) cfg.generation.mode = parse_generation_mode(*a.mode);
  if (a.stop_threshold) cfg.generation.stop_threshold = *a.stop_threshold;
  if (a.max_snippets) cfg.generation.max_snippets = *a.max_snippets;
  a.providers.apply(cfg.providers);
  cfg.generation.validate();
  cfg.data.val = a.data;
  if (!a.vocab.empty()) cfg.data.vocab = a.vocab;

  auto data = load_data(a.data, cfg.data.vocab);
  resolve_model_config(cfg.model, data.split, data.vocab);
  if (!a.videos.empty()) {
    DatasetSplit subset = data.split;
    subset.videos.clear();
    for (const auto& id : a.videos) subset.videos.push_back(data.split.video(id));
    data.split = std::move(subset);
  }
  const auto providers = build_providers(cfg.providers);
  const auto outs = generate_split(data.split, ck.params, providers, data.vocab, cfg.generation);

  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) / "generation" : fs::path(a.out);
  cfg.output_dir = out.string();
  prepare_output_dir(out, a.force);
  write_json_file(out / "generation.json", generation_to_json(outs, data.split.labels, cfg.generation.top_k));
  write_effective_config(out, cfg);
  std::size_t sentences = 0;
  for (const auto& o : outs) sentences += o.size();
  std::cout << "generated " << sentences << " sentences for " << outs.size() << " videos ("
            << to_string(cfg.generation.mode) << ") -> " << (out / "generation.json").string() << "\n";
  for (const auto& o : outs) {
    std::cout << o.id << ":";
    for (const auto& c : o.captions) std::cout << " [" << c << "]";
    std::cout << "\n";
  }
  return 0;
}

// ---- eval ------------------------------------------------------------------------

struct EvalArgs {
  std::string data, vocab, out;
  std::vector<std::string> gens;
  bool force = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto split = load_manifest(a.data);
  std::vector<std::pair<std::string, EvalReport>> rows;
  for (const auto& spec : a.gens) {
    const auto eq = spec.find('=');
    const std::string name = eq == std::string::npos ? fs::path(spec).parent_path().filename().string() : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    const auto doc = read_json_file(path);
    const auto gen = generation_from_json(json::parse(doc.dump()), path);
    rows.emplace_back(name.empty() ? path : name, evaluate(gen, split));
  }
  json j;
  if (rows.size() == 1) {
    j = to_json(rows[0].second);
  } else {
    for (const auto& [name, rep] : rows) j[name] = to_json(rep);
  }
  if (!a.out.empty()) {
    prepare_output_dir(a.out, a.force);
    write_json_file(fs::path(a.out) / "eval.json", j);
    json provenance = {{"data", a.data}, {"generations", a.gens}};
    write_json_file(fs::path(a.out) / "config.json", provenance);
    if (rows.size() > 1) {
      std::ofstream md(fs::path(a.out) / "ablation.md", std::ios::binary);
      md << ablation_table(rows);
    }
  }
  for (const auto& [name, rep] : rows) {
    std::cout << "== " << name << "\n";
    print_report(rep);
  }
  if (rows.size() > 1) std::cout << "\n" << ablation_table(rows);
  return 0;
}

// ---- gradcheck ----------------------------------------------------------------------

struct GradcheckArgs {
  double tol = 1e-5;
  std::uint64_t seed = 3;
  std::size_t max_entries = 0;
  double dropout = 0.0;
  std::string corrupt_op;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  auto setup = gradcheck_setup(a.seed);
  setup.model.dropout = a.dropout;
  GradCheckOptions opts;
  opts.max_entries_per_block = a.max_entries;
  if (!a.corrupt_op.empty()) {
    opts.backward_hook = [op = a.corrupt_op](const std::string& name, Tensor<double>& grad) {
      if (name == op)
        for (auto& v : grad.values()) v *= 1.01;
    };
  }
  const auto start = std::chrono::steady_clock::now();
  const auto res = run_model_gradcheck(setup, a.tol, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::size_t entries = 0;
  for (const auto& b : res.report.blocks) {
    entries += b.entries_checked;
    std::cout << std::left << std::setw(28) << b.name << " entries " << std::setw(6) << b.entries_checked
              << " rel_err " << std::scientific << std::setprecision(2) << b.rel_error << " scale " << b.scale
              << std::defaultfloat << "\n";
  }
  for (const auto& name : res.unused_blocks) std::cout << "block never read by the loss: " << name << "\n";
  std::cout << (res.passed() ? "PASS" : "FAIL") << ": " << res.report.blocks.size() << " blocks, " << entries
            << " entries, max relative error " << std::scientific << res.report.max_rel_error << " (tol " << a.tol
            << "), " << std::defaultfloat << fmt(secs, 1) << "s\n";
  return res.passed() ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Commonsense-conditioned multi-sentence video captioning"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--config", sa.config, "run config JSON (its synth section is used)");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--seed", sa.seed);
  synth->add_option("--num-videos", sa.num_videos);
  synth->add_option("--snippets-per-video", sa.snippets);
  synth->add_option("--frames-per-snippet", sa.frames);
  synth->add_option("--feature-dim", sa.feature_dim);
  synth->add_option("--split", sa.split, "split name, also the video id prefix");
  synth->add_flag("--force", sa.force, "write into a non-empty output directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", ta.config, "run config JSON");
  train->add_option("--out", ta.out, "run directory (overrides output_dir)");
  train->add_option("--train", ta.train, "training manifest");
  train->add_option("--val", ta.val, "held-out manifest for periodic evaluation");
  train->add_option("--vocab", ta.vocab, "vocabulary file (default: the manifest's)");
  train->add_option("--resume", ta.resume, "checkpoint directory to continue from");
  train->add_option("--seed", ta.seed, "model initialisation seed");
  train->add_option("--train-seed", ta.train_seed, "batch order and dropout seed");
  train->add_option("--max-steps", ta.max_steps);
  train->add_option("--warmup", ta.warmup);
  train->add_option("--batch-size", ta.batch_size);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--eval-every", ta.eval_every);
  train->add_option("--lambda-snippet", ta.lambda_snippet);
  train->add_option("--lambda-actobj", ta.lambda_actobj);
  train->add_option("--lambda-sentence", ta.lambda_sentence);
  train->add_option("--lr-scale", ta.lr_scale);
  ta.providers.add(train);
  train->add_flag("--force", ta.force, "write into a non-empty run directory");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "caption videos with a trained model");
  gen->add_option("--checkpoint", ga.checkpoint, "checkpoint directory")->required();
  gen->add_option("--data", ga.data, "manifest of the videos to caption")->required();
  gen->add_option("--vocab", ga.vocab, "vocabulary file (default: the manifest's)");
  gen->add_option("--config", ga.config, "run config JSON (default: the checkpoint's)");
  gen->add_option("--out", ga.out, "output directory");
  gen->add_option("--mode", ga.mode, "free|gt_proposals");
  gen->add_option("--stop-threshold", ga.stop_threshold);
  gen->add_option("--max-snippets", ga.max_snippets);
  gen->add_option("--video", ga.videos, "restrict to these video ids");
  ga.providers.add(gen);
  gen->add_flag("--force", ga.force, "write into a non-empty output directory");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score generation documents against a manifest");
  ev->add_option("--data", ea.data, "reference manifest")->required();
  ev->add_option("--gen", ea.gens, "generation.json, optionally as name=path; repeat for an ablation table")
      ->required();
  ev->add_option("--out", ea.out, "output directory for eval.json");
  ev->add_flag("--force", ea.force, "write into a non-empty output directory");

  GradcheckArgs ca;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full model gradient (float64)");
  gc->add_option("--tol", ca.tol, "relative tolerance per parameter block");
  gc->add_option("--seed", ca.seed, "seed of the tiny dataset");
  gc->add_option("--max-entries", ca.max_entries, "entries sampled per block, 0 = all");
  gc->add_option("--dropout", ca.dropout, "model dropout (must be 0)");
  gc->add_option("--corrupt-op", ca.corrupt_op, "perturb this op's backward pass (negative control)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*train) return cmd_train(ta);
    if (*gen) return cmd_generate(ga);
    if (*ev) return cmd_eval(ea);
    if (*gc) return cmd_gradcheck(ca);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
