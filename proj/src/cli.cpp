#include "geodistill/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "geodistill/config.hpp"
#include "geodistill/errors.hpp"
#include "geodistill/eval.hpp"
#include "geodistill/gradcheck.hpp"
#include "geodistill/io.hpp"
#include "geodistill/trainer.hpp"

namespace geodistill::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::json;

constexpr const char* kManifestFormat = "geodistill-manifest/1";

struct ConfigFlags {
  std::string preset = "toy";
  std::string config_file;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("--preset", flags.preset, "Configuration preset (toy or paper)")->capture_default_str();
  cmd->add_option("--config", flags.config_file, "JSON configuration file layered over the preset");
  cmd->allow_extras();
  cmd->footer("Any configuration key can be overridden with a dotted flag, e.g. --train.learning_rate 1e-3");
}

/// Dotted overrides from unparsed arguments: `--a.b value` or `--a.b=value`.
std::vector<std::pair<std::string, std::string>> dotted_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() < 3) throw ConfigError("unexpected argument '" + arg + "'");
    std::string key = arg.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for '" + arg + "'");
      value = extras[++i];
    }
    if (key.find('.') == std::string::npos && key != "num_scenes" && key != "output_dir") {
      throw ConfigError("unknown option '" + arg + "'");
    }
    out.emplace_back(key, value);
  }
  return out;
}

config::RunConfig resolve_config(const ConfigFlags& flags, const std::vector<std::string>& extras) {
  const config::RunConfig base = config::preset(flags.preset);
  Json tree = Json::object();
  if (!flags.config_file.empty()) tree = io::read_json(flags.config_file);
  for (const auto& [key, value] : dotted_overrides(extras)) config::apply_override(tree, key, value);
  config::RunConfig rc = config::from_json(tree, base);
  config::apply_seed_environment(rc);
  return rc;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

std::string scene_file_name(int index) {
  std::ostringstream os;
  os << "scene_" << std::setw(3) << std::setfill('0') << index << ".json";
  return os.str();
}

std::vector<scene::SceneSample> load_scene_dir(const fs::path& dir) {
  const Json manifest = io::read_json(dir / "manifest.json");
  std::vector<scene::SceneSample> scenes;
  try {
    if (manifest.at("format").get<std::string>() != kManifestFormat) throw ParseError("unsupported manifest format", 0);
    for (const Json& entry : manifest.at("scenes")) {
      scenes.push_back(io::load_scene(dir / entry.at("file").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid manifest: ") + e.what(), 0);
  }
  if (scenes.empty()) throw EmptyInputError("scene directory '" + dir.string() + "' lists no scenes");
  return scenes;
}

void check_dims(const model::ModelConfig& model, const std::vector<scene::SceneSample>& scenes) {
  for (const scene::SceneSample& s : scenes) {
    if (s.views[0].descriptors.cols() != model.input_dim) {
      throw DimensionError("scene descriptor dim " + std::to_string(s.views[0].descriptors.cols()) +
                           " does not match model input dim " + std::to_string(model.input_dim));
    }
  }
}

Json step_to_json(const trainer::StepRecord& r) {
  Json j;
  j["step"] = r.step;
  j["tau"] = r.tau;
  const losses::LossDiagnostics& d = r.losses;
  if (d.match) j["L_match"] = *d.match;
  if (d.depth_intra) j["L_depth_intra"] = *d.depth_intra;
  if (d.depth_inter) j["L_depth_inter"] = *d.depth_inter;
  if (d.abs_depth) j["L_abs_depth"] = *d.abs_depth;
  if (d.cost) j["L_cost"] = *d.cost;
  j["L_total"] = d.total;
  j["grad_norm"] = r.grad_norm;
  return j;
}

eval::EvalOptions eval_options(const config::RunConfig& rc) {
  eval::EvalOptions o;
  o.alphas = rc.eval.alphas;
  o.pair_seed = rc.eval.pair_seed;
  o.pair_budget = rc.eval.pair_budget;
  o.tau = rc.train.tau_end;
  o.loss = rc.train.loss;
  o.abs_depth_readout = rc.train.loss.abs_depth;
  return o;
}

// ---------------------------------------------------------------------------

struct GenSceneArgs {
  ConfigFlags config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> num_scenes;
};

int cmd_gen_scene(const GenSceneArgs& args, const std::vector<std::string>& extras, std::ostream& out) {
  config::RunConfig rc = resolve_config(args.config, extras);
  if (args.seed) rc.scene.seed = *args.seed;
  if (args.num_scenes) rc.num_scenes = *args.num_scenes;
  rc.output_dir = args.out;
  rc.validate();

  const fs::path dir(args.out);
  ensure_directory(dir);
  Json entries = Json::array();
  for (int i = 0; i < rc.num_scenes; ++i) {
    const scene::SceneConfig sc = config::scene_config_for(rc, i);
    io::save_scene(scene::make_sample(sc), dir / scene_file_name(i));
    entries.push_back({{"file", scene_file_name(i)}, {"seed", sc.seed}});
  }
  io::write_json(dir / "manifest.json",
                 {{"format", kManifestFormat}, {"num_scenes", rc.num_scenes}, {"root_seed", rc.scene.seed}, {"scenes", entries}});
  io::write_json(dir / "config.json", config::to_json(rc));
  out << "wrote " << rc.num_scenes << " scenes to " << dir.string() << '\n';
  return kSuccess;
}

struct TrainArgs {
  ConfigFlags config;
  std::string scenes;
  std::string out;
  std::vector<std::string> ablate;
  bool abs_depth = false;
  std::string resume;
  std::optional<long> max_steps;
};

int cmd_train(const TrainArgs& args, const std::vector<std::string>& extras, std::ostream& out, std::ostream& err) {
  config::RunConfig rc;
  std::optional<io::Checkpoint> resumed;
  if (!args.resume.empty()) {
    if (!extras.empty() || !args.ablate.empty() || args.abs_depth || !args.config.config_file.empty()) {
      throw ConfigError("--resume takes its configuration from the checkpoint; drop the other configuration flags");
    }
    resumed = io::load_checkpoint(args.resume);
    if (!resumed->state) throw ConfigError("checkpoint '" + args.resume + "' holds no resumable training state");
    rc = resumed->config;
  } else {
    rc = resolve_config(args.config, extras);
    for (const std::string& branch : args.ablate) {
      if (branch == "match") {
        rc.train.loss.weights.match = 0.0;
      } else if (branch == "depth") {
        rc.train.loss.weights.depth = 0.0;
      } else if (branch == "cost") {
        rc.train.loss.weights.cost = 0.0;
      } else {
        throw ConfigError("--ablate expects match, depth or cost, got '" + branch + "'");
      }
    }
    if (args.abs_depth) rc.train.loss.abs_depth = true;
  }
  rc.output_dir = args.out;
  rc.validate();

  const std::vector<scene::SceneSample> scenes = load_scene_dir(args.scenes);
  check_dims(rc.model, scenes);
  const fs::path dir(args.out);
  ensure_directory(dir);
  io::write_json(dir / "config.json", config::to_json(rc));

  const model::Model model = model::Model::initialize(rc.model);
  trainer::Trainer trainer(model, scenes, rc.train);
  if (resumed) trainer.restore(*resumed->state);

  std::ofstream log(dir / "train_log.ndjson", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot open '" + (dir / "train_log.ndjson").string() + "' for writing");
  long steps_run = 0;
  const trainer::TrainResult result = trainer.run(
      [&](const trainer::StepRecord& r) {
        log << step_to_json(r).dump() << '\n';
        ++steps_run;
      },
      args.max_steps);
  log.flush();
  if (!log) throw IoError("failed writing the training log");

  io::Checkpoint ckpt{rc, result.best_params, trainer.state()};
  io::save_checkpoint(ckpt, dir / "checkpoint.json");

  Json epochs = Json::array();
  for (const trainer::EpochRecord& e : result.epochs) {
    Json row = {{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    row["validation_loss"] = e.validation_loss ? Json(*e.validation_loss) : Json(nullptr);
    epochs.push_back(row);
  }
  model::Model best = model;
  const eval::EvalReport report = eval::evaluate(best, result.best_params, scenes, eval_options(rc));
  const trainer::TrainState state = trainer.state();
  Json metrics = {{"steps_run", steps_run},
                  {"global_step", state.step},
                  {"epochs_completed", state.epoch},
                  {"finished", state.finished},
                  {"stopped_early", state.stopped_early},
                  {"best_epoch", state.best_epoch},
                  {"train_scenes", trainer.num_train()},
                  {"validation_scenes", trainer.num_validation()},
                  {"epochs", epochs},
                  {"eval", eval::to_json(report)}};
  metrics["best_validation"] = result.best_validation ? Json(*result.best_validation) : Json(nullptr);
  io::write_json(dir / "metrics.json", metrics);

  out << "trained " << steps_run << " steps (" << state.epoch << " epochs";
  if (state.stopped_early) out << ", early stop";
  out << "); checkpoint " << (dir / "checkpoint.json").string() << '\n';
  (void)err;
  return kSuccess;
}

struct EvalArgs {
  std::string checkpoint;
  std::string scenes;
  bool compare = false;
  std::string pca;
  int pca_scene = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const io::Checkpoint ckpt = io::load_checkpoint(args.checkpoint);
  const std::vector<scene::SceneSample> scenes = load_scene_dir(args.scenes);
  check_dims(ckpt.config.model, scenes);
  const model::Model model = model::Model::initialize(ckpt.config.model);
  if (model::parameter_names(model.params) != model::parameter_names(ckpt.params) ||
      model::parameter_count(model.params) != model::parameter_count(ckpt.params)) {
    throw DimensionError("checkpoint parameters do not match its model configuration");
  }
  const eval::EvalOptions options = eval_options(ckpt.config);
  const eval::EvalReport distilled = eval::evaluate(model, ckpt.params, scenes, options);

  Json result;
  if (args.compare) {
    const eval::EvalReport baseline = eval::evaluate(model, eval::adapter_disabled(ckpt.params), scenes, options);
    result = {{"baseline", eval::to_json(baseline)},
              {"distilled", eval::to_json(distilled)},
              {"delta", eval::to_json(eval::compare_runs(baseline, distilled))}};
  } else {
    result = eval::to_json(distilled);
  }

  if (!args.pca.empty()) {
    if (args.pca_scene < 0 || static_cast<std::size_t>(args.pca_scene) >= scenes.size()) {
      throw ConfigError("--pca-scene out of range");
    }
    const scene::SceneSample& s = scenes[static_cast<std::size_t>(args.pca_scene)];
    model::Model m = model;
    m.params = ckpt.params;
    const std::vector<Eigen::MatrixXd> feats{model::encode_values(m, s.views[0].descriptors).final,
                                             model::encode_values(m, s.views[1].descriptors).final};
    const eval::PcaResult pca = eval::pca_features(feats, 3);
    if (!pca.warning.empty()) err << "warning: " << pca.warning << '\n';
    std::ostringstream csv;
    eval::write_pca_csv(csv, pca, s.views[0].grid);
    io::write_file(args.pca, csv.str());
  }

  if (args.out.empty()) {
    out << result.dump(1) << '\n';
  } else {
    io::write_json(args.out, result);
  }
  return kSuccess;
}

struct GradCheckArgs {
  ConfigFlags config;
  std::vector<std::string> losses;
  int size = 0;
  std::optional<std::uint64_t> seed;
};

int cmd_grad_check(const GradCheckArgs& args, const std::vector<std::string>& extras, std::ostream& out) {
  const config::RunConfig rc = resolve_config(args.config, extras);
  gradcheck::Options o;
  o.loss = rc.train.loss;
  o.keypoints = args.size;
  o.seed = args.seed ? *args.seed : rc.train.seed;
  if (!args.losses.empty()) {
    o.families.clear();
    for (const std::string& name : args.losses) {
      const auto f = gradcheck::parse_family(name);
      if (!f) throw ConfigError("--loss expects match, intra, inter, cost, abs or total, got '" + name + "'");
      o.families.push_back(*f);
    }
  }
  const std::vector<gradcheck::Row> rows = gradcheck::run(o);

  bool all_passed = true;
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %4s %5s %9s %7s %14s  %s\n", "loss", "dim", "grid", "keypoints", "params",
                "max_rel_error", "status");
  out << line;
  for (const gradcheck::Row& r : rows) {
    std::snprintf(line, sizeof line, "%-6s %4d %3dx%-1d %9d %7zu %14.3e  %s\n",
                  std::string(gradcheck::family_name(r.family)).c_str(), r.feature_dim, r.grid, r.grid, r.keypoints,
                  r.num_params, r.max_relative_error, r.passed ? "PASS" : "FAIL");
    out << line;
    all_passed = all_passed && r.passed;
  }
  return all_passed ? kSuccess : kNumericalError;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Geometric distillation of patch encoders on synthetic multi-view scenes", "geodistill"};
  app.require_subcommand(1);

  GenSceneArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-scene", "Generate a synthetic scene set with a manifest");
  add_config_flags(gen_cmd, gen.config);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Root scene seed");
  gen_cmd->add_option("--num-scenes", gen.num_scenes, "Number of scenes");

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train adapters and heads on a scene set");
  add_config_flags(train_cmd, train.config);
  train_cmd->add_option("--scenes", train.scenes, "Scene directory written by gen-scene")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--ablate", train.ablate, "Disable a loss branch (match, depth, cost); repeatable")
      ->delimiter(',');
  train_cmd->add_flag("--abs-depth", train.abs_depth, "Replace the relative depth terms by the absolute-depth loss");
  train_cmd->add_option("--resume", train.resume, "Continue from a checkpoint's training state");
  train_cmd->add_option("--max-steps", train.max_steps, "Stop after this many steps in this invocation");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--scenes", ev.scenes, "Scene directory")->required();
  eval_cmd->add_flag("--compare", ev.compare, "Also evaluate the frozen baseline and report deltas");
  eval_cmd->add_option("--pca", ev.pca, "Write joint PCA projections of one scene to this CSV");
  eval_cmd->add_option("--pca-scene", ev.pca_scene, "Scene index for --pca")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Write the report here instead of stdout");

  GradCheckArgs gc;
  CLI::App* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of every loss family");
  add_config_flags(gc_cmd, gc.config);
  gc_cmd->add_option("--loss", gc.losses, "Loss family to check (match, intra, inter, cost, abs, total); repeatable")
      ->delimiter(',');
  gc_cmd->add_option("--size", gc.size, "Keypoints per instance (0 draws 3..16)");
  gc_cmd->add_option("--seed", gc.seed, "Instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o;
    std::ostringstream e_out;
    const int code = app.exit(e, o, e_out);
    out << o.str();
    err << e_out.str();
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (*gen_cmd) return cmd_gen_scene(gen, gen_cmd->remaining(), out);
    if (*train_cmd) return cmd_train(train, train_cmd->remaining(), out, err);
    if (*eval_cmd) return cmd_eval(ev, out, err);
    if (*gc_cmd) return cmd_grad_check(gc, gc_cmd->remaining(), out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const DomainError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace geodistill::cli
