#include "geodistill/config.hpp"

#include <charconv>
#include <cstdlib>
#include <string>

#include "geodistill/errors.hpp"

namespace geodistill::config {

namespace {

Json optional_to_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }
Json optional_to_json(const std::optional<int>& v) { return v ? Json(*v) : Json(nullptr); }

template <typename T>
std::optional<T> optional_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

const char* divergence_name(losses::Divergence d) {
  return d == losses::Divergence::ForwardKl ? "forward_kl" : "jensen_shannon";
}

losses::Divergence divergence_from_name(const std::string& name) {
  if (name == "forward_kl") return losses::Divergence::ForwardKl;
  if (name == "jensen_shannon") return losses::Divergence::JensenShannon;
  throw ConfigError("train.loss.divergence must be forward_kl or jensen_shannon, got '" + name + "'");
}

bool compatible(const Json& base, const Json& value) {
  if (base.is_null() || value.is_null()) return true;
  if (base.is_number()) return value.is_number();
  return base.type() == value.type();
}

// Copies `patch` over `base`, rejecting keys the base tree does not know.
void overlay(Json& base, const Json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("configuration " + (prefix.empty() ? "root" : prefix) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown configuration key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      if (!compatible(slot, it.value())) throw ConfigError("configuration key '" + key + "' has the wrong type");
      slot = it.value();
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  if (num_scenes < 1) throw ConfigError("num_scenes must be >= 1");
  scene.validate();
  model.validate();
  train.validate();
  if (model.input_dim != scene.descriptor_dim) {
    throw ConfigError("model.input_dim must equal scene.descriptor_dim");
  }
  if (eval.alphas.empty()) throw ConfigError("eval.alphas must not be empty");
  for (double a : eval.alphas) {
    if (!(a >= 0.0)) throw ConfigError("eval.alphas must be non-negative");
  }
  if (eval.pair_budget < 0) throw ConfigError("eval.pair_budget must be >= 0");
}

RunConfig toy_preset() {
  RunConfig c;
  c.train.batch = 6;
  c.train.loss.pair_budget = 0;
  c.train.loss.normalize_match_features = true;
  c.train.loss.match_temperature = 0.1;
  return c;
}

RunConfig paper_preset() {
  RunConfig c = toy_preset();
  c.preset = "paper";
  c.train.learning_rate = 1e-5;
  c.train.max_epochs = 500;
  c.model.rank = 4;
  c.model.alpha = 4.0;
  c.train.loss.weights = {1.0, 1.0, 1.0};
  c.train.tau_start = 1.0;
  c.train.tau_end = 0.5;
  return c;
}

RunConfig preset(std::string_view name) {
  if (name == "toy") return toy_preset();
  if (name == "paper") return paper_preset();
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected toy or paper)");
}

Json to_json(const RunConfig& c) {
  const scene::SceneConfig& s = c.scene;
  const model::ModelConfig& m = c.model;
  const trainer::TrainConfig& t = c.train;
  const losses::LossConfig& l = t.loss;
  Json j;
  j["preset"] = c.preset;
  j["num_scenes"] = c.num_scenes;
  j["output_dir"] = c.output_dir;
  j["scene"] = {{"num_points", s.num_points},       {"grid_rows", s.grid_rows},
                {"grid_cols", s.grid_cols},         {"image_height", s.image_height},
                {"image_width", s.image_width},     {"descriptor_dim", s.descriptor_dim},
                {"view_noise", s.view_noise},       {"baseline_angle", s.baseline_angle},
                {"near", s.near},                   {"far", s.far},
                {"field_of_view", s.field_of_view}, {"haze_density", s.haze_density},
                {"nuisance_rank", s.nuisance_rank}, {"world_seed", s.world_seed},
                {"seed", s.seed}};
  j["model"] = {{"input_dim", m.input_dim},
                {"hidden_dim", m.hidden_dim},
                {"num_layers", m.num_layers},
                {"adapted_layers", m.adapted_layers},
                {"intermediate_layer", m.intermediate_layer},
                {"rank", m.rank},
                {"alpha", m.alpha},
                {"lora_init_std", m.lora_init_std},
                {"rank_head_dim", m.rank_head_dim},
                {"delta_head_dim", m.delta_head_dim},
                {"seed", m.seed}};
  j["train"] = {{"learning_rate", t.learning_rate},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"eps", t.eps},
                {"max_epochs", t.max_epochs},
                {"early_stop_patience", t.early_stop_patience},
                {"batch", t.batch},
                {"seed", t.seed},
                {"tau_start", t.tau_start},
                {"tau_end", t.tau_end},
                {"anneal_steps", t.anneal_steps},
                {"validation_fraction", t.validation_fraction}};
  j["train"]["loss"] = {{"lambda_match", l.weights.match},
                        {"lambda_depth", l.weights.depth},
                        {"lambda_cost", l.weights.cost},
                        {"exclusion_radius", optional_to_json(l.negatives.exclusion_radius)},
                        {"max_negatives", optional_to_json(l.negatives.max_negatives)},
                        {"pair_budget", l.pair_budget},
                        {"teacher_bandwidth", optional_to_json(l.teacher_bandwidth)},
                        {"normalize_match_features", l.normalize_match_features},
                        {"match_temperature", l.match_temperature},
                        {"divergence", divergence_name(l.divergence)},
                        {"abs_depth", l.abs_depth}};
  j["eval"] = {{"alphas", c.eval.alphas}, {"pair_seed", c.eval.pair_seed}, {"pair_budget", c.eval.pair_budget}};
  return j;
}

RunConfig from_json(const Json& tree, const RunConfig& base) {
  Json j = to_json(base);
  overlay(j, tree, "");
  try {
    RunConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.num_scenes = j.at("num_scenes").get<int>();
    c.output_dir = j.at("output_dir").get<std::string>();

    const Json& s = j.at("scene");
    c.scene.num_points = s.at("num_points").get<int>();
    c.scene.grid_rows = s.at("grid_rows").get<int>();
    c.scene.grid_cols = s.at("grid_cols").get<int>();
    c.scene.image_height = s.at("image_height").get<int>();
    c.scene.image_width = s.at("image_width").get<int>();
    c.scene.descriptor_dim = s.at("descriptor_dim").get<int>();
    c.scene.view_noise = s.at("view_noise").get<double>();
    c.scene.baseline_angle = s.at("baseline_angle").get<double>();
    c.scene.near = s.at("near").get<double>();
    c.scene.far = s.at("far").get<double>();
    c.scene.field_of_view = s.at("field_of_view").get<double>();
    c.scene.haze_density = s.at("haze_density").get<double>();
    c.scene.nuisance_rank = s.at("nuisance_rank").get<int>();
    c.scene.world_seed = s.at("world_seed").get<std::uint64_t>();
    c.scene.seed = s.at("seed").get<std::uint64_t>();

    const Json& m = j.at("model");
    c.model.input_dim = m.at("input_dim").get<int>();
    c.model.hidden_dim = m.at("hidden_dim").get<int>();
    c.model.num_layers = m.at("num_layers").get<int>();
    c.model.adapted_layers = m.at("adapted_layers").get<std::vector<int>>();
    c.model.intermediate_layer = m.at("intermediate_layer").get<int>();
    c.model.rank = m.at("rank").get<int>();
    c.model.alpha = m.at("alpha").get<double>();
    c.model.lora_init_std = m.at("lora_init_std").get<double>();
    c.model.rank_head_dim = m.at("rank_head_dim").get<int>();
    c.model.delta_head_dim = m.at("delta_head_dim").get<int>();
    c.model.seed = m.at("seed").get<std::uint64_t>();

    const Json& t = j.at("train");
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.beta1 = t.at("beta1").get<double>();
    c.train.beta2 = t.at("beta2").get<double>();
    c.train.eps = t.at("eps").get<double>();
    c.train.max_epochs = t.at("max_epochs").get<int>();
    c.train.early_stop_patience = t.at("early_stop_patience").get<int>();
    c.train.batch = t.at("batch").get<int>();
    c.train.seed = t.at("seed").get<std::uint64_t>();
    c.train.tau_start = t.at("tau_start").get<double>();
    c.train.tau_end = t.at("tau_end").get<double>();
    c.train.anneal_steps = t.at("anneal_steps").get<long>();
    c.train.validation_fraction = t.at("validation_fraction").get<double>();

    const Json& l = t.at("loss");
    c.train.loss.weights.match = l.at("lambda_match").get<double>();
    c.train.loss.weights.depth = l.at("lambda_depth").get<double>();
    c.train.loss.weights.cost = l.at("lambda_cost").get<double>();
    c.train.loss.negatives.exclusion_radius = optional_from_json<double>(l.at("exclusion_radius"));
    c.train.loss.negatives.max_negatives = optional_from_json<int>(l.at("max_negatives"));
    c.train.loss.pair_budget = l.at("pair_budget").get<int>();
    c.train.loss.teacher_bandwidth = optional_from_json<double>(l.at("teacher_bandwidth"));
    c.train.loss.normalize_match_features = l.at("normalize_match_features").get<bool>();
    c.train.loss.match_temperature = l.at("match_temperature").get<double>();
    c.train.loss.divergence = divergence_from_name(l.at("divergence").get<std::string>());
    c.train.loss.abs_depth = l.at("abs_depth").get<bool>();

    const Json& e = j.at("eval");
    c.eval.alphas = e.at("alphas").get<std::vector<double>>();
    c.eval.pair_seed = e.at("pair_seed").get<std::uint64_t>();
    c.eval.pair_budget = e.at("pair_budget").get<int>();
    return c;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid configuration: ") + ex.what());
  }
}

void apply_override(Json& tree, std::string_view key, std::string_view value) {
  if (key.empty()) throw ConfigError("empty override key");
  Json parsed = Json::parse(value.begin(), value.end(), nullptr, false);
  if (parsed.is_discarded()) parsed = std::string(value);

  Json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part(key.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (part.empty()) throw ConfigError("malformed override key '" + std::string(key) + "'");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string_view::npos) {
      (*node)[part] = std::move(parsed);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::uint64_t parse_seed(std::string_view text) {
  std::uint64_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("invalid seed '" + std::string(text) + "'");
  }
  return value;
}

void apply_seed_environment(RunConfig& config) {
  const char* env = std::getenv("GEODISTILL_SEED");
  if (env == nullptr || *env == '\0') return;
  const std::uint64_t seed = parse_seed(env);
  config.scene.seed = seed;
  config.model.seed = seed;
  config.train.seed = seed;
}

scene::SceneConfig scene_config_for(const RunConfig& config, int index) {
  scene::SceneConfig s = config.scene;
  s.seed = scene::derive_seed(config.scene.seed, 100 + static_cast<std::uint64_t>(index));
  return s;
}

}  // namespace geodistill::config
