#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <random>

#include "geodistill/config.hpp"
#include "geodistill/errors.hpp"
#include "geodistill/io.hpp"

using namespace geodistill;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("geodistill_" + name); }

model::TrainableParameters random_params(std::uint64_t seed) {
  model::TrainableParameters p = model::Model::initialize(model::ModelConfig{}).params;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::MatrixXd* m : model::parameter_list(p)) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng) * std::pow(10.0, n(rng));
  }
  return p;
}

}  // namespace

TEST_CASE("presets") {
  const config::RunConfig paper = config::preset("paper");
  CHECK(paper.train.learning_rate == 1e-5);
  CHECK(paper.model.rank == 4);
  CHECK(paper.train.loss.weights.match == 1.0);
  CHECK(paper.train.loss.weights.depth == 1.0);
  CHECK(paper.train.loss.weights.cost == 1.0);
  CHECK(paper.train.tau_start == 1.0);
  CHECK(paper.train.tau_end == 0.5);
  const config::RunConfig toy = config::preset("toy");
  CHECK(toy.num_scenes == 8);
  CHECK(toy.scene.grid_rows == 8);
  CHECK(toy.model.input_dim == 32);
  CHECK(toy.train.max_epochs == 300);
  CHECK_NOTHROW(toy.validate());
  CHECK_THROWS_AS(config::preset("huge"), ConfigError);
}

TEST_CASE("config tree round-trips") {
  config::RunConfig rc = config::paper_preset();
  rc.train.loss.negatives.exclusion_radius = 12.5;
  rc.train.loss.divergence = losses::Divergence::JensenShannon;
  rc.scene.seed = 18446744073709551557ull;
  const config::Json tree = config::to_json(rc);
  CHECK(config::to_json(config::from_json(tree)) == tree);
  CHECK(config::from_json(tree).scene.seed == 18446744073709551557ull);
}

TEST_CASE("config overlay errors") {
  CHECK_THROWS_AS(config::from_json({{"train", {{"learnign_rate", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(config::from_json({{"train", {{"learning_rate", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(config::from_json({{"train", {{"loss", {{"divergence", "reverse_kl"}}}}}}), ConfigError);
  const config::RunConfig partial = config::from_json({{"train", {{"max_epochs", 7}}}});
  CHECK(partial.train.max_epochs == 7);
  CHECK(partial.train.learning_rate == config::toy_preset().train.learning_rate);
}

TEST_CASE("dotted overrides") {
  config::Json tree = config::Json::object();
  config::apply_override(tree, "train.learning_rate", "0.01");
  config::apply_override(tree, "train.loss.divergence", "jensen_shannon");
  config::apply_override(tree, "train.loss.exclusion_radius", "null");
  config::apply_override(tree, "eval.alphas", "[0.1,0.2]");
  const config::RunConfig rc = config::from_json(tree);
  CHECK(rc.train.learning_rate == 0.01);
  CHECK(rc.train.loss.divergence == losses::Divergence::JensenShannon);
  CHECK_FALSE(rc.train.loss.negatives.exclusion_radius.has_value());
  CHECK(rc.eval.alphas == std::vector<double>{0.1, 0.2});
}

TEST_CASE("seeds") {
  CHECK(config::parse_seed("42") == 42u);
  CHECK(config::parse_seed("18446744073709551615") == 18446744073709551615ull);
  CHECK_THROWS_AS(config::parse_seed("-1"), ConfigError);
  CHECK_THROWS_AS(config::parse_seed("12abc"), ConfigError);
  CHECK_THROWS_AS(config::parse_seed(""), ConfigError);

  config::RunConfig rc = config::toy_preset();
  ::setenv("GEODISTILL_SEED", "1234", 1);
  config::apply_seed_environment(rc);
  ::unsetenv("GEODISTILL_SEED");
  CHECK(rc.scene.seed == 1234u);
  CHECK(rc.model.seed == 1234u);
  CHECK(rc.train.seed == 1234u);
  CHECK(config::scene_config_for(rc, 0).seed != config::scene_config_for(rc, 1).seed);
}

TEST_CASE("matrices round-trip exactly") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(3, 5);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng) * 1e-7;
  CHECK(io::matrix_from_json(io::parse_json(io::matrix_to_json(m).dump())) == m);
  CHECK_THROWS_AS(io::matrix_from_json({{"shape", {2, 2}}, {"data", {1.0, 2.0}}}), ParseError);
}

TEST_CASE("checkpoints") {
  const fs::path path = temp_file("ckpt_test.json");
  io::Checkpoint ckpt{config::toy_preset(), random_params(3), std::nullopt};
  trainer::TrainState st;
  st.params = random_params(4);
  st.best_params = random_params(5);
  st.optim = trainer::OptimState::zeros_like(st.params);
  st.optim.t = 12;
  st.step = 12;
  st.epoch = 2;
  st.order = {2, 0, 1};
  st.rng_state = "1 2 3";
  ckpt.state = st;
  io::save_checkpoint(ckpt, path);

  SUBCASE("save then load is exact") {
    const io::Checkpoint back = io::load_checkpoint(path);
    const Eigen::VectorXd a = model::flatten(ckpt.params), b = model::flatten(back.params);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-15);
    REQUIRE(back.state.has_value());
    CHECK(model::flatten(back.state->best_params) == model::flatten(st.best_params));
    CHECK(back.state->order == st.order);
    CHECK(back.state->optim.t == 12);
    CHECK(std::isinf(back.state->best_validation));
    CHECK(config::to_json(back.config) == config::to_json(ckpt.config));
  }
  SUBCASE("a truncated file is a parse error and leaves the target untouched") {
    const std::string text = io::read_file(path);
    const fs::path cut = temp_file("ckpt_truncated.json");
    io::write_file(cut, text.substr(0, text.size() / 2));
    io::Checkpoint target{config::paper_preset(), random_params(9), std::nullopt};
    const Eigen::VectorXd before = model::flatten(target.params);
    CHECK_THROWS_AS(io::load_checkpoint_into(cut, target), ParseError);
    CHECK(model::flatten(target.params) == before);
    CHECK(target.config.train.learning_rate == 1e-5);
    CHECK_FALSE(target.state.has_value());
    try {
      io::load_checkpoint(cut);
    } catch (const ParseError& e) {
      CHECK(e.offset() > 0);
    }
    fs::remove(cut);
  }
  SUBCASE("missing files are I/O errors") {
    CHECK_THROWS_AS(io::load_checkpoint(temp_file("does_not_exist.json")), IoError);
  }
  fs::remove(path);
}

TEST_CASE("scenes round-trip") {
  const scene::SceneSample s = scene::make_sample(scene::SceneConfig{});
  const fs::path path = temp_file("scene_test.json");
  io::save_scene(s, path);
  const scene::SceneSample back = io::load_scene(path);
  fs::remove(path);
  CHECK(back.scene.points == s.scene.points);
  for (int v = 0; v < 2; ++v) {
    CHECK(back.views[v].descriptors == s.views[v].descriptors);
    CHECK(back.views[v].depth == s.views[v].depth);
    CHECK(back.views[v].visible == s.views[v].visible);
    CHECK(back.views[v].point_patch == s.views[v].point_patch);
    CHECK(back.views[v].point_pixels == s.views[v].point_pixels);
  }
  CHECK(back.scene.poses[1].rotation == s.scene.poses[1].rotation);
  CHECK(io::scene_to_json(back).dump() == io::scene_to_json(s).dump());
}
