// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion;
// pass criterion numbers as arguments to run a subset.

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "geodistill/cli.hpp"
#include "geodistill/config.hpp"
#include "geodistill/eval.hpp"
#include "geodistill/gradcheck.hpp"
#include "geodistill/io.hpp"
#include "geodistill/losses.hpp"
#include "geodistill/trainer.hpp"

using namespace geodistill;
namespace fs = std::filesystem;
using Json = nlohmann::json;
using Matrix = Eigen::MatrixXd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, pattern, a);
  return buf;
}

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

int cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "geodistill");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return code;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geodistill_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
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

struct BenchmarkRun {
  std::vector<double> losses;
  eval::EvalReport baseline;
  eval::EvalReport untrained;
  eval::EvalReport distilled;
};

BenchmarkRun run_benchmark(const config::RunConfig& rc) {
  std::vector<scene::SceneSample> scenes;
  for (int i = 0; i < rc.num_scenes; ++i) scenes.push_back(scene::make_sample(config::scene_config_for(rc, i)));
  const model::Model m = model::Model::initialize(rc.model);
  BenchmarkRun r;
  const trainer::TrainResult result =
      trainer::run_training(m, scenes, rc.train, [&](const trainer::StepRecord& s) { r.losses.push_back(s.losses.total); });
  const eval::EvalOptions opts = eval_options(rc);
  r.baseline = eval::evaluate(m, eval::adapter_disabled(m.params), scenes, opts);
  r.untrained = eval::evaluate(m, m.params, scenes, opts);
  r.distilled = eval::evaluate(m, result.best_params, scenes, opts);
  return r;
}

config::RunConfig seeded(std::uint64_t seed) {
  config::RunConfig rc = config::toy_preset();
  rc.scene.seed = rc.model.seed = rc.train.seed = seed;
  return rc;
}

// ---------------------------------------------------------------------------

Outcome gradient_soundness() {
  double worst = 0.0;
  int rows = 0, failed = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    gradcheck::Options o;
    o.seed = seed;
    for (const gradcheck::Row& r : gradcheck::run(o)) {
      ++rows;
      failed += r.passed ? 0 : 1;
      worst = std::max(worst, r.max_relative_error);
    }
  }
  return {failed == 0, std::to_string(rows) + " checks over 6 families, worst relative error " + fmt("%.2e", worst)};
}

Outcome smooth_ap_oracle() {
  std::mt19937_64 rng(2024);
  constexpr double kSharp = 1e-4;
  constexpr double kMargin = 0.05;
  double worst = 0.0, worst_reference = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    const Eigen::Index k = std::uniform_int_distribution<Eigen::Index>(3, 8)(rng);
    Matrix q, t, sim;
    // Redraw until every row's similarities, including q_i . q_i, are margin-separated.
    for (bool ok = false; !ok;) {
      q = random_matrix(rng, k, 16, 0.5);
      t = random_matrix(rng, k, 16, 0.5);
      sim = q * t.transpose();
      ok = true;
      for (Eigen::Index i = 0; i < k && ok; ++i) {
        std::vector<double> v;
        for (Eigen::Index j = 0; j < k; ++j) v.push_back(sim(i, j));
        v.push_back(q.row(i).squaredNorm());
        std::sort(v.begin(), v.end());
        for (std::size_t a = 1; a < v.size(); ++a) ok = ok && v[a] - v[a - 1] >= kMargin;
      }
    }
    Matrix negatives = Matrix::Ones(k, k);
    negatives.diagonal().setZero();
    std::vector<Eigen::Index> positives(static_cast<std::size_t>(k));
    for (Eigen::Index i = 0; i < k; ++i) positives[static_cast<std::size_t>(i)] = i;

    ad::Tape tape;
    const double smooth =
        losses::smooth_ap(tape.constant(q), tape.constant(t), negatives, {kSharp, false}).scalar();
    const double exact = eval::brute_force_ap(sim, positives, &negatives);
    worst = std::max(worst, std::abs(smooth - exact));

    // Rank-based form 1 / (1 + sum_j sigma((s_ij - s_ii) / T)) on the same instance.
    double reference = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
      double rank = 1.0;
      for (Eigen::Index j = 0; j < k; ++j) {
        if (j != i) rank += 1.0 / (1.0 + std::exp(-(sim(i, j) - sim(i, i)) / kSharp));
      }
      reference += 1.0 / rank;
    }
    worst_reference = std::max(worst_reference, std::abs(reference / static_cast<double>(k) - exact));
  }
  return {worst < 1e-3, "max |SmoothAP - exact AP| " + fmt("%.3e", worst) + " over 100 instances (rank-based form: " +
                            fmt("%.1e", worst_reference) + ")"};
}

Outcome formula_fixtures() {
  ad::Tape tape;
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* name) {
    if (!ok) failed.emplace_back(name);
  };

  Matrix q(2, 2), t(2, 2), neg = Matrix::Zero(2, 2);
  q << 1, 0, 0, 1;
  t << 1, 0, 1, 1;
  neg(0, 1) = 1.0;
  expect(losses::smooth_ap_terms(tape.constant(q), tape.constant(t), neg).value()(0, 0) == 0.75, "smoothap-0.75");

  const std::vector<int> labels{1, -1, 1, 1};
  expect(std::abs(losses::ordinal_logistic_loss(tape.constant(Matrix::Zero(4, 1)), labels).scalar() - std::log(2.0)) <
             1e-12,
         "intra-ln2");

  Eigen::VectorXd d1(1), d2(1);
  d1 << 3.5;
  d2 << 2.5;
  expect(std::abs(losses::inter_delta_targets(d1, d2)(0) - std::tanh(1.0)) < 1e-12, "inter-tanh1");

  Matrix onehot(1, 2), uniform(1, 2);
  onehot << 1.0, 0.0;
  uniform << 0.5, 0.5;
  const scene::CostDistribution teacher{onehot, {true}};
  expect(std::abs(losses::row_divergence(teacher, tape.constant(uniform), {true}).scalar() - std::log(2.0)) < 1e-12,
         "kl-ln2");

  Eigen::VectorXd gt(2);
  gt << 4.0, 1.0;
  Matrix pred(2, 1);
  pred << 2.0, 0.5;
  expect(losses::abs_depth_loss(tape.constant(pred), gt).scalar() == 0.0, "abs-scale-0.5");
  pred << 2.0, 0.0;
  expect(losses::abs_depth_loss(tape.constant(pred), gt).scalar() == 0.25, "abs-scale-0.5-residual");

  std::string detail = "5 fixtures";
  for (const std::string& f : failed) detail += " failed:" + f;
  return {failed.empty(), detail};
}

Outcome invariance_suite() {
  std::mt19937_64 rng(77);
  std::vector<std::string> failed;

  // Sign labels under strictly increasing transforms.
  {
    std::uniform_real_distribution<double> depth(2.0, 6.0);
    const std::vector<std::function<double(double)>> transforms{
        [](double d) { return std::exp(d); }, [](double d) { return std::log(d); },
        [](double d) { return 0.5 * d + 3.0; }, [](double d) { return d * d * d; },
        [](double d) { return -1.0 / d; }};
    int flips = 0;
    for (int p = 0; p < 1000; ++p) {
      const double a = depth(rng), b = depth(rng);
      if (a == b) continue;
      for (const auto& f : transforms) flips += losses::sign_label(f(a), f(b)) != losses::sign_label(a, b) ? 1 : 0;
    }
    if (flips != 0) failed.push_back("sign-labels");
  }
  // L_match view swap.
  {
    ad::Tape tape;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix a = random_matrix(rng, 10, 8), b = random_matrix(rng, 10, 8);
      const Eigen::MatrixX2d p1 = random_matrix(rng, 10, 2, 30.0), p2 = random_matrix(rng, 10, 2, 30.0);
      losses::NegativePolicy pol;
      pol.exclusion_radius = 8.0;
      const double l12 = losses::match_loss(tape.constant(a), tape.constant(b), p1, p2, pol).scalar();
      const double l21 = losses::match_loss(tape.constant(b), tape.constant(a), p2, p1, pol).scalar();
      worst = std::max(worst, std::abs(l12 - l21));
    }
    if (!(worst < 1e-12)) failed.push_back("match-swap");
  }
  // Rank score antisymmetry.
  {
    model::Model m = model::Model::initialize(model::ModelConfig{});
    for (Matrix* p : model::parameter_list(m.params)) *p = random_matrix(rng, p->rows(), p->cols(), 0.4);
    ad::Tape tape;
    const model::BoundParameters bound = model::bind(tape, m.params, false);
    bool exact = true;
    for (int trial = 0; trial < 100; ++trial) {
      ad::Var x = tape.constant(random_matrix(rng, 1, 32)), y = tape.constant(random_matrix(rng, 1, 32));
      exact = exact && model::rank_score(bound, x, y).scalar() == -model::rank_score(bound, y, x).scalar();
    }
    if (!exact) failed.push_back("rank-antisymmetry");
  }
  // Softmax rows.
  {
    ad::Tape tape;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Matrix p = ad::softmax_rows(tape.constant(random_matrix(rng, 8, 12, 5.0)), 0.3).value();
      worst = std::max(worst, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());
    }
    if (!(worst < 1e-12)) failed.push_back("softmax-rows");
  }
  // PCK monotone in alpha.
  {
    const scene::SceneSample s = scene::make_sample(scene::SceneConfig{});
    const scene::CorrespondenceSet corr = scene::extract_correspondences(s.views[0], s.views[1]);
    std::vector<double> alphas;
    for (int k = 0; k <= 40; ++k) alphas.push_back(0.025 * k);
    bool monotone = true;
    for (int trial = 0; trial < 10; ++trial) {
      const eval::PckTable t = eval::pck(random_matrix(rng, 64, 8), random_matrix(rng, 64, 8), corr, alphas,
                                         s.views[1].patch_centers, 64, 64);
      double prev = -1.0;
      for (const auto& [alpha, v] : t) {
        monotone = monotone && v >= prev;
        prev = v;
      }
    }
    if (!monotone) failed.push_back("pck-monotone");
  }
  // Lambda recomposition of the total loss.
  {
    const scene::SceneSample s = scene::make_sample(scene::SceneConfig{});
    model::Model m = model::Model::initialize(model::ModelConfig{});
    for (Matrix* p : model::parameter_list(m.params)) *p = random_matrix(rng, p->rows(), p->cols(), 0.1);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      losses::LossConfig cfg;
      std::uniform_real_distribution<double> u(0.0, 2.0);
      cfg.weights = {u(rng), u(rng), u(rng)};
      const losses::PairTargets targets = losses::build_targets(s, cfg);
      const losses::PreparedPair pair = losses::prepare_pair(s, targets, cfg, rng);
      ad::Tape tape;
      const model::BoundParameters bound = model::bind(tape, m.params);
      const losses::LossDiagnostics d = losses::total_loss(tape, m, bound, pair, cfg, 0.8).diagnostics;
      worst = std::max(worst, std::abs(d.total - (cfg.weights.match * *d.match + cfg.weights.depth * *d.depth() +
                                                  cfg.weights.cost * *d.cost)));
    }
    if (!(worst < 1e-12)) failed.push_back("lambda-recomposition");
  }
  std::string detail = "6 properties";
  for (const std::string& f : failed) detail += " failed:" + f;
  return {failed.empty(), detail};
}

Outcome lora_identity() {
  const fs::path dir = scratch("lora");
  const config::RunConfig rc = config::toy_preset();
  // Bit-level: adapted encoder at init versus an encoder with no adapters at all.
  model::ModelConfig bare = rc.model;
  bare.adapted_layers.clear();
  const model::Model with = model::Model::initialize(rc.model);
  const model::Model without = model::Model::initialize(bare);
  const scene::SceneSample s = scene::make_sample(config::scene_config_for(rc, 0));
  const bool bitwise = model::encode_values(with, s.views[0].descriptors).final ==
                           model::encode_values(without, s.views[0].descriptors).final &&
                       model::encode_values(with, s.views[1].descriptors).intermediate ==
                           model::encode_values(without, s.views[1].descriptors).intermediate;

  bool zero = false;
  if (cli_run({"gen-scene", "--out", (dir / "scenes").string()}) == 0 &&
      cli_run({"train", "--scenes", (dir / "scenes").string(), "--out", (dir / "run").string(), "--max-steps", "0"}) == 0 &&
      cli_run({"eval", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--scenes",
               (dir / "scenes").string(), "--compare", "--out", (dir / "report.json").string()}) == 0) {
    const Json delta = io::read_json(dir / "report.json")["delta"];
    zero = delta["ordinal_accuracy"] == 0.0 && delta["mean_cost_kl"] == 0.0 && delta["inter_delta_mae"] == 0.0;
    for (const auto& [alpha, v] : delta["pck"].items()) zero = zero && v == 0.0;
  }
  fs::remove_all(dir);
  return {bitwise && zero, std::string("features bit-identical: ") + (bitwise ? "yes" : "no") +
                               ", eval --compare deltas all zero: " + (zero ? "yes" : "no")};
}

Outcome distillation_regression() {
  const config::RunConfig rc = config::toy_preset();
  const BenchmarkRun r = run_benchmark(rc);

  int violations = 0;
  const std::size_t horizon = std::min<std::size_t>(r.losses.size(), 200);
  for (std::size_t t = 10; t < horizon; ++t) {
    double prev = 0.0, cur = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
      prev += r.losses[t - 10 + k];
      cur += r.losses[t - 9 + k];
    }
    violations += cur < prev ? 0 : 1;
  }
  const bool a = r.losses.size() >= 200 && violations == 0;
  const double base = r.baseline.pck.at(0.10), dist = r.distilled.pck.at(0.10);
  const bool b = dist > base;
  const bool c = r.distilled.ordinal_accuracy > 0.85 && r.untrained.ordinal_accuracy >= 0.3 &&
                 r.untrained.ordinal_accuracy <= 0.7;
  std::string detail = "(a) " + std::to_string(r.losses.size()) + " steps, moving-average violations in first 200: " +
                       std::to_string(violations) + "; (b) PCK@0.10 " + fmt("%.3f", base) + " -> " + fmt("%.3f", dist) +
                       "; (c) ordinal " + fmt("%.3f", r.untrained.ordinal_accuracy) + " -> " +
                       fmt("%.3f", r.distilled.ordinal_accuracy);
  return {a && b && c, detail};
}

Outcome ablation_direction() {
  int full_wins = 0, relative_wins = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const config::RunConfig full = seeded(seed);
    config::RunConfig match_only = full;
    match_only.train.loss.weights = {1.0, 0.0, 0.0};
    config::RunConfig absolute = full;
    absolute.train.loss.abs_depth = true;

    const BenchmarkRun f = run_benchmark(full);
    const BenchmarkRun m = run_benchmark(match_only);
    const BenchmarkRun a = run_benchmark(absolute);
    full_wins += f.distilled.pck.at(0.10) >= m.distilled.pck.at(0.10) ? 1 : 0;
    relative_wins += f.distilled.ordinal_accuracy >= a.distilled.ordinal_accuracy ? 1 : 0;
    detail += (seed == 0 ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": PCK@0.10 full " +
              fmt("%.3f", f.distilled.pck.at(0.10)) + " vs match-only " + fmt("%.3f", m.distilled.pck.at(0.10)) +
              ", ordinal relative " + fmt("%.3f", f.distilled.ordinal_accuracy) + " vs absolute " +
              fmt("%.3f", a.distilled.ordinal_accuracy);
  }
  return {full_wins >= 2 && relative_wins >= 2, detail};
}

Outcome schedule_fixture() {
  const config::RunConfig rc = config::toy_preset();
  std::vector<scene::SceneSample> scenes;
  for (int i = 0; i < rc.num_scenes; ++i) scenes.push_back(scene::make_sample(config::scene_config_for(rc, i)));
  const trainer::Trainer t(model::Model::initialize(rc.model), scenes, rc.train);
  const long total = t.total_steps();
  const losses::TemperatureSchedule s{rc.train.tau_start, rc.train.tau_end, total};
  const config::RunConfig paper = config::paper_preset();
  const bool ok = s.at(0) == 1.0 && s.at(total) == 0.5 && std::abs(s.at(total / 2) - 0.75) < 1e-12 &&
                  paper.train.tau_start == 1.0 && paper.train.tau_end == 0.5 && total % 2 == 0;
  return {ok, "T = " + std::to_string(total) + ": tau(0) = " + fmt("%.15g", s.at(0)) + ", tau(T/2) = " +
                  fmt("%.15g", s.at(total / 2)) + ", tau(T) = " + fmt("%.15g", s.at(total))};
}

Outcome reproducibility() {
  const fs::path dir = scratch("repro");
  const std::string scenes = (dir / "scenes").string();
  const std::string run = (dir / "run").string();
  bool identical = false, resumed = false;
  double worst = 0.0;
  if (cli_run({"gen-scene", "--out", scenes}) == 0 &&
      cli_run({"train", "--scenes", scenes, "--out", run, "--max-steps", "20"}) == 0) {
    const std::string log1 = io::read_file(dir / "run" / "train_log.ndjson");
    const std::string ckpt1 = io::read_file(dir / "run" / "checkpoint.json");
    fs::remove_all(dir / "run");
    if (cli_run({"train", "--scenes", scenes, "--out", run, "--max-steps", "20"}) == 0) {
      identical = log1 == io::read_file(dir / "run" / "train_log.ndjson") &&
                  ckpt1 == io::read_file(dir / "run" / "checkpoint.json");
    }
    const std::string half = (dir / "half").string();
    const std::string rest = (dir / "rest").string();
    if (cli_run({"train", "--scenes", scenes, "--out", half, "--max-steps", "10"}) == 0 &&
        cli_run({"train", "--resume", half + "/checkpoint.json", "--scenes", scenes, "--out", rest, "--max-steps",
                 "10"}) == 0) {
      std::vector<Json> full, tail;
      std::istringstream a(log1), b(io::read_file(dir / "rest" / "train_log.ndjson"));
      for (std::string line; std::getline(a, line);) full.push_back(Json::parse(line));
      for (std::string line; std::getline(b, line);) tail.push_back(Json::parse(line));
      resumed = full.size() == 20 && tail.size() == 10;
      for (std::size_t i = 0; resumed && i < 10; ++i) {
        resumed = tail[i]["step"] == full[10 + i]["step"];
        worst = std::max(worst, std::abs(tail[i]["L_total"].get<double>() - full[10 + i]["L_total"].get<double>()));
      }
      resumed = resumed && worst < 1e-9;
    }
  }
  fs::remove_all(dir);
  return {identical && resumed, std::string("byte-identical log and checkpoint: ") + (identical ? "yes" : "no") +
                                    ", resume max |dL| over 10 steps " + fmt("%.1e", worst)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> check;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient soundness", 30.0, gradient_soundness},
      {2, "SmoothAP oracle equivalence", 10.0, smooth_ap_oracle},
      {3, "formula fixtures", 60.0, formula_fixtures},
      {4, "invariance suite", 60.0, invariance_suite},
      {5, "LoRA identity", 5.0, lora_identity},
      {6, "distillation regression", 300.0, distillation_regression},
      {7, "ablation directions", 1200.0, ablation_direction},
      {8, "temperature schedule", 60.0, schedule_fixture},
      {9, "reproducibility", 60.0, reproducibility},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs < c.budget_seconds;
    failures += pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s [%.1fs, budget %.0fs]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_seconds);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
