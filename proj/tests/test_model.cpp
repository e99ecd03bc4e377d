#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "geodistill/errors.hpp"
#include "geodistill/model.hpp"

using namespace geodistill;
using namespace geodistill::model;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Plain MLP over the frozen weights only.
Matrix frozen_forward(const FrozenEncoder& enc, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    Matrix z = h * enc.layers[l].weight;
    z.rowwise() += enc.layers[l].bias.row(0);
    h = l + 1 < enc.layers.size() ? Matrix(z.array().tanh()) : z;
  }
  return h;
}

void randomize(TrainableParameters& p, std::mt19937_64& rng) {
  for (Matrix* m : parameter_list(p)) *m = random_matrix(rng, m->rows(), m->cols(), 0.5 / std::sqrt(double(m->rows())));
}

}  // namespace

TEST_CASE("adapter with B = 0 reproduces the frozen encoder bit for bit") {
  const Model m = Model::initialize(ModelConfig{});
  for (const LoraLayer& l : m.params.adapter.layers) {
    CHECK(l.B.isZero());
    CHECK_FALSE(l.A.isZero());
  }
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(rng, 20, m.config.input_dim);
  CHECK(encode_values(m, x).final == frozen_forward(m.encoder, x));
}

TEST_CASE("one linear layer maps zero descriptors to the bias") {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.adapted_layers = {1};
  cfg.intermediate_layer = 1;
  const Model m = Model::initialize(cfg);
  const Matrix out = encode_values(m, Matrix::Zero(5, cfg.input_dim)).final;
  for (Eigen::Index r = 0; r < out.rows(); ++r) CHECK(out.row(r) == m.encoder.layers[0].bias);
}

TEST_CASE("parameter counts") {
  ModelConfig cfg;
  cfg.adapted_layers = {2};
  const Model m = Model::initialize(cfg);
  CHECK(m.params.adapter.parameter_count() == 4u * (32 + 32));
  CHECK(Model::initialize(ModelConfig{}).trainable_fraction() < 0.15);
  const Model d = Model::initialize(ModelConfig{});
  CHECK(parameter_count(d.params) == static_cast<std::size_t>(flatten(d.params).size()));
  CHECK(parameter_names(d.params).size() == parameter_list(d.params).size());
}

TEST_CASE("flatten and unflatten round-trip") {
  Model m = Model::initialize(ModelConfig{});
  std::mt19937_64 rng(2);
  randomize(m.params, rng);
  const Vector flat = flatten(m.params);
  TrainableParameters copy = Model::initialize(ModelConfig{}).params;
  unflatten(copy, flat);
  CHECK(flatten(copy) == flat);
  CHECK_THROWS_AS(unflatten(copy, Vector::Zero(3)), DimensionError);
}

TEST_CASE("B = 0 gives zero adapter output but a nonzero gradient on B") {
  const Model m = Model::initialize(ModelConfig{});
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(rng, 10, m.config.input_dim);
  ad::Tape tape;
  const BoundParameters bound = bind(tape, m.params);
  const EncodedView e = encode(tape, m, bound, x);
  tape.backward(ad::sum(ad::mul(e.final.features, tape.constant(random_matrix(rng, 10, m.config.hidden_dim)))));
  for (std::size_t l = 0; l < bound.lora_b.size(); ++l) {
    CHECK(bound.lora_b[l].grad().norm() > 0.0);
    CHECK(bound.lora_a[l].grad().isZero());
  }
  CHECK(e.final.tag == LayerTag::Final);
  CHECK(e.intermediate.tag == LayerTag::Intermediate);
}

TEST_CASE("encoder gradients match finite differences") {
  Model m = Model::initialize(ModelConfig{});
  std::mt19937_64 rng(4);
  randomize(m.params, rng);
  const Matrix x = random_matrix(rng, 6, m.config.input_dim);
  const Matrix w = random_matrix(rng, 6, m.config.hidden_dim);
  const ad::ScalarFunction f = [&](const Vector& theta, Vector* grad) {
    TrainableParameters p = m.params;
    unflatten(p, theta);
    ad::Tape tape;
    const BoundParameters bound = bind(tape, p);
    const EncodedView e = encode(tape, m, bound, x);
    ad::Var l = ad::add(ad::sum(ad::mul(e.final.features, tape.constant(w))), ad::mean(e.intermediate.features));
    if (grad != nullptr) {
      tape.backward(l);
      *grad = bound.gradient();
    }
    return l.scalar();
  };
  CHECK(ad::finite_diff_check(f, flatten(m.params)).max_relative_error < 1e-4);
}

TEST_CASE("rank score is exactly antisymmetric") {
  Model m = Model::initialize(ModelConfig{});
  std::mt19937_64 rng(5);
  randomize(m.params, rng);
  ad::Tape tape;
  const BoundParameters bound = bind(tape, m.params, false);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Var fx = tape.constant(random_matrix(rng, 1, m.config.hidden_dim));
    ad::Var fy = tape.constant(random_matrix(rng, 1, m.config.hidden_dim));
    CHECK(rank_score(bound, fx, fy).scalar() == -rank_score(bound, fy, fx).scalar());
    CHECK(rank_score(bound, fx, fx).scalar() == 0.0);
  }
  const Matrix feats = random_matrix(rng, 8, m.config.hidden_dim);
  const std::vector<Eigen::Index> x{0, 3, 5}, y{4, 1, 5};
  const Matrix s_xy = rank_scores(bound, tape.constant(feats), x, y).value();
  const Matrix s_yx = rank_scores(bound, tape.constant(feats), y, x).value();
  CHECK(s_xy == -s_yx);
  const Vector u = rank_potential(m.params, feats);
  for (std::size_t k = 0; k < x.size(); ++k) {
    CHECK(s_xy(static_cast<Eigen::Index>(k), 0) == doctest::Approx(u(x[k]) - u(y[k])).epsilon(1e-12));
  }
}

TEST_CASE("head gradients match finite differences") {
  Model m = Model::initialize(ModelConfig{});
  std::mt19937_64 rng(6);
  randomize(m.params, rng);
  const Matrix f1 = random_matrix(rng, 5, m.config.hidden_dim);
  const Matrix f2 = random_matrix(rng, 5, m.config.hidden_dim);
  const Matrix w = random_matrix(rng, 5, 1);
  const ad::ScalarFunction f = [&](const Vector& theta, Vector* grad) {
    TrainableParameters p = m.params;
    unflatten(p, theta);
    ad::Tape tape;
    const BoundParameters bound = bind(tape, p);
    ad::Var a = tape.constant(f1);
    ad::Var b = tape.constant(f2);
    const std::vector<Eigen::Index> x{0, 1, 2}, y{3, 4, 0};
    ad::Var l = ad::sum(rank_scores(bound, a, x, y));
    l = ad::add(l, ad::sum(ad::mul(inter_delta(bound, a, b), tape.constant(w))));
    l = ad::add(l, ad::sum(ad::mul(abs_depth_prediction(bound, a), tape.constant(w))));
    if (grad != nullptr) {
      tape.backward(l);
      *grad = bound.gradient();
    }
    return l.scalar();
  };
  CHECK(ad::finite_diff_check(f, flatten(m.params)).max_relative_error < 1e-5);
}

TEST_CASE("inter-view delta head") {
  Model m = Model::initialize(ModelConfig{});
  ad::Tape tape;
  std::mt19937_64 rng(7);
  {
    TrainableParameters zero = m.params;
    zero.delta_head.hidden_weight.setZero();
    zero.delta_head.hidden_bias.setZero();
    zero.delta_head.out_weight.setZero();
    zero.delta_head.out_bias.setZero();
    const BoundParameters bound = bind(tape, zero, false);
    const Matrix out = inter_delta(bound, tape.constant(random_matrix(rng, 4, 32)), tape.constant(random_matrix(rng, 4, 32))).value();
    CHECK(out.isZero());
  }
  TrainableParameters big = m.params;
  for (Matrix* p : parameter_list(big)) *p = random_matrix(rng, p->rows(), p->cols(), 5.0);
  const BoundParameters bound = bind(tape, big, false);
  const Matrix out = inter_delta(bound, tape.constant(random_matrix(rng, 1000, 32, 3.0)),
                                 tape.constant(random_matrix(rng, 1000, 32, 3.0))).value();
  CHECK(out.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(out.rows() == 1000);
}

TEST_CASE("model config validation") {
  ModelConfig c;
  c.rank = 0;
  CHECK_THROWS_AS(Model::initialize(c), ConfigError);
  c = ModelConfig{};
  c.adapted_layers = {2, 2};
  CHECK_THROWS_AS(Model::initialize(c), ConfigError);
  c = ModelConfig{};
  c.intermediate_layer = 7;
  CHECK_THROWS_AS(Model::initialize(c), ConfigError);
}
