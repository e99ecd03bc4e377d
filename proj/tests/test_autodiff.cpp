#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "geodistill/autodiff.hpp"

using namespace geodistill;
using ad::Matrix;
using ad::Tape;
using ad::Var;
using ad::Vector;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// sum(op(x) .* w) with fixed random w, checked against central differences.
template <typename Op>
double check_unary(Op op, const Matrix& x0, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Matrix weights;
  const ad::ScalarFunction f = [&](const Vector& theta, Vector* grad) {
    Tape tape;
    Var x = tape.variable(Eigen::Map<const Matrix>(theta.data(), x0.rows(), x0.cols()));
    Var y = op(x);
    if (weights.size() == 0) weights = random_matrix(rng, y.rows(), y.cols());
    Var l = ad::sum(ad::mul(y, tape.constant(weights)));
    if (grad != nullptr) {
      tape.backward(l);
      const Matrix g = x.grad();
      *grad = Eigen::Map<const Vector>(g.data(), g.size());
    }
    return l.scalar();
  };
  const Vector theta = Eigen::Map<const Vector>(x0.data(), x0.size());
  return ad::finite_diff_check(f, theta).max_relative_error;
}

}  // namespace

TEST_CASE("matmul fixtures") {
  Tape tape;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  CHECK(ad::matmul(tape.constant(Matrix::Identity(2, 2)), tape.constant(a)).value() == a);
  Matrix r(1, 2), c(2, 1);
  r << 1, 0;
  c << 0, 1;
  CHECK(ad::matmul(tape.constant(r), tape.constant(c)).scalar() == 0.0);
  CHECK_THROWS_AS(ad::matmul(tape.constant(a), tape.constant(r)), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(3);
  const Matrix b = random_matrix(rng, 3, 3);
  CHECK(check_unary([&](Var x) { return ad::matmul(x, x.tape()->constant(b)); }, random_matrix(rng, 3, 3)) < 1e-6);
  CHECK(check_unary([&](Var x) { return ad::matmul(x.tape()->constant(b), x); }, random_matrix(rng, 3, 3)) < 1e-6);
}

TEST_CASE("elementwise fixtures") {
  Tape tape;
  CHECK(ad::sigmoid(tape.constant(0.0)).scalar() == 0.5);
  CHECK(ad::tanh(tape.constant(0.0)).scalar() == 0.0);
  Matrix v(3, 1);
  v << 1, 2, 3;
  CHECK(ad::mean(tape.constant(v)).scalar() == 2.0);
  CHECK(ad::sum(tape.constant(Matrix::Zero(4, 3))).scalar() == 0.0);
  CHECK_THROWS_AS(ad::log(tape.constant(Matrix::Zero(1, 2))), DomainError);
  CHECK_THROWS_AS(ad::add(tape.constant(Matrix::Zero(2, 2)), tape.constant(Matrix::Zero(3, 2))), DimensionError);
}

TEST_CASE("every op passes the finite-difference check at random points") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = random_matrix(rng, 3, 4);
    const Matrix pos = random_matrix(rng, 3, 4, 0.5, 2.0);
    const Matrix other = random_matrix(rng, 3, 4);
    const Matrix other_pos = random_matrix(rng, 3, 4, 0.5, 2.0);
    auto c = [](Var x, const Matrix& m) { return x.tape()->constant(m); };
    CHECK(check_unary([](Var a) { return ad::sigmoid(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::tanh(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::exp(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::log(a); }, pos) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::abs(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::clamp_min(a, 0.1); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::scale(ad::shift(ad::negate(a), 0.3), 2.5); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::add(a, c(a, other)); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::sub(c(a, other), a); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::mul(a, c(a, other)); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::div(c(a, other), a); }, pos) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::div(a, c(a, other_pos)); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::mul(a, ad::sum(a)); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::mean(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::sum(a, ad::Axis::Rows); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::mean(a, ad::Axis::Cols); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::max(a); }, x) < 1e-6);
    CHECK(check_unary([](Var a) { return ad::softmax_rows(a, 0.7); }, x) < 1e-5);
    CHECK(check_unary([](Var a) { return ad::l2_normalize_rows(a); }, x) < 1e-5);
    CHECK(check_unary([](Var a) { return ad::transpose(a); }, x) < 1e-6);
    const std::vector<Eigen::Index> rows{2, 0, 2};
    CHECK(check_unary([&](Var a) { return ad::gather_rows(a, rows); }, x) < 1e-6);
    CHECK(check_unary([&](Var a) { return ad::hcat(a, ad::tanh(a)); }, x) < 1e-6);
  }
}

TEST_CASE("softmax rows") {
  Tape tape;
  Matrix equal = Matrix::Constant(2, 5, 3.0);
  for (double tau : {0.1, 1.0, 7.0}) {
    const Matrix s = ad::softmax_rows(tape.constant(equal), tau).value();
    CHECK((s.array() - 0.2).abs().maxCoeff() < 1e-15);
  }
  Matrix row(1, 2);
  row << std::log(2.0), 0.0;
  const Matrix s = ad::softmax_rows(tape.constant(row), 1.0).value();
  CHECK(s(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(s(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix x = random_matrix(rng, 4, 9, -20.0, 20.0);
    const Matrix p = ad::softmax_rows(tape.constant(x), 0.5).value();
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(p.minCoeff() >= 0.0);
    CHECK(p.maxCoeff() <= 1.0);
  }
  CHECK_THROWS_AS(ad::softmax_rows(tape.constant(Matrix::Zero(2, 2)), 0.0), ParameterError);
}

TEST_CASE("l2 normalize rows") {
  Tape tape;
  Matrix m(2, 2);
  m << 3, 4, 0, 0;
  const Matrix n = ad::l2_normalize_rows(tape.constant(m)).value();
  CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(n(1, 0) == 0.0);
  CHECK(n(1, 1) == 0.0);

  Var z = tape.variable(Matrix::Zero(1, 3));
  tape.backward(ad::sum(ad::l2_normalize_rows(z)));
  CHECK(z.grad().allFinite());
}

TEST_CASE("backward basics") {
  Tape tape;
  Var x = tape.variable(Matrix::Constant(2, 3, 1.5));
  Var k = ad::sum(tape.constant(7.0));
  CHECK_FALSE(tape.requires_grad(k));
  CHECK(x.grad().isZero());

  Var s = ad::sum(x);
  tape.backward(s);
  CHECK(x.grad() == Matrix::Ones(2, 3));
}

TEST_CASE("a node used twice accumulates both paths") {
  Tape tape;
  Matrix v(1, 3);
  v << 1.0, -2.0, 0.5;
  Var x = tape.variable(v);
  tape.backward(ad::sum(ad::mul(x, x)));
  CHECK(x.grad() == 2.0 * v);
}

TEST_CASE("forward evaluation is deterministic") {
  std::mt19937_64 rng(9);
  const Matrix a = random_matrix(rng, 5, 6);
  const Matrix b = random_matrix(rng, 6, 4);
  auto run = [&] {
    Tape tape;
    Var x = tape.variable(a);
    Var y = ad::softmax_rows(ad::tanh(ad::matmul(x, tape.constant(b))), 0.3);
    Var l = ad::sum(ad::l2_normalize_rows(y));
    tape.backward(l);
    return std::pair{l.scalar(), x.grad()};
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("finite-difference checker") {
  const ad::ScalarFunction quad = [](const Vector& t, Vector* g) {
    if (g != nullptr) *g = 2.0 * t;
    return t.squaredNorm();
  };
  Vector theta(2);
  theta << 1.0, 2.0;
  const ad::GradCheckResult r = ad::finite_diff_check(quad, theta);
  CHECK(r.max_relative_error < 1e-8);

  const ad::ScalarFunction wrong = [](const Vector& t, Vector* g) {
    if (g != nullptr) *g = 3.0 * t;
    return t.squaredNorm();
  };
  const ad::GradCheckResult bad = ad::finite_diff_check(wrong, theta);
  CHECK(bad.max_relative_error > 0.3);
  CHECK(ad::relative_error(0.0, 0.0) == 0.0);
  CHECK(ad::relative_error(1e-9, 0.0) == doctest::Approx(0.1));
}
