#include "geodistill/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>

namespace geodistill::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

Tape& tape_of(Var a) {
  if (!a.valid()) throw DimensionError("operation on an empty Var");
  return *a.tape();
}

Tape& common_tape(Var a, Var b) {
  Tape& t = tape_of(a);
  if (&tape_of(b) != &t) throw DimensionError("operands belong to different tapes");
  return t;
}

// Result shape for a binary elementwise op, allowing one scalar operand.
std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return {a.rows(), a.cols()};
  if (is_scalar(a)) return {b.rows(), b.cols()};
  if (is_scalar(b)) return {a.rows(), a.cols()};
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

// Reduce a full-shape gradient back onto an operand that may have been broadcast.
Matrix reduce_to(const Matrix& g, const Matrix& operand) {
  if (g.rows() == operand.rows() && g.cols() == operand.cols()) return g;
  return Matrix::Constant(1, 1, g.sum());
}

template <typename Forward, typename Backward>
Var unary(Var a, Forward forward, Backward local_grad) {
  Tape& t = tape_of(a);
  Matrix y = forward(a.value());
  const std::array<Var, 1> parents{a};
  return t.record(std::move(y), parents, [a, local_grad](Tape& tape, const Matrix& g) {
    tape.accumulate(a, local_grad(tape.value(a.id()), g));
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const {
  if (!valid()) throw DimensionError("value() of an empty Var");
  return tape_->value(id_);
}

Matrix Var::grad() const {
  if (!valid()) throw DimensionError("grad() of an empty Var");
  return tape_->grad(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (!is_scalar(v)) throw DimensionError("scalar() on " + shape_str(v) + " value");
  return v(0, 0);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) { return push(Node{std::move(value), {}, false, {}}); }

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::variable(Matrix value) { return push(Node{std::move(value), {}, true, {}}); }

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw DimensionError("parent node belongs to a different tape");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  Node node{std::move(value), {}, needs, {}};
  if (needs) node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::accumulate(Var target, const Matrix& gradient) {
  Node& n = nodes_.at(target.id());
  if (!n.requires_grad) return;
  if (gradient.rows() != n.value.rows() || gradient.cols() != n.value.cols()) {
    throw DimensionError("gradient shape " + shape_str(gradient) + " does not match value " +
                         shape_str(n.value));
  }
  if (n.grad.size() == 0) {
    n.grad = gradient;
  } else {
    n.grad += gradient;
  }
}

Matrix Tape::grad(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw DimensionError("backward root belongs to a different tape");
  if (!is_scalar(root.value())) {
    throw DimensionError("backward requires a scalar root, got " + shape_str(root.value()));
  }
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    // The closure may accumulate into nodes below i only, so `n.grad` stays put.
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(av) + " * " + shape_str(bv));
  }
  Matrix y = av * bv;
  const std::array<Var, 2> parents{a, b};
  return t.record(std::move(y), parents, [a, b](Tape& tape, const Matrix& g) {
    if (tape.requires_grad(a)) tape.accumulate(a, g * b.value().transpose());
    if (tape.requires_grad(b)) tape.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.transpose(); },
      [](const Matrix&, const Matrix& g) -> Matrix { return g.transpose(); });
}

// ---------------------------------------------------------------------------
// Elementwise binary

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  auto [r, c] = broadcast_shape(a.value(), b.value(), "add");
  Matrix y = expand(a.value(), r, c) + expand(b.value(), r, c);
  const std::array<Var, 2> parents{a, b};
  return t.record(std::move(y), parents, [a, b](Tape& tape, const Matrix& g) {
    tape.accumulate(a, reduce_to(g, a.value()));
    tape.accumulate(b, reduce_to(g, b.value()));
  });
}

Var sub(Var a, Var b) {
  Tape& t = common_tape(a, b);
  auto [r, c] = broadcast_shape(a.value(), b.value(), "sub");
  Matrix y = expand(a.value(), r, c) - expand(b.value(), r, c);
  const std::array<Var, 2> parents{a, b};
  return t.record(std::move(y), parents, [a, b](Tape& tape, const Matrix& g) {
    tape.accumulate(a, reduce_to(g, a.value()));
    tape.accumulate(b, reduce_to(-g, b.value()));
  });
}

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  auto [r, c] = broadcast_shape(a.value(), b.value(), "mul");
  Matrix y = expand(a.value(), r, c).cwiseProduct(expand(b.value(), r, c));
  const std::array<Var, 2> parents{a, b};
  return t.record(std::move(y), parents, [a, b, r = r, c = c](Tape& tape, const Matrix& g) {
    const Matrix av = expand(a.value(), r, c);
    const Matrix bv = expand(b.value(), r, c);
    if (tape.requires_grad(a)) tape.accumulate(a, reduce_to(g.cwiseProduct(bv), a.value()));
    if (tape.requires_grad(b)) tape.accumulate(b, reduce_to(g.cwiseProduct(av), b.value()));
  });
}

Var div(Var a, Var b) {
  Tape& t = common_tape(a, b);
  auto [r, c] = broadcast_shape(a.value(), b.value(), "div");
  const Matrix bv = expand(b.value(), r, c);
  if ((bv.array() == 0.0).any()) throw DomainError("div: division by zero");
  Matrix y = expand(a.value(), r, c).cwiseQuotient(bv);
  const std::array<Var, 2> parents{a, b};
  return t.record(std::move(y), parents, [a, b, r = r, c = c](Tape& tape, const Matrix& g) {
    const Matrix av = expand(a.value(), r, c);
    const Matrix bv = expand(b.value(), r, c);
    if (tape.requires_grad(a)) tape.accumulate(a, reduce_to(g.cwiseQuotient(bv), a.value()));
    if (tape.requires_grad(b)) {
      Matrix gb = -(g.array() * av.array() / (bv.array() * bv.array())).matrix();
      tape.accumulate(b, reduce_to(gb, b.value()));
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var scale(Var a, double factor) {
  return unary(
      a, [factor](const Matrix& x) -> Matrix { return factor * x; },
      [factor](const Matrix&, const Matrix& g) -> Matrix { return factor * g; });
}

Var shift(Var a, double offset) {
  return unary(
      a, [offset](const Matrix& x) -> Matrix { return (x.array() + offset).matrix(); },
      [](const Matrix&, const Matrix& g) -> Matrix { return g; });
}

Var negate(Var a) { return scale(a, -1.0); }

Var sigmoid(Var a) {
  auto f = [](const Matrix& x) -> Matrix {
    return x.unaryExpr([](double v) {
      // Split by sign so exp never overflows.
      if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
      const double e = std::exp(v);
      return e / (1.0 + e);
    });
  };
  return unary(a, f, [f](const Matrix& x, const Matrix& g) -> Matrix {
    const Matrix s = f(x);
    return (g.array() * s.array() * (1.0 - s.array())).matrix();
  });
}

Var tanh(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().tanh().matrix(); },
      [](const Matrix& x, const Matrix& g) -> Matrix {
        const Eigen::ArrayXXd th = x.array().tanh();
        return (g.array() * (1.0 - th * th)).matrix();
      });
}

Var exp(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().exp().matrix(); },
      [](const Matrix& x, const Matrix& g) -> Matrix { return (g.array() * x.array().exp()).matrix(); });
}

Var log(Var a) {
  if ((a.value().array() <= 0.0).any()) {
    throw DomainError("log: input must be strictly positive");
  }
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.array().log().matrix(); },
      [](const Matrix& x, const Matrix& g) -> Matrix { return (g.array() / x.array()).matrix(); });
}

Var abs(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.cwiseAbs(); },
      [](const Matrix& x, const Matrix& g) -> Matrix {
        const Matrix sign = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
        return g.cwiseProduct(sign);
      });
}

Var clamp_min(Var a, double floor) {
  return unary(
      a, [floor](const Matrix& x) -> Matrix { return x.cwiseMax(floor); },
      [floor](const Matrix& x, const Matrix& g) -> Matrix {
        return (x.array() > floor).select(g, Matrix::Zero(g.rows(), g.cols()));
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  return unary(
      a, [](const Matrix& x) -> Matrix { return Matrix::Constant(1, 1, x.sum()); },
      [](const Matrix& x, const Matrix& g) -> Matrix { return Matrix::Constant(x.rows(), x.cols(), g(0, 0)); });
}

Var sum(Var a, Axis axis) {
  if (axis == Axis::Rows) {
    return unary(
        a, [](const Matrix& x) -> Matrix { return x.colwise().sum(); },
        [](const Matrix& x, const Matrix& g) -> Matrix { return g.replicate(x.rows(), 1); });
  }
  return unary(
      a, [](const Matrix& x) -> Matrix { return x.rowwise().sum(); },
      [](const Matrix& x, const Matrix& g) -> Matrix { return g.replicate(1, x.cols()); });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw EmptyInputError("mean of an empty array");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean(Var a, Axis axis) {
  const Eigen::Index n = axis == Axis::Rows ? a.rows() : a.cols();
  if (n == 0) throw EmptyInputError("mean over an empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var max(Var a) {
  if (a.value().size() == 0) throw EmptyInputError("max of an empty array");
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  const double m = a.value().maxCoeff(&r, &c);
  return unary(
      a, [m](const Matrix&) -> Matrix { return Matrix::Constant(1, 1, m); },
      [r, c](const Matrix& x, const Matrix& g) -> Matrix {
        Matrix out = Matrix::Zero(x.rows(), x.cols());
        out(r, c) = g(0, 0);
        return out;
      });
}

// ---------------------------------------------------------------------------
// Row-wise ops

Var softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax_rows: temperature must be > 0");
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double row_max = x.row(i).maxCoeff();
    p.row(i) = ((x.row(i).array() - row_max) / temperature).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  const std::array<Var, 1> parents{a};
  const std::size_t out_id = t.size();
  return t.record(std::move(p), parents, [a, out_id, temperature](Tape& tape, const Matrix& g) {
    const Matrix& prob = tape.value(out_id);
    const Eigen::VectorXd inner = (g.cwiseProduct(prob)).rowwise().sum();
    Matrix dx = prob.cwiseProduct(g - inner.replicate(1, g.cols())) / temperature;
    tape.accumulate(a, dx);
  });
}

Var l2_normalize_rows(Var a, double epsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("l2_normalize_rows: epsilon must be > 0");
  auto norms = [epsilon](const Matrix& x) -> Eigen::VectorXd {
    return (x.rowwise().squaredNorm().array() + epsilon).sqrt().matrix();
  };
  return unary(
      a, [norms](const Matrix& x) -> Matrix { return x.array().colwise() / norms(x).array(); },
      [norms](const Matrix& x, const Matrix& g) -> Matrix {
        const Eigen::ArrayXd n = norms(x).array();
        const Eigen::ArrayXd gx = g.cwiseProduct(x).rowwise().sum().array();
        Matrix dx = g.array().colwise() / n;
        dx -= (x.array().colwise() * (gx / (n * n * n))).matrix();
        return dx;
      });
}

Var gather_rows(Var a, std::span<const Eigen::Index> rows) {
  const Matrix& x = a.value();
  for (Eigen::Index r : rows) {
    if (r < 0 || r >= x.rows()) throw DimensionError("gather_rows: row index out of range");
  }
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return unary(
      a,
      [&idx](const Matrix& v) -> Matrix {
        Matrix y(static_cast<Eigen::Index>(idx.size()), v.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) y.row(static_cast<Eigen::Index>(k)) = v.row(idx[k]);
        return y;
      },
      [idx](const Matrix& v, const Matrix& g) -> Matrix {
        Matrix dx = Matrix::Zero(v.rows(), v.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) dx.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
        return dx;
      });
}

Var hcat(Var left, Var right) {
  Tape& t = common_tape(left, right);
  const Matrix& l = left.value();
  const Matrix& r = right.value();
  if (l.rows() != r.rows()) throw DimensionError("hcat: row counts differ " + shape_str(l) + " | " + shape_str(r));
  Matrix y(l.rows(), l.cols() + r.cols());
  y << l, r;
  const std::array<Var, 2> parents{left, right};
  const Eigen::Index split = l.cols();
  return t.record(std::move(y), parents, [left, right, split](Tape& tape, const Matrix& g) {
    tape.accumulate(left, g.leftCols(split));
    tape.accumulate(right, g.rightCols(g.cols() - split));
  });
}

// ---------------------------------------------------------------------------
// Finite differences

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult finite_diff_check(const ScalarFunction& f, const Vector& params, double step) {
  if (!(step > 0.0)) throw ParameterError("finite_diff_check: step must be > 0");
  Vector analytic(params.size());
  f(params, &analytic);
  if (analytic.size() != params.size()) throw DimensionError("finite_diff_check: gradient size mismatch");

  GradCheckResult result;
  Vector probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe(i) = params(i) + step;
    const double up = f(probe, nullptr);
    probe(i) = params(i) - step;
    const double down = f(probe, nullptr);
    probe(i) = params(i);
    const double numeric = (up - down) / (2.0 * step);
    const double err = relative_error(analytic(i), numeric);
    if (err > result.max_relative_error || result.worst_index < 0) {
      result = GradCheckResult{err, i, analytic(i), numeric};
    }
  }
  return result;
}

}  // namespace geodistill::ad
