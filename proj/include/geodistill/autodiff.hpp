#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Values are Eigen
// matrices (vectors are m x 1, scalars 1 x 1). Broadcasting is limited to
// scalar-with-array in the binary elementwise ops; every other shape
// mismatch throws DimensionError.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "geodistill/errors.hpp"

namespace geodistill::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  /// Accumulated gradient, or zeros of the value's shape if none reached this node.
  Matrix grad() const;
  double scalar() const;

  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Local vector-Jacobian product: receives the node's upstream gradient and
  /// pushes contributions into its parents via accumulate().
  using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  Var variable(Matrix value);

  /// Records an op result. `backward` is kept only if some parent needs a gradient.
  Var record(Matrix value, std::span<const Var> parents, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  /// Gradients add up across repeated calls and across multiple uses of a node.
  void backward(Var root);
  void zero_grad();

  void accumulate(Var target, const Matrix& gradient);

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  Matrix grad(std::size_t id) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until first accumulate
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);
  std::vector<Node> nodes_;
};

enum class Axis { Rows = 0, Cols = 1 };

// Linear algebra
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise binary ops (same shape, or one side 1 x 1)
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

// Elementwise unary ops
Var scale(Var a, double factor);
Var shift(Var a, double offset);
Var negate(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
/// Throws DomainError when an entry is zero or negative; NaN passes through.
Var log(Var a);
/// Subgradient 0 at exactly 0.
Var abs(Var a);
/// max(a, floor) with gradient 1 where a > floor, else 0.
Var clamp_min(Var a, double floor);

// Reductions. Axis::Rows collapses rows (result 1 x n), Axis::Cols collapses columns (m x 1).
Var sum(Var a);
Var sum(Var a, Axis axis);
Var mean(Var a);
Var mean(Var a, Axis axis);
/// Global maximum; gradient flows to the first maximal entry in column-major order.
Var max(Var a);

/// Row-wise softmax of a / temperature, stabilized by subtracting each row's max.
Var softmax_rows(Var a, double temperature);
/// Each row divided by sqrt(|row|^2 + epsilon); zero rows stay zero.
Var l2_normalize_rows(Var a, double epsilon = 1e-12);

Var gather_rows(Var a, std::span<const Eigen::Index> rows);
Var hcat(Var left, Var right);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return negate(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator+(double c, Var a) { return shift(a, c); }

/// Scalar objective with optional analytic gradient output.
using ScalarFunction = std::function<double(const Vector& params, Vector* gradient)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

/// Central differences (f(p+h) - f(p-h)) / 2h on every coordinate, compared
/// against the gradient reported by `f` at `params`.
GradCheckResult finite_diff_check(const ScalarFunction& f, const Vector& params, double step = 1e-5);

}  // namespace geodistill::ad
