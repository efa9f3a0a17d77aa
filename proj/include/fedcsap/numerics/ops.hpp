#pragma once

#include <span>
#include <vector>

#include "fedcsap/numerics/tape.hpp"

// Differentiable operations on tape variables.
//
// Binary elementwise ops require identical shapes; the only implicit
// broadcast is a scalar (single-element) operand. Row-wise expansion is
// spelled explicitly with repeat_rows / tile_rows / affine.

namespace fedcsap {

Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var relu(Var a);
Var sigmoid(Var a);
Var abs(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

Var softmax(Var v, Index axis);
Var log_softmax(Var v, Index axis);

/// Normalizes the last axis to zero mean and unit variance, then applies
/// gamma * x + beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps);

enum class ReduceOp { sum, mean };
/// Reduces over the given axes (dropped from the result). An empty axis list
/// is the identity.
Var reduce(ReduceOp op, Var x, std::vector<Index> axes);
Var sum(Var x);
Var mean(Var x);

/// Divides each last-axis vector by max(norm, eps).
Var l2_normalize(Var x, double eps = 1e-12);

Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, Index axis);
Var slice(Var x, Index axis, Index start, Index length);

/// [r0; r1] -> [r0; r0; r1; r1] for times = 2.
Var repeat_rows(Var x, Index times);
/// [r0; r1] -> [r0; r1; r0; r1] for times = 2.
Var tile_rows(Var x, Index times);

/// x[B x in] * w[in x out] + b[out] added to every row.
Var affine(Var x, Var w, Var b);

/// Mean negative log-likelihood over rows of a logit matrix, via log-sum-exp.
Var cross_entropy(Var logits, std::span<const Index> labels);

/// Tensor-level helpers used outside the tape.
Tensor softmax(const Tensor& v, Index axis);

struct NormalizedRows {
  Tensor value;
  std::vector<bool> degenerate;  // rows whose norm fell below eps
};
NormalizedRows l2_normalize(const Tensor& x, double eps = 1e-12);

}  // namespace fedcsap
