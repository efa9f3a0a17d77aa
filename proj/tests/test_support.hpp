#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "fedcsap/numerics/ops.hpp"
#include "fedcsap/numerics/parameter_store.hpp"
#include "fedcsap/numerics/random.hpp"
#include "fedcsap/numerics/tape.hpp"

namespace fedcsap::testing {

// Independent central-difference oracle; deliberately does not go through
// finite_diff_check so that the checker itself can be tested against it.
using ScalarFn = std::function<Var(Tape&, Var)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  return normal_tensor(std::move(shape), stddev, rng);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Index uniform_index(Rng& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

inline double scalar_at(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  return f(tape, tape.constant(x)).value().item();
}

inline Vector analytic_grad(const ScalarFn& f, const Tensor& x) {
  Tensor p(x.shape(), x.data());
  p.set_requires_grad(true);
  Tape tape;
  Var out = f(tape, tape.parameter(p));
  tape.backward(out);
  return p.grad();
}

inline Vector central_diff(const ScalarFn& f, const Tensor& x, double h) {
  Vector g(x.size());
  Tensor probe(x.shape(), x.data());
  for (Index i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double up = scalar_at(f, probe);
    probe[i] = saved - h;
    const double down = scalar_at(f, probe);
    probe[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const Vector& a, const Vector& b) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double grad_error(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  return max_rel_err(analytic_grad(f, x), central_diff(f, x, h));
}

/// Max relative error over every coordinate of every tensor in `stores`.
/// `loss` must bind the store tensors with Tape::parameter.
inline double store_grad_error(const std::function<Var(Tape&)>& loss, std::initializer_list<ParameterStore*> stores,
                               double h = 1e-5) {
  for (ParameterStore* s : stores) s->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto value = [&loss] {
    Tape tape;
    return loss(tape).value().item();
  };
  double worst = 0.0;
  for (ParameterStore* s : stores) {
    for (auto& entry : *s) {
      Tensor& p = entry.value;
      const Vector analytic = p.grad();
      Vector numeric(p.size());
      for (Index i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + h;
        const double up = value();
        p[i] = saved - h;
        const double down = value();
        p[i] = saved;
        numeric[i] = (up - down) / (2.0 * h);
      }
      worst = std::max(worst, max_rel_err(analytic, numeric));
    }
    s->zero_grad();
  }
  return worst;
}

/// Random projection to a scalar so vector-valued ops can be checked with a
/// scalar oracle.
inline ScalarFn project(std::function<Var(Tape&, Var)> op, const Tensor& weights) {
  return [op = std::move(op), weights](Tape& tape, Var x) { return sum(op(tape, x) * tape.constant(weights)); };
}

}  // namespace fedcsap::testing
