#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedcsap/numerics/parameter_store.hpp"
#include "fedcsap/numerics/tape.hpp"

namespace fedcsap {

/// Builds a scalar loss on the given tape, binding parameters with
/// Tape::parameter. Must be deterministic in the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct BlockError {
  std::string name;
  Index coordinates = 0;
  double max_rel_error = 0.0;
  bool skipped = false;  // belongs to a frozen store
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<BlockError> blocks;
};

/// Compares analytic gradients with central differences
/// (f(p + h) - f(p - h)) / 2h, coordinate by coordinate. The relative error
/// uses max(|analytic|, |numeric|, 1e-8) as denominator. Frozen stores are
/// reported as skipped.
GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<ParameterStore* const> stores, double h = 1e-5);

/// Relative error with the checker's denominator convention.
double relative_error(double analytic, double numeric);

}  // namespace fedcsap
