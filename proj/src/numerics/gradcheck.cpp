#include "fedcsap/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape;
  return loss(tape).value().item();
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<ParameterStore* const> stores, double h) {
  if (!(h > 0.0)) throw InputError("finite_diff_check: h must be positive");
  for (ParameterStore* s : stores) s->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  GradCheckReport report;
  for (ParameterStore* store : stores) {
    for (auto& entry : *store) {
      BlockError block{entry.name, entry.value.size(), 0.0, store->frozen()};
      if (!block.skipped) {
        Tensor& p = entry.value;
        const Vector analytic = p.grad();
        for (Index i = 0; i < p.size(); ++i) {
          const double saved = p[i];
          p[i] = saved + h;
          const double up = evaluate(loss);
          p[i] = saved - h;
          const double down = evaluate(loss);
          p[i] = saved;
          const double numeric = (up - down) / (2.0 * h);
          block.max_rel_error = std::max(block.max_rel_error, relative_error(analytic[i], numeric));
        }
        report.max_rel_error = std::max(report.max_rel_error, block.max_rel_error);
      }
      report.blocks.push_back(std::move(block));
    }
    store->zero_grad();
  }
  return report;
}

}  // namespace fedcsap
