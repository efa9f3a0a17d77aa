#pragma once

#include <span>
#include <vector>

#include "fedcsap/datagen/dataset.hpp"
#include "fedcsap/fedruntime/federated.hpp"

namespace fedcsap::harness {

/// 3 / (1/a + 1/b + 1/c); 0 when any value is 0.
double harmonic_mean(double a, double b, double c);

/// Style statistic used at evaluation time for examples of `domain`: the
/// running style of the first client bound to that domain, or the mean of
/// every client's running style when no client saw it.
Tensor style_for_domain(Index domain, std::span<const Client> clients);

/// Local / base / new accuracy on the held-out split.
///
/// local: each client's held-out examples (its classes, its domain) scored
///   against its own class set, averaged over clients.
/// base:  the union of those examples scored against all base classes.
/// new:   held-out examples of the new classes from every domain, scored
///   against the new class names only.
class ProtocolEvaluator {
 public:
  ProtocolEvaluator(const FedCsapModel& model, const Dataset& data, const ClassSplit& split,
                    std::span<const Client> clients, double tau);

  EvalResult operator()(ModelParams& params, std::span<const Client> clients) const;

  struct Group {
    ImageFeatures features;
    std::vector<Index> labels;   // positions in class_embeds
    std::vector<Index> domains;  // per row
    std::vector<Index> owners;   // per row client index, or empty to look up by domain
    Tensor class_embeds;
  };
  /// Fraction of rows of `group` classified correctly.
  double accuracy(const Group& group, ModelParams& params, std::span<const Client> clients,
                  const Tensor* fixed_style) const;

 private:
  Group make_group(const Dataset& data, std::span<const Index> classes, Index only_domain) const;

  const FedCsapModel* model_;
  double tau_;
  std::vector<Group> local_;
  Group base_;
  Group novel_;
};

}  // namespace fedcsap::harness
