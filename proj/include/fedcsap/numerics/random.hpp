#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "fedcsap/numerics/tensor.hpp"

namespace fedcsap {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

/// Sub-seed for a named component: splitmix64(master ^ fnv1a64(name)).
/// Streams are keyed by name, so adding a component never shifts another.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);
/// Indexed variant, e.g. one stream per (client, round).
std::uint64_t derive_seed(std::uint64_t master, std::string_view component, std::uint64_t index);

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

}  // namespace fedcsap
