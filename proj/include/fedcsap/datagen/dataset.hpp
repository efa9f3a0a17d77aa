#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedcsap/encoders/vision_encoder.hpp"

namespace fedcsap {

struct StyleParams {
  double brightness_shift = 0.0;
  double contrast_scale = 1.0;
  std::vector<double> channel_bias;  // one entry per image channel
};

struct SyntheticTaskConfig {
  Index num_classes = 16;
  Index shots_per_class = 8;
  std::vector<StyleParams> domains{StyleParams{}};
  ImageShape image_shape;
  double class_margin = 1.0;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct Example {
  Tensor image;
  Index label = 0;
  Index domain = 0;
};

/// Every (class, domain) pair holds shots_per_class training examples and
/// the same number of held-out evaluation examples.
struct Dataset {
  ImageShape image_shape;
  Index num_classes = 0;
  Index shots_per_class = 0;
  Index num_domains = 0;
  std::vector<std::string> class_names;
  std::vector<Example> train;
  std::vector<Example> eval;

  /// Bitwise equality of every field.
  bool identical(const Dataset& other) const;
};

/// Each class gets a prototype (per-channel N(0, 1) offset plus per-pixel
/// N(0, 1) pattern) drawn by rejection sampling so that all
/// prototypes are at least class_margin apart; an example is
/// contrast * (prototype + N(0, noise_sigma)) + brightness + channel_bias.
/// Held-out examples use a separate noise stream.
Dataset generate_dataset(const SyntheticTaskConfig& cfg);

struct ClassSplit {
  std::vector<Index> base;
  std::vector<Index> novel;
};

/// Sorted ids; the first ceil(n/2) are base, the rest new.
ClassSplit base_new_split(std::vector<Index> class_ids);

struct ClientShard {
  Index client_id = 0;
  std::vector<Index> class_ids;
  std::vector<Example> examples;
  std::vector<std::string> class_names;
  Index domain_id = 0;
};

/// Splits sorted base classes into consecutive disjoint blocks of
/// per_client classes. Shard i draws `shots` training examples per class
/// from domain i mod num_domains.
std::vector<ClientShard> partition_clients(const Dataset& data, std::span<const Index> base_classes, Index per_client,
                                           Index shots);

/// Binary dataset format: "FCSD1" followed by little-endian fields.
void save_dataset(const Dataset& data, std::ostream& out);
Dataset load_dataset(std::istream& in);
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace fedcsap
