#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedcsap/fedruntime/federated.hpp"

namespace fedcsap {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Checkpoint layout: the magic "FCKP1", then until end of file, per tensor:
//   u32 name length, name bytes, u32 rank, rank x u64 extents,
//   product(extents) x f64 values. All integers and floats little-endian.
void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

/// theta.* and phi.* parameters followed by one style.client.<id> buffer per
/// client.
std::vector<NamedTensor> checkpoint_entries(const ModelParams& params, std::span<const Client> clients);
void save_checkpoint(const std::string& path, const ModelParams& params, std::span<const Client> clients);

/// Overwrites `params` (and client running styles, when present) from a
/// checkpoint. Names and shapes must match the current layout.
void restore_checkpoint(const std::string& path, ModelParams& params, std::span<Client> clients);

}  // namespace fedcsap
