#include "fedcsap/fedruntime/checkpoint.hpp"

#include <fstream>
#include <map>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/util/binary_io.hpp"

namespace fedcsap {

namespace {
constexpr std::string_view kCheckpointMagic = "FCKP1";
const std::string kStylePrefix = "style.client.";
}  // namespace

void write_checkpoint(std::ostream& out, std::span<const NamedTensor> tensors) {
  binary::write_bytes(out, kCheckpointMagic);
  for (const NamedTensor& t : tensors) {
    binary::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    binary::write_bytes(out, t.name);
    binary::write_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (Index e : t.value.shape()) binary::write_u64(out, static_cast<std::uint64_t>(e));
    for (Index i = 0; i < t.value.size(); ++i) binary::write_f64(out, t.value[i]);
  }
  if (!out) throw FormatError("failed writing checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  binary::expect_magic(in, kCheckpointMagic);
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    NamedTensor t;
    const std::uint32_t len = binary::read_u32(in, "name length");
    t.name = binary::read_string(in, len, "name");
    const std::uint32_t rank = binary::read_u32(in, "rank");
    if (rank == 0 || rank > 8) throw FormatError("tensor '" + t.name + "' has unsupported rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(binary::read_u64(in, "extent")));
    t.value = Tensor(shape);
    for (Index i = 0; i < t.value.size(); ++i) t.value[i] = binary::read_f64(in, "value");
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor> checkpoint_entries(const ModelParams& params, std::span<const Client> clients) {
  std::vector<NamedTensor> out;
  for (const auto& e : params.theta) out.push_back({"theta." + e.name, Tensor(e.value.shape(), e.value.data())});
  for (const auto& e : params.phi) out.push_back({"phi." + e.name, Tensor(e.value.shape(), e.value.data())});
  for (const Client& c : clients) {
    if (c.style().value().size() > 0) out.push_back({kStylePrefix + std::to_string(c.id()), c.style().value()});
  }
  return out;
}

void save_checkpoint(const std::string& path, const ModelParams& params, std::span<const Client> clients) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(out, checkpoint_entries(params, clients));
}

void restore_checkpoint(const std::string& path, ModelParams& params, std::span<Client> clients) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::map<std::string, Tensor> by_name;
  for (NamedTensor& t : read_checkpoint(in)) by_name[t.name] = std::move(t.value);
  auto restore_store = [&](ParameterStore& store, const std::string& prefix) {
    for (auto& e : store) {
      auto it = by_name.find(prefix + e.name);
      if (it == by_name.end()) throw FormatError("checkpoint lacks '" + prefix + e.name + "'");
      if (it->second.shape() != e.value.shape()) {
        throw FormatError("checkpoint tensor '" + prefix + e.name + "' has shape " + to_string(it->second.shape()) +
                          ", expected " + to_string(e.value.shape()));
      }
      e.value.data() = it->second.data();
      e.value.zero_grad();
    }
  };
  restore_store(params.theta, "theta.");
  restore_store(params.phi, "phi.");
  for (Client& c : clients) {
    auto it = by_name.find(kStylePrefix + std::to_string(c.id()));
    if (it != by_name.end()) c.style().restore(it->second, 1);
  }
}

}  // namespace fedcsap
