#include "fedcsap/numerics/parameter_store.hpp"

#include <algorithm>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap {

Tensor& ParameterStore::add(std::string name, Tensor init) {
  if (contains(name)) throw InputError("duplicate parameter name '" + name + "'");
  init.set_requires_grad(true);
  entries_.push_back({std::move(name), std::move(init)});
  return entries_.back().value;
}

Tensor& ParameterStore::at(std::string_view name) {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
  if (it == entries_.end()) throw InputError("unknown parameter '" + std::string(name) + "'");
  return it->value;
}

const Tensor& ParameterStore::at(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->at(name);
}

bool ParameterStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

Index ParameterStore::parameter_count() const {
  Index n = 0;
  for (const Entry& e : entries_) n += e.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (Entry& e : entries_) e.value.zero_grad();
}

bool ParameterStore::same_layout(const ParameterStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].value.shape() != other.entries_[i].value.shape()) {
      return false;
    }
  }
  return true;
}

bool ParameterStore::identical(const ParameterStore& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].value.identical(other.entries_[i].value)) return false;
  }
  return true;
}

void sgd_step(ParameterStore& params, double lr) {
  if (lr < 0.0) throw InputError("sgd_step: learning rate must be non-negative");
  for (auto& e : params) {
    if (!params.frozen() && lr != 0.0) e.value.data() -= lr * e.value.grad();
    e.value.zero_grad();
  }
}

}  // namespace fedcsap
