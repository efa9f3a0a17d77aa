#pragma once

#include <deque>
#include <string>
#include <string_view>

#include "fedcsap/numerics/tensor.hpp"

namespace fedcsap {

/// Named, insertion-ordered collection of trainable tensors.
///
/// Copying a store deep-copies every tensor. References returned by add() and
/// at() stay valid for the store's lifetime.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  Tensor& add(std::string name, Tensor init);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  /// Number of scalar parameters.
  Index parameter_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();

  /// A frozen store is never updated and never communicated.
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  /// True when names, shapes and values all match bitwise.
  bool identical(const ParameterStore& other) const;
  /// Names and shapes match.
  bool same_layout(const ParameterStore& other) const;

 private:
  std::deque<Entry> entries_;
  bool frozen_ = false;
};

/// p <- p - lr * grad for every tensor, then clears gradients.
void sgd_step(ParameterStore& params, double lr);

}  // namespace fedcsap
