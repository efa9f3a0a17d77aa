#include "fedcsap/numerics/tape.hpp"

#include <atomic>
#include <string>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap {

const Tensor& Var::value() const {
  if (tape == nullptr) throw TapeError("variable is not bound to a tape");
  return tape->value(id);
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw TapeError("tape already ran backward; reset() before recording");
  if (!value.all_finite()) throw NumericError("non-finite constant " + to_string(value.shape()));
  Node node;
  node.value = std::move(value);
  node.value.set_requires_grad(false);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor& param) {
  if (consumed_) throw TapeError("tape already ran backward; reset() before recording");
  if (!param.all_finite()) throw NumericError("non-finite parameter " + to_string(param.shape()));
  if (!param.requires_grad()) param.set_requires_grad(true);
  Node node;
  node.value = Tensor(param.shape(), param.data());
  node.param = &param;
  node.needs_grad = true;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (consumed_) throw TapeError("tape already ran backward; reset() before recording");
  if (!value.all_finite()) {
    throw NumericError("non-finite output from " + std::string(op) + " with shape " + to_string(value.shape()));
  }
  bool needs = false;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw TapeError("input node " + std::to_string(in) + " is not on this tape");
    needs = needs || nodes_[in].needs_grad;
  }
  Node node;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.needs_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

void Tape::check_live(std::span<const Var> vars) const {
  if (consumed_) throw TapeError("tape already ran backward; reset() before recording");
  for (const Var& v : vars) {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable belongs to a different tape");
  }
}

const Tensor& Tape::value(std::size_t id) const {
  if (id >= nodes_.size()) throw TapeError("unknown node " + std::to_string(id));
  return nodes_[id].value;
}

bool Tape::needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

Vector& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.size() == 0) node.grad = Vector::Zero(node.value.size());
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Vector& contribution) {
  if (!needs_grad(id)) return;
  grad_buffer(id) += contribution;
}

const Vector& Tape::grad(Var v) const {
  if (v.tape != this) throw TapeError("variable belongs to a different tape");
  return nodes_[v.id].grad;
}

void Tape::backward(Var loss) {
  if (consumed_) throw TapeError("backward already ran on this tape; reset() before reuse");
  if (loss.tape != this || loss.id >= nodes_.size()) throw TapeError("loss was not produced by this tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw TapeError("backward needs a scalar loss, got " + to_string(nodes_[loss.id].value.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id).setConstant(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.needs_grad || node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.param != nullptr) node.param->grad() += node.grad;
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

namespace fault_injection {
namespace {
std::atomic<CorruptedRule> g_rule{CorruptedRule::none};
}
void set(CorruptedRule rule) { g_rule.store(rule); }
CorruptedRule current() { return g_rule.load(std::memory_order_relaxed); }
}  // namespace fault_injection

}  // namespace fedcsap
