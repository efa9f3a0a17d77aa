#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "fedcsap/numerics/tensor.hpp"

namespace fedcsap {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index size() const { return value().size(); }
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. A tape supports exactly one backward pass;
/// call reset() before recording a new graph.
class Tape {
 public:
  /// Receives the gradient of the node's output and pushes contributions to
  /// its inputs through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Vector& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);

  /// Binds a trainable tensor. On backward its gradient is added into
  /// param.grad(). The tensor must outlive the tape's backward pass.
  Var parameter(Tensor& param);

  /// Appends an op result. Used by the op library.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void backward(Var loss);
  void reset();

  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const;
  void accumulate(std::size_t id, const Vector& contribution);
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr& contribution);

  /// Gradient of the most recent backward pass with respect to a node; empty
  /// when no gradient reached it.
  const Vector& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Throws unless every var belongs to this tape and the tape is live.
  void check_live(std::span<const Var> vars) const;

 private:
  struct Node {
    Tensor value;
    Vector grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  Vector& grad_buffer(std::size_t id);

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

template <typename Expr>
void Tape::accumulate_expr(std::size_t id, const Expr& contribution) {
  if (!needs_grad(id)) return;
  grad_buffer(id) += contribution;
}

/// Test-only fault injection so the gradient checker can be exercised against
/// a known-bad backward rule.
namespace fault_injection {
enum class CorruptedRule { none, sigmoid, matmul };
void set(CorruptedRule rule);
CorruptedRule current();
}  // namespace fault_injection

}  // namespace fedcsap
