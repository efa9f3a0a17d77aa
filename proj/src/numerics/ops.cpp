#include "fedcsap/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedcsap/numerics/errors.hpp"

namespace fedcsap {
namespace {

using fault_injection::CorruptedRule;

struct AxisSplit {
  Index outer = 1;
  Index length = 1;
  Index inner = 1;
};

Index normalize_axis(const Shape& shape, Index axis) {
  const auto rank = static_cast<Index>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  return axis;
}

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

void require_same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw TapeError("operands live on different tapes");
  const Var vars[] = {a, b};
  a.tape->check_live(vars);
}

void require_live(Var a) {
  if (a.tape == nullptr) throw TapeError("variable is not bound to a tape");
  const Var vars[] = {a};
  a.tape->check_live(vars);
}

bool is_scalar(const Tensor& t) { return t.size() == 1; }

// Elementwise binary op with optional scalar broadcast on either side.
template <typename Forward, typename GradA, typename GradB>
Var binary(std::string_view name, Var a, Var b, Forward fwd, GradA ga, GradB gb) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool sa = is_scalar(x) && !is_scalar(y);
  const bool sb = is_scalar(y) && !is_scalar(x);
  if (!sa && !sb && x.shape() != y.shape()) {
    throw DimensionError(std::string(name) + ": shape mismatch " + to_string(x.shape()) + " vs " +
                         to_string(y.shape()));
  }
  const Shape out_shape = sa ? y.shape() : x.shape();
  const Index n = shape_size(out_shape);
  Vector xs = sa ? Vector::Constant(n, x[0]) : x.data();
  Vector ys = sb ? Vector::Constant(n, y[0]) : y.data();
  Tensor out(out_shape, fwd(xs, ys));
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;
  return a.tape->record(name, std::move(out), {ia, ib},
                        [ia, ib, sa, sb, xs = std::move(xs), ys = std::move(ys), ga, gb](Tape& t, const Vector& g) {
                          if (t.needs_grad(ia)) {
                            Vector da = ga(g, xs, ys);
                            if (sa) {
                              t.accumulate(ia, Vector::Constant(1, da.sum()));
                            } else {
                              t.accumulate(ia, da);
                            }
                          }
                          if (t.needs_grad(ib)) {
                            Vector db = gb(g, xs, ys);
                            if (sb) {
                              t.accumulate(ib, Vector::Constant(1, db.sum()));
                            } else {
                              t.accumulate(ib, db);
                            }
                          }
                        });
}

template <typename Forward, typename Backward>
Var unary(std::string_view name, Var a, Forward fwd, Backward bwd) {
  require_live(a);
  const Tensor& x = a.value();
  Vector y = fwd(x.data());
  Tensor out(x.shape(), y);
  const std::size_t ia = a.id;
  return a.tape->record(name, std::move(out), {ia},
                        [ia, xs = x.data(), ys = std::move(y), bwd](Tape& t, const Vector& g) {
                          t.accumulate(ia, bwd(g, xs, ys));
                        });
}

void softmax_rows(const Vector& in, Vector& out, const AxisSplit& s) {
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.length; ++k) mx = std::max(mx, in[base + k * s.inner]);
      double total = 0.0;
      for (Index k = 0; k < s.length; ++k) {
        const double e = std::exp(in[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (Index k = 0; k < s.length; ++k) out[base + k * s.inner] /= total;
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(x.shape()) + " by " + to_string(y.shape()));
  }
  Tensor out({x.dim(0), y.dim(1)});
  out.matrix().noalias() = x.matrix() * y.matrix();
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;
  return a.tape->record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, const Vector& g) {
    const ConstMatrixMap A = t.value(ia).matrix();
    const ConstMatrixMap B = t.value(ib).matrix();
    const ConstMatrixMap G(g.data(), A.rows(), B.cols());
    if (t.needs_grad(ia)) {
      RowMatrix dA = G * B.transpose();
      if (fault_injection::current() == CorruptedRule::matmul) dA *= 1.01;
      t.accumulate(ia, Eigen::Map<const Vector>(dA.data(), dA.size()));
    }
    if (t.needs_grad(ib)) {
      RowMatrix dB = A.transpose() * G;
      t.accumulate(ib, Eigen::Map<const Vector>(dB.data(), dB.size()));
    }
  });
}

Var transpose(Var a) {
  require_live(a);
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("transpose needs rank 2, got " + to_string(x.shape()));
  Tensor out({x.dim(1), x.dim(0)});
  out.matrix() = x.matrix().transpose();
  const std::size_t ia = a.id;
  const Index rows = x.dim(0);
  const Index cols = x.dim(1);
  return a.tape->record("transpose", std::move(out), {ia}, [ia, rows, cols](Tape& t, const Vector& g) {
    RowMatrix gt = ConstMatrixMap(g.data(), cols, rows).transpose();
    t.accumulate(ia, Eigen::Map<const Vector>(gt.data(), gt.size()));
  });
}

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](const Vector& x, const Vector& y) -> Vector { return x + y; },
      [](const Vector& g, const Vector&, const Vector&) -> Vector { return g; },
      [](const Vector& g, const Vector&, const Vector&) -> Vector { return g; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](const Vector& x, const Vector& y) -> Vector { return x - y; },
      [](const Vector& g, const Vector&, const Vector&) -> Vector { return g; },
      [](const Vector& g, const Vector&, const Vector&) -> Vector { return -g; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](const Vector& x, const Vector& y) -> Vector { return x.cwiseProduct(y); },
      [](const Vector& g, const Vector&, const Vector& y) -> Vector { return g.cwiseProduct(y); },
      [](const Vector& g, const Vector& x, const Vector&) -> Vector { return g.cwiseProduct(x); });
}

Var scale(Var a, double factor) {
  return unary(
      "scale", a, [factor](const Vector& x) -> Vector { return factor * x; },
      [factor](const Vector& g, const Vector&, const Vector&) -> Vector { return factor * g; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      "add_scalar", a, [offset](const Vector& x) -> Vector { return x.array() + offset; },
      [](const Vector& g, const Vector&, const Vector&) -> Vector { return g; });
}

Var relu(Var a) {
  // Subgradient at exactly 0 is 0.
  return unary(
      "relu", a, [](const Vector& x) -> Vector { return x.cwiseMax(0.0); },
      [](const Vector& g, const Vector& x, const Vector&) -> Vector {
        return (x.array() > 0.0).select(g, Vector::Zero(g.size()));
      });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a, [](const Vector& x) -> Vector { return (1.0 + (-x.array()).exp()).inverse(); },
      [](const Vector& g, const Vector&, const Vector& y) -> Vector {
        Vector d = g.array() * y.array() * (1.0 - y.array());
        if (fault_injection::current() == CorruptedRule::sigmoid) d *= 1.01;
        return d;
      });
}

Var abs(Var a) {
  return unary(
      "abs", a, [](const Vector& x) -> Vector { return x.cwiseAbs(); },
      [](const Vector& g, const Vector& x, const Vector&) -> Vector {
        return g.array() * x.array().sign();
      });
}

Tensor softmax(const Tensor& v, Index axis) {
  axis = normalize_axis(v.shape(), axis);
  Tensor out(v.shape());
  softmax_rows(v.data(), out.data(), split_at(v.shape(), axis));
  return out;
}

Var softmax(Var v, Index axis) {
  require_live(v);
  const Tensor& x = v.value();
  axis = normalize_axis(x.shape(), axis);
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor out = softmax(x, axis);
  const std::size_t iv = v.id;
  return v.tape->record("softmax", out, {iv}, [iv, s, y = out.data()](Tape& t, const Vector& g) {
    Vector d(y.size());
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.length * s.inner + i;
        double dot = 0.0;
        for (Index k = 0; k < s.length; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (Index k = 0; k < s.length; ++k) {
          const Index j = base + k * s.inner;
          d[j] = y[j] * (g[j] - dot);
        }
      }
    }
    t.accumulate(iv, d);
  });
}

Var log_softmax(Var v, Index axis) {
  require_live(v);
  const Tensor& x = v.value();
  axis = normalize_axis(x.shape(), axis);
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor probs = softmax(x, axis);
  Tensor out(x.shape());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.length; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (Index k = 0; k < s.length; ++k) total += std::exp(x[base + k * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (Index k = 0; k < s.length; ++k) out[base + k * s.inner] = x[base + k * s.inner] - lse;
    }
  }
  const std::size_t iv = v.id;
  return v.tape->record("log_softmax", std::move(out), {iv},
                        [iv, s, p = std::move(probs.data())](Tape& t, const Vector& g) {
                          Vector d(p.size());
                          for (Index o = 0; o < s.outer; ++o) {
                            for (Index i = 0; i < s.inner; ++i) {
                              const Index base = o * s.length * s.inner + i;
                              double total = 0.0;
                              for (Index k = 0; k < s.length; ++k) total += g[base + k * s.inner];
                              for (Index k = 0; k < s.length; ++k) {
                                const Index j = base + k * s.inner;
                                d[j] = g[j] - p[j] * total;
                              }
                            }
                          }
                          t.accumulate(iv, d);
                        });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  if (!(eps > 0.0)) throw InputError("layer_norm: eps must be positive");
  const Tensor& in = x.value();
  const Index d = in.dim(in.rank() - 1);
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         to_string(gamma.value().shape()) + " and " + to_string(beta.value().shape()));
  }
  const Index rows = in.size() / d;
  const ConstMatrixMap X(in.data().data(), rows, d);
  RowMatrix xhat(rows, d);
  Vector inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std[r];
  }
  const Eigen::Map<const Eigen::RowVectorXd> g(gamma.value().data().data(), d);
  const Eigen::Map<const Eigen::RowVectorXd> b(beta.value().data().data(), d);
  Tensor out(in.shape());
  MatrixMap Y(out.data().data(), rows, d);
  for (Index r = 0; r < rows; ++r) Y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  const std::size_t ix = x.id;
  const std::size_t ig = gamma.id;
  const std::size_t ib = beta.id;
  return x.tape->record(
      "layer_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Vector& gv) {
        const ConstMatrixMap G(gv.data(), rows, d);
        if (t.needs_grad(ig)) {
          Vector dg = (G.cwiseProduct(xhat)).colwise().sum().transpose();
          t.accumulate(ig, dg);
        }
        if (t.needs_grad(ib)) {
          Vector db = G.colwise().sum().transpose();
          t.accumulate(ib, db);
        }
        if (t.needs_grad(ix)) {
          const Eigen::Map<const Eigen::RowVectorXd> gam(t.value(ig).data().data(), d);
          RowMatrix dx(rows, d);
          for (Index r = 0; r < rows; ++r) {
            const Eigen::RowVectorXd gh = G.row(r).cwiseProduct(gam);
            const double s1 = gh.sum();
            const double s2 = gh.dot(xhat.row(r));
            dx.row(r) = (inv_std[r] / static_cast<double>(d)) *
                        (static_cast<double>(d) * gh.array() - s1 - xhat.row(r).array() * s2).matrix();
          }
          t.accumulate(ix, Eigen::Map<const Vector>(dx.data(), dx.size()));
        }
      });
}

Var reduce(ReduceOp op, Var x, std::vector<Index> axes) {
  require_live(x);
  const Tensor& in = x.value();
  const Shape& shape = in.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (Index& ax : axes) {
    ax = normalize_axis(shape, ax);
    if (reduced[ax]) throw DimensionError("reduce: duplicate axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  if (axes.empty()) {
    return x.tape->record("reduce", in, {x.id}, [ix = x.id](Tape& t, const Vector& g) { t.accumulate(ix, g); });
  }
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(shape[i]);
  }
  const bool full = out_shape.empty();
  if (full) out_shape = {1};
  // Map each input element to its output slot.
  std::vector<Index> target(static_cast<std::size_t>(in.size()));
  std::vector<Index> coord(shape.size(), 0);
  Index count = 1;
  for (Index ax : axes) count *= shape[ax];
  for (Index flat = 0; flat < in.size(); ++flat) {
    Index out_flat = 0;
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (!reduced[i]) out_flat = out_flat * shape[i] + coord[i];
    }
    target[flat] = out_flat;
    for (Index i = static_cast<Index>(shape.size()) - 1; i >= 0; --i) {
      if (++coord[i] < shape[i]) break;
      coord[i] = 0;
    }
  }
  const double factor = op == ReduceOp::mean ? 1.0 / static_cast<double>(count) : 1.0;
  Tensor out(out_shape);
  for (Index flat = 0; flat < in.size(); ++flat) out[target[flat]] += in[flat];
  out.data() *= factor;
  const std::size_t ix = x.id;
  return x.tape->record("reduce", std::move(out), {ix},
                        [ix, factor, target = std::move(target)](Tape& t, const Vector& g) {
                          Vector d(static_cast<Index>(target.size()));
                          for (std::size_t i = 0; i < target.size(); ++i) d[i] = g[target[i]] * factor;
                          t.accumulate(ix, d);
                        });
}

Var sum(Var x) {
  std::vector<Index> axes(static_cast<std::size_t>(x.value().rank()));
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<Index>(i);
  return reduce(ReduceOp::sum, x, std::move(axes));
}

Var mean(Var x) {
  std::vector<Index> axes(static_cast<std::size_t>(x.value().rank()));
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<Index>(i);
  return reduce(ReduceOp::mean, x, std::move(axes));
}

NormalizedRows l2_normalize(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw InputError("l2_normalize: eps must be positive");
  const Index d = x.dim(x.rank() - 1);
  const Index rows = x.size() / d;
  NormalizedRows result{Tensor(x.shape()), std::vector<bool>(static_cast<std::size_t>(rows), false)};
  const ConstMatrixMap X(x.data().data(), rows, d);
  MatrixMap Y(result.value.data().data(), rows, d);
  for (Index r = 0; r < rows; ++r) {
    const double n = X.row(r).norm();
    result.degenerate[r] = !(n > eps);
    Y.row(r) = X.row(r) / std::max(n, eps);
  }
  return result;
}

Var l2_normalize(Var x, double eps) {
  require_live(x);
  NormalizedRows res = l2_normalize(x.value(), eps);
  const Index d = x.value().dim(x.value().rank() - 1);
  const Index rows = x.value().size() / d;
  Vector norms(rows);
  const ConstMatrixMap X(x.value().data().data(), rows, d);
  for (Index r = 0; r < rows; ++r) norms[r] = std::max(X.row(r).norm(), eps);
  const std::size_t ix = x.id;
  Vector y = res.value.data();
  return x.tape->record("l2_normalize", std::move(res.value), {ix},
                        [ix, rows, d, norms = std::move(norms), y = std::move(y),
                         degenerate = std::move(res.degenerate)](Tape& t, const Vector& g) {
                          const ConstMatrixMap Y(y.data(), rows, d);
                          const ConstMatrixMap G(g.data(), rows, d);
                          RowMatrix dx(rows, d);
                          for (Index r = 0; r < rows; ++r) {
                            if (degenerate[r]) {
                              dx.row(r) = G.row(r) / norms[r];
                            } else {
                              dx.row(r) = (G.row(r) - Y.row(r) * Y.row(r).dot(G.row(r))) / norms[r];
                            }
                          }
                          t.accumulate(ix, Eigen::Map<const Vector>(dx.data(), dx.size()));
                        });
}

Var reshape(Var x, Shape shape) {
  require_live(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.tape->record("reshape", std::move(out), {ix}, [ix](Tape& t, const Vector& g) { t.accumulate(ix, g); });
}

Var concat(std::span<const Var> parts, Index axis) {
  if (parts.empty()) throw InputError("concat: no operands");
  Tape* tape = parts[0].tape;
  if (tape == nullptr) throw TapeError("variable is not bound to a tape");
  tape->check_live(parts);
  const Shape& first = parts[0].value().shape();
  axis = normalize_axis(first, axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (static_cast<Index>(i) != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) throw DimensionError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  std::vector<Index> lengths;
  Index offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const Index len = v.shape()[axis];
    for (Index o = 0; o < os.outer; ++o) {
      out.data().segment((o * os.length + offset) * os.inner, len * os.inner) =
          v.data().segment(o * len * os.inner, len * os.inner);
    }
    ids.push_back(p.id);
    offsets.push_back(offset);
    lengths.push_back(len);
    offset += len;
  }
  return tape->record("concat", std::move(out), ids,
                      [ids, offsets, lengths, os](Tape& t, const Vector& g) {
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          if (!t.needs_grad(ids[k])) continue;
                          const Index len = lengths[k];
                          Vector d(os.outer * len * os.inner);
                          for (Index o = 0; o < os.outer; ++o) {
                            d.segment(o * len * os.inner, len * os.inner) =
                                g.segment((o * os.length + offsets[k]) * os.inner, len * os.inner);
                          }
                          t.accumulate(ids[k], d);
                        }
                      });
}

Var slice(Var x, Index axis, Index start, Index length) {
  require_live(x);
  const Tensor& in = x.value();
  axis = normalize_axis(in.shape(), axis);
  const AxisSplit s = split_at(in.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.length) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
                         std::to_string(axis) + " of " + to_string(in.shape()));
  }
  Shape out_shape = in.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  for (Index o = 0; o < s.outer; ++o) {
    out.data().segment(o * length * s.inner, length * s.inner) =
        in.data().segment((o * s.length + start) * s.inner, length * s.inner);
  }
  const std::size_t ix = x.id;
  const Index total = in.size();
  return x.tape->record("slice", std::move(out), {ix}, [ix, s, start, length, total](Tape& t, const Vector& g) {
    Vector d = Vector::Zero(total);
    for (Index o = 0; o < s.outer; ++o) {
      d.segment((o * s.length + start) * s.inner, length * s.inner) = g.segment(o * length * s.inner, length * s.inner);
    }
    t.accumulate(ix, d);
  });
}

Var repeat_rows(Var x, Index times) {
  require_live(x);
  const Tensor& in = x.value();
  if (in.rank() != 2 || times < 1) throw DimensionError("repeat_rows needs a matrix and times >= 1, got " + to_string(in.shape()));
  const Index rows = in.dim(0);
  const Index cols = in.dim(1);
  Tensor out({rows * times, cols});
  MatrixMap Y = out.matrix();
  const ConstMatrixMap X = in.matrix();
  for (Index r = 0; r < rows; ++r) Y.middleRows(r * times, times).rowwise() = X.row(r);
  const std::size_t ix = x.id;
  return x.tape->record("repeat_rows", std::move(out), {ix}, [ix, rows, cols, times](Tape& t, const Vector& g) {
    const ConstMatrixMap G(g.data(), rows * times, cols);
    RowMatrix d(rows, cols);
    for (Index r = 0; r < rows; ++r) d.row(r) = G.middleRows(r * times, times).colwise().sum();
    t.accumulate(ix, Eigen::Map<const Vector>(d.data(), d.size()));
  });
}

Var tile_rows(Var x, Index times) {
  require_live(x);
  const Tensor& in = x.value();
  if (in.rank() != 2 || times < 1) throw DimensionError("tile_rows needs a matrix and times >= 1, got " + to_string(in.shape()));
  const Index rows = in.dim(0);
  const Index cols = in.dim(1);
  Tensor out({rows * times, cols});
  for (Index k = 0; k < times; ++k) out.data().segment(k * in.size(), in.size()) = in.data();
  const std::size_t ix = x.id;
  const Index n = in.size();
  return x.tape->record("tile_rows", std::move(out), {ix}, [ix, n, times](Tape& t, const Vector& g) {
    Vector d = Vector::Zero(n);
    for (Index k = 0; k < times; ++k) d += g.segment(k * n, n);
    t.accumulate(ix, d);
  });
}

Var affine(Var x, Var w, Var b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  const Tensor& in = x.value();
  const Tensor& wt = w.value();
  const Tensor& bt = b.value();
  const Index rows = in.rank() == 1 ? 1 : in.dim(0);
  const Index width = in.dim(in.rank() - 1);
  if (in.rank() > 2 || wt.rank() != 2 || wt.dim(0) != width || bt.shape() != Shape{wt.dim(1)}) {
    throw DimensionError("affine: incompatible shapes x" + to_string(in.shape()) + " w" + to_string(wt.shape()) + " b" +
                         to_string(bt.shape()));
  }
  const Index outw = wt.dim(1);
  Tensor out(in.rank() == 1 ? Shape{outw} : Shape{rows, outw});
  MatrixMap Y(out.data().data(), rows, outw);
  Y.noalias() = ConstMatrixMap(in.data().data(), rows, width) * wt.matrix();
  Y.rowwise() += bt.matrix().row(0);
  const std::size_t ix = x.id;
  const std::size_t iw = w.id;
  const std::size_t ib = b.id;
  return x.tape->record("affine", std::move(out), {ix, iw, ib}, [ix, iw, ib, rows, width, outw](Tape& t, const Vector& g) {
    const ConstMatrixMap G(g.data(), rows, outw);
    if (t.needs_grad(ix)) {
      RowMatrix dx = G * t.value(iw).matrix().transpose();
      t.accumulate(ix, Eigen::Map<const Vector>(dx.data(), dx.size()));
    }
    if (t.needs_grad(iw)) {
      RowMatrix dw = ConstMatrixMap(t.value(ix).data().data(), rows, width).transpose() * G;
      t.accumulate(iw, Eigen::Map<const Vector>(dw.data(), dw.size()));
    }
    if (t.needs_grad(ib)) {
      Vector db = G.colwise().sum().transpose();
      t.accumulate(ib, db);
    }
  });
}

Var cross_entropy(Var logits, std::span<const Index> labels) {
  require_live(logits);
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("cross_entropy expects [batch x classes], got " + to_string(z.shape()));
  const Index batch = z.dim(0);
  const Index classes = z.dim(1);
  if (static_cast<Index>(labels.size()) != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  const ConstMatrixMap Z = z.matrix();
  RowMatrix probs(batch, classes);
  double total = 0.0;
  for (Index r = 0; r < batch; ++r) {
    const Index y = labels[r];
    if (y < 0 || y >= classes) throw InputError("cross_entropy: label " + std::to_string(y) + " out of range");
    const double mx = Z.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (Z.row(r).array() - mx).exp();
    const double s = e.sum();
    probs.row(r) = e / s;
    total += mx + std::log(s) - Z(r, y);
  }
  std::vector<Index> ys(labels.begin(), labels.end());
  const std::size_t iz = logits.id;
  return logits.tape->record("cross_entropy", Tensor::scalar(total / static_cast<double>(batch)), {iz},
                             [iz, batch, probs = std::move(probs), ys = std::move(ys)](Tape& t, const Vector& g) {
                               RowMatrix d = probs;
                               for (Index r = 0; r < batch; ++r) d(r, ys[r]) -= 1.0;
                               d *= g[0] / static_cast<double>(batch);
                               t.accumulate(iz, Eigen::Map<const Vector>(d.data(), d.size()));
                             });
}

}  // namespace fedcsap
