#pragma once

// Minimal dense reverse-mode differentiation over 2-D row-major matrices.
//
// A Tape records every operation applied to its Vars. Parameters live outside the
// tape as Tensors; Tape::param() binds one as a leaf and Tape::backward() adds the
// leaf gradient into Tensor::grad. Reductions run in a fixed sequential order so
// forward and backward passes are bit-reproducible.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rgm/error.hpp"

namespace rgm::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Tensor {
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Tensor() = default;
  explicit Tensor(Matrix v, bool trainable = true) : value(std::move(v)), requires_grad(trainable) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }

  std::vector<std::size_t> shape() const {
    return {static_cast<std::size_t>(value.rows()), static_cast<std::size_t>(value.cols())};
  }
  std::size_t numel() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  /// Leaf with its own gradient slot, read back through grad().
  Var input(Matrix value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter; backward() accumulates into p.grad.
  Var param(Tensor& p) {
    Var v = push(p.value, p.requires_grad, nullptr);
    nodes_[static_cast<std::size_t>(v.id())].param = &p;
    return v;
  }

  Var push(Matrix value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  bool needs_grad(const Var& v) const { return needs_grad(v.id()); }

  /// Gradient slot of a node, zero-initialised on first access.
  Matrix& grad_slot(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& grad(const Var& v) { return grad_slot(v.id()); }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 loss. Gradients are additive across fan-out.
  void backward(const Var& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw ParameterError("backward: loss must be scalar-shaped");
    if (&loss.tape() != this) throw ParameterError("backward: loss belongs to another tape");
    grad_slot(loss.id())(0, 0) += 1.0;
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(*this, n.grad);
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols())
          n.param->grad = Matrix::Zero(n.grad.rows(), n.grad.cols());
        n.param->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward back;
    Tensor* param = nullptr;
  };
  std::deque<Node> nodes_;  // stable references across push()
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ParameterError("operands belong to different tapes");
  return a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ParameterError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

inline void accumulate(Tape& t, int id, const Matrix& g) {
  if (t.needs_grad(id)) t.grad_slot(id) += g;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ParameterError("matmul: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value() * b.value();
  int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.grad_slot(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.needs_grad(ib)) tp.grad_slot(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw ParameterError("matmul_nt: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value() * b.value().transpose();
  int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.grad_slot(ia).noalias() += g * tp.value(ib);
    if (tp.needs_grad(ib)) tp.grad_slot(ib).noalias() += g.transpose() * tp.value(ia);
  });
}

/// a^T * b
inline Var matmul_tn(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw ParameterError("matmul_tn: inner dimensions differ");
  Matrix out;
  out.noalias() = a.value().transpose() * b.value();
  int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.grad_slot(ia).noalias() += tp.value(ib) * g.transpose();
    if (tp.needs_grad(ib)) tp.grad_slot(ib).noalias() += tp.value(ia) * g;
  });
}

inline Var transpose(const Var& a) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().transpose(), t.needs_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.grad_slot(ia) += g.transpose(); });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    detail::accumulate(tp, ia, g);
    detail::accumulate(tp, ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    detail::accumulate(tp, ia, g);
    if (tp.needs_grad(ib)) tp.grad_slot(ib) -= g;
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, const Matrix& g) {
                  if (tp.needs_grad(ia)) tp.grad_slot(ia) += g.cwiseProduct(tp.value(ib));
                  if (tp.needs_grad(ib)) tp.grad_slot(ib) += g.cwiseProduct(tp.value(ia));
                });
}

inline Var scale(const Var& a, double s) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value() * s, t.needs_grad(ia), [ia, s](Tape& tp, const Matrix& g) { tp.grad_slot(ia) += g * s; });
}

inline Var add_scalar(const Var& a, double s) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push((a.value().array() + s).matrix(), t.needs_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.grad_slot(ia) += g; });
}

/// a (R x C) + b (1 x C) broadcast over rows.
inline Var add_row(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (b.rows() != 1 || b.cols() != a.cols()) throw ParameterError("add_row: bias must be 1 x cols");
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  int ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape& tp, const Matrix& g) {
    detail::accumulate(tp, ia, g);
    if (tp.needs_grad(ib)) tp.grad_slot(ib) += g.colwise().sum();
  });
}

/// 1 x C row repeated n times.
inline Var broadcast_rows(const Var& a, Index n) {
  if (a.rows() != 1) throw ParameterError("broadcast_rows: input must have one row");
  Tape& t = a.tape();
  Matrix out = a.value().replicate(n, 1);
  int ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia),
                [ia](Tape& tp, const Matrix& g) { tp.grad_slot(ia) += g.colwise().sum(); });
}

/// Subgradient at 0 is 0.
inline Var relu(const Var& a) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().cwiseMax(0.0), t.needs_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia) += (tp.value(ia).array() > 0.0).select(g, 0.0).matrix();
  });
}

inline Var exp(const Var& a) {
  Tape& t = a.tape();
  int ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  int self = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(ia), [ia, self](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia) += g.cwiseProduct(tp.value(self));
  });
}

inline Var log(const Var& a) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().array().log().matrix(), t.needs_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia) += g.cwiseQuotient(tp.value(ia));
  });
}

/// Elementwise clamp; gradient passes where lo <= a <= hi.
inline Var clamp(const Var& a, double lo, double hi) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().cwiseMax(lo).cwiseMin(hi), t.needs_grad(ia), [ia, lo, hi](Tape& tp, const Matrix& g) {
    const auto& x = tp.value(ia).array();
    tp.grad_slot(ia) += ((x >= lo) && (x <= hi)).select(g, 0.0).matrix();
  });
}

inline Var pow_scalar(const Var& a, double p) {
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().array().pow(p).matrix(), t.needs_grad(ia), [ia, p](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia) += (g.array() * p * tp.value(ia).array().pow(p - 1.0)).matrix();
  });
}

/// Row-wise softmax (max-shifted).
inline Var softmax_rows(const Var& a) {
  Tape& t = a.tape();
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  int ia = a.id();
  int self = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(ia), [ia, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    Matrix gy = g.cwiseProduct(y);
    Eigen::VectorXd s = gy.rowwise().sum();
    Matrix d = gy;
    for (Index r = 0; r < d.rows(); ++r) d.row(r) -= s(r) * y.row(r);
    tp.grad_slot(ia) += d;
  });
}

/// Max over consecutive groups of `group` rows: (n*group) x C -> n x C. Ties pick the first row.
inline Var segment_max_rows(const Var& a, Index group) {
  if (group < 1 || a.rows() % group != 0) throw ParameterError("segment_max_rows: rows not divisible by group");
  Tape& t = a.tape();
  const Matrix& x = a.value();
  Index n = x.rows() / group, C = x.cols();
  Matrix out(n, C);
  std::vector<Index> arg(static_cast<std::size_t>(n * C));
  for (Index s = 0; s < n; ++s)
    for (Index c = 0; c < C; ++c) {
      Index best = s * group;
      for (Index r = s * group + 1; r < (s + 1) * group; ++r)
        if (x(r, c) > x(best, c)) best = r;
      out(s, c) = x(best, c);
      arg[static_cast<std::size_t>(s * C + c)] = best;
    }
  int ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia), [ia, arg = std::move(arg), n, C](Tape& tp, const Matrix& g) {
    Matrix& ga = tp.grad_slot(ia);
    for (Index s = 0; s < n; ++s)
      for (Index c = 0; c < C; ++c) ga(arg[static_cast<std::size_t>(s * C + c)], c) += g(s, c);
  });
}

/// Column-wise max over all rows: R x C -> 1 x C.
inline Var max_rows(const Var& a) { return segment_max_rows(a, a.rows()); }

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols: nothing to concatenate");
  Tape& t = parts.front().tape();
  Index R = parts.front().rows(), C = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ParameterError("concat_cols: operands on different tapes");
    if (p.rows() != R) throw ParameterError("concat_cols: row counts differ");
    C += p.cols();
    needs = needs || t.needs_grad(p);
  }
  Matrix out(R, C);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.push(std::move(out), needs, [spans](Tape& tp, const Matrix& g) {
    for (auto [id, o] : spans)
      if (tp.needs_grad(id)) tp.grad_slot(id) += g.middleCols(o, tp.value(id).cols());
  });
}

/// Sub-block [r0, r0+nr) x [c0, c0+nc).
inline Var slice(const Var& a, Index r0, Index c0, Index nr, Index nc) {
  if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > a.rows() || c0 + nc > a.cols())
    throw ParameterError("slice: block out of range");
  Tape& t = a.tape();
  int ia = a.id();
  return t.push(a.value().block(r0, c0, nr, nc), t.needs_grad(ia), [ia, r0, c0, nr, nc](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia).block(r0, c0, nr, nc) += g;
  });
}

inline Var slice_cols(const Var& a, Index c0, Index nc) { return slice(a, 0, c0, a.rows(), nc); }

inline Var sum(const Var& a) {
  Tape& t = a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  int ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia), [ia](Tape& tp, const Matrix& g) {
    tp.grad_slot(ia).array() += g(0, 0);
  });
}

inline Var mean(const Var& a) {
  double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Population variance over all entries.
inline Var variance(const Var& a) {
  Tape& t = a.tape();
  const Matrix& x = a.value();
  double n = static_cast<double>(x.size());
  double mu = x.sum() / n;
  Matrix out(1, 1);
  out(0, 0) = (x.array() - mu).square().sum() / n;
  int ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia), [ia](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(ia);
    double nn = static_cast<double>(xv.size());
    double m = xv.sum() / nn;
    tp.grad_slot(ia) += ((xv.array() - m) * (2.0 * g(0, 0) / nn)).matrix();
  });
}

/// Per-row normalisation followed by elementwise gain and bias (both 1 x C).
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  Tape& t = a.tape();
  if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 || bias.cols() != a.cols())
    throw ParameterError("layer_norm: gain/bias must be 1 x cols");
  const Matrix& x = a.value();
  Index R = x.rows(), C = x.cols();
  Matrix xhat(R, C);
  Eigen::VectorXd inv_std(R);
  for (Index r = 0; r < R; ++r) {
    double mu = x.row(r).sum() / static_cast<double>(C);
    double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(C);
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = ((x.row(r).array() - mu) * inv_std(r)).matrix();
  }
  Matrix out = xhat;
  for (Index r = 0; r < R; ++r)
    out.row(r) = (xhat.row(r).array() * gain.value().row(0).array() + bias.value().row(0).array()).matrix();
  int ia = a.id(), ig = gain.id(), ib = bias.id();
  bool needs = t.needs_grad(ia) || t.needs_grad(ig) || t.needs_grad(ib);
  return t.push(std::move(out), needs,
                [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                  if (tp.needs_grad(ig)) tp.grad_slot(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (tp.needs_grad(ib)) tp.grad_slot(ib) += g.colwise().sum();
                  if (!tp.needs_grad(ia)) return;
                  const Matrix& gv = tp.value(ig);
                  Matrix& ga = tp.grad_slot(ia);
                  double C = static_cast<double>(g.cols());
                  for (Index r = 0; r < g.rows(); ++r) {
                    Eigen::RowVectorXd dx = g.row(r).cwiseProduct(gv.row(0));
                    double m1 = dx.sum() / C;
                    double m2 = dx.cwiseProduct(xhat.row(r)).sum() / C;
                    ga.row(r) += ((dx.array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
                  }
                });
}

/// Normalises all entries jointly to zero mean / unit variance (eps inside the square root),
/// then applies the scalar affine map scale * x + shift (scale, shift are 1 x 1).
inline Var instance_norm(const Var& a, const Var& scale_v, const Var& shift_v, double eps = 1e-5) {
  Tape& t = a.tape();
  if (a.value().size() < 2) throw ParameterError("instance_norm: needs at least two entries");
  if (scale_v.value().size() != 1 || shift_v.value().size() != 1)
    throw ParameterError("instance_norm: scale and shift must be 1 x 1");
  const Matrix& x = a.value();
  double n = static_cast<double>(x.size());
  double mu = x.sum() / n;
  double var = (x.array() - mu).square().sum() / n;
  double inv_std = 1.0 / std::sqrt(var + eps);
  Matrix xhat = ((x.array() - mu) * inv_std).matrix();
  double s = scale_v.value()(0, 0), b = shift_v.value()(0, 0);
  Matrix out = (xhat.array() * s + b).matrix();
  int ia = a.id(), is = scale_v.id(), ib = shift_v.id();
  bool needs = t.needs_grad(ia) || t.needs_grad(is) || t.needs_grad(ib);
  return t.push(std::move(out), needs, [ia, is, ib, xhat = std::move(xhat), inv_std](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(is)) tp.grad_slot(is)(0, 0) += g.cwiseProduct(xhat).sum();
    if (tp.needs_grad(ib)) tp.grad_slot(ib)(0, 0) += g.sum();
    if (!tp.needs_grad(ia)) return;
    double sc = tp.value(is)(0, 0);
    double nn = static_cast<double>(g.size());
    Matrix dx = g * sc;
    double m1 = dx.sum() / nn;
    double m2 = dx.cwiseProduct(xhat).sum() / nn;
    tp.grad_slot(ia) += ((dx.array() - m1 - xhat.array() * m2) * inv_std).matrix();
  });
}

/// Divides every column by its L1 norm; all-zero columns stay zero.
inline Var l1_normalize_cols(const Var& a) {
  Tape& t = a.tape();
  const Matrix& x = a.value();
  Eigen::RowVectorXd s = x.cwiseAbs().colwise().sum();
  Matrix out = x;
  for (Index c = 0; c < x.cols(); ++c)
    if (s(c) > 0.0) out.col(c) /= s(c);
  int ia = a.id();
  int self = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(ia), [ia, self, s = std::move(s)](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    const Matrix& y = tp.value(self);
    Matrix& ga = tp.grad_slot(ia);
    for (Index c = 0; c < x.cols(); ++c) {
      if (s(c) <= 0.0) continue;
      double gy = g.col(c).dot(y.col(c));
      for (Index r = 0; r < x.rows(); ++r) {
        double sign = x(r, c) > 0.0 ? 1.0 : (x(r, c) < 0.0 ? -1.0 : 0.0);
        ga(r, c) += (g(r, c) - sign * gy) / s(c);
      }
    }
  });
}

struct SinkhornOptions {
  int iters = 20;         // half-steps; odd steps normalise rows, even steps columns
  double tol = 1e-9;      // early exit once the other marginal is within tol
  bool slack = true;
};

/// Alternating row / column normalisation of a positive matrix. With slack, a row and a
/// column of ones are appended first; the slack row and column are never normalised
/// themselves but take part in the other direction's denominators. Returns the padded
/// (N+1) x (M+1) matrix, or N x M without slack.
inline Var sinkhorn(const Var& a, const SinkhornOptions& opt = {}) {
  if (opt.iters < 1) throw ParameterError("sinkhorn: iters must be >= 1");
  const Matrix& x = a.value();
  if (!x.allFinite()) throw NumericError("sinkhorn: non-finite input");
  if ((x.array() < 0.0).any()) throw ParameterError("sinkhorn: input must be nonnegative");
  Tape& t = a.tape();
  const Index N = x.rows(), M = x.cols();
  const Index nr = opt.slack ? N + 1 : N, nc = opt.slack ? M + 1 : M;
  Matrix S = Matrix::Ones(nr, nc);
  S.topLeftCorner(N, M) = x;

  // states[k] is the input of half-step k; the row/column sums it was divided by are kept too
  std::vector<Matrix> states;
  std::vector<Eigen::VectorXd> sums;
  auto max_dev_rows = [&](const Matrix& m) { return (m.topRows(N).rowwise().sum().array() - 1.0).abs().maxCoeff(); };
  auto max_dev_cols = [&](const Matrix& m) { return (m.leftCols(M).colwise().sum().array() - 1.0).abs().maxCoeff(); };
  for (int k = 0; k < opt.iters; ++k) {
    bool row_step = (k % 2 == 0);
    if (t.needs_grad(a)) states.push_back(S);
    if (row_step) {
      Eigen::VectorXd rs = S.topRows(N).rowwise().sum();
      for (Index i = 0; i < N; ++i) S.row(i) /= rs(i);
      sums.push_back(std::move(rs));
      if (M > 0 && max_dev_cols(S) < opt.tol) break;
    } else {
      Eigen::VectorXd cs = S.leftCols(M).colwise().sum().transpose();
      for (Index j = 0; j < M; ++j) S.col(j) /= cs(j);
      sums.push_back(std::move(cs));
      if (N > 0 && max_dev_rows(S) < opt.tol) break;
    }
  }
  if (!S.allFinite()) throw NumericError("sinkhorn: non-finite result (zero row or column?)");
  int ia = a.id();
  int self = static_cast<int>(t.size());
  return t.push(std::move(S), t.needs_grad(ia),
                [ia, self, N, M, states = std::move(states), sums = std::move(sums)](Tape& tp, const Matrix& g) {
                  Matrix gcur = g;
                  for (int k = static_cast<int>(sums.size()) - 1; k >= 0; --k) {
                    const Eigen::VectorXd& s = sums[static_cast<std::size_t>(k)];
                    // output of step k is the input of step k+1, or the final value
                    const Matrix& out = (k + 1 < static_cast<int>(states.size())) ? states[static_cast<std::size_t>(k) + 1]
                                                                                  : tp.value(self);
                    if (k % 2 == 0) {
                      for (Index i = 0; i < N; ++i) {
                        double d = gcur.row(i).dot(out.row(i));
                        gcur.row(i) = ((gcur.row(i).array() - d) / s(i)).matrix();
                      }
                    } else {
                      for (Index j = 0; j < M; ++j) {
                        double d = gcur.col(j).dot(out.col(j));
                        gcur.col(j) = ((gcur.col(j).array() - d) / s(j)).matrix();
                      }
                    }
                  }
                  tp.grad_slot(ia) += gcur.topLeftCorner(N, M);
                });
}

// ---------------------------------------------------------------------------
// Verification harness

inline double fd_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-5});
}

/// Max over coordinates of |analytic - central difference| / max(|analytic|, |numeric|, 1e-5).
/// The floor keeps round-off on gradients that are exactly zero from reading as an error.
/// Coordinates for which `exclude(flat_index, value)` is true are skipped.
inline double finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Matrix& x, double eps,
                                const std::function<bool(Index, double)>& exclude = nullptr) {
  Matrix analytic;
  {
    Tape tape;
    Var in = tape.input(x);
    Var out = f(tape, in);
    tape.backward(out);
    analytic = tape.grad(in);
  }
  auto eval = [&](const Matrix& xv) {
    Tape tape;
    Var in = tape.constant(xv);
    return f(tape, in).value()(0, 0);
  };
  double worst = 0.0;
  Matrix xp = x;
  for (Index k = 0; k < x.size(); ++k) {
    double v = x.data()[k];
    if (exclude && exclude(k, v)) continue;
    xp.data()[k] = v + eps;
    double fp = eval(xp);
    xp.data()[k] = v - eps;
    double fm = eval(xp);
    xp.data()[k] = v;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic.data()[k];
    worst = std::max(worst, fd_relative_error(a, numeric));
  }
  return worst;
}

/// Same check against a parameter tensor; `coords` limits the number of probed entries
/// (0 = all), chosen with a fixed stride.
inline double finite_diff_check_param(const std::function<Var(Tape&)>& f, Tensor& p, double eps, std::size_t coords = 0) {
  p.zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    tape.backward(out);
  }
  Matrix analytic = p.grad;
  auto eval = [&]() {
    Tape tape;
    return f(tape).value()(0, 0);
  };
  Index n = p.value.size();
  Index stride = (coords == 0 || static_cast<Index>(coords) >= n) ? 1 : n / static_cast<Index>(coords);
  double worst = 0.0;
  for (Index k = 0; k < n; k += stride) {
    double v = p.value.data()[k];
    p.value.data()[k] = v + eps;
    double fp = eval();
    p.value.data()[k] = v - eps;
    double fm = eval();
    p.value.data()[k] = v;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic.data()[k];
    worst = std::max(worst, fd_relative_error(a, numeric));
  }
  p.zero_grad();
  return worst;
}

// ---------------------------------------------------------------------------
// Optimiser

/// SGD with heavy-ball momentum: v <- momentum * v + grad; w <- w - lr * v; grad <- 0.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(const std::vector<Tensor*>& params) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (Tensor* p : params) velocity_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      if (!p.requires_grad) continue;
      velocity_[k] = momentum_ * velocity_[k] + p.grad;
      p.value -= lr_ * velocity_[k];
      p.zero_grad();
    }
  }

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

}  // namespace rgm::diff
