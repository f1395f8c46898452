#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrmf/tensor.hpp"

namespace lrmf::ad {

// Reverse-mode engine over a flat op tape. Define-by-run: a Tape is built per
// evaluation and thrown away; insertion order is the topological order, so one
// backward sweep visits each node exactly once. Every op validates that its
// output is finite — NaN/Inf anywhere is an error, never a silent state.

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
};

enum class Op {
  kLeaf,
  kAdd,          // same shape
  kAddRow,       // (n,m) + (m,)
  kAddCol,       // (n,m) + (n,)
  kAddScalar,    // any + scalar var
  kSub,          // same shape
  kNeg,
  kMul,          // same shape
  kMulScalar,    // any * scalar var
  kDiv,          // same shape, zero denominator is an error
  kDivScalar,    // any / scalar var
  kMulConst,     // any * constant tensor (same shape or (m,) row broadcast)
  kAffineConst,  // c0 * x + c1
  kMatmul,
  kTranspose,
  kSum,          // full reduce -> scalar
  kMean,         // full reduce -> scalar
  kSumCols,      // (n,m) -> (n,)
  kSumRows,      // (n,m) -> (m,)
  kExp,
  kLog,
  kSqrt,
  kSquare,
  kTanh,
  kRelu,
  kSoftplus,
  kLogaddexp,      // elementwise log(exp a + exp b), stabilized
  kLogsumexpCols,  // (n,m) -> (n,), stabilized
  kLogsumexpFull,  // any -> scalar, stabilized
  kSelect,         // mask*a + (1-mask)*b, mask constant
  kDiagEmbed,      // (d,) -> (d,d)
  kTrisolveLower,  // rows of Y solve L y = x, L (d,d) lower-triangular
  kLogdetPsd,      // (d,d) SPD -> scalar, via Cholesky
};

namespace detail {

inline void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw std::runtime_error(std::string("autodiff: non-finite value produced by ") + where);
  }
}

// In-place Cholesky of an SPD matrix; returns lower factor. Throws when a
// pivot is not strictly positive.
inline Tensor cholesky(const Tensor& m) {
  const std::size_t d = m.rows();
  Tensor l({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("cholesky: matrix not positive definite");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

// Solves L y = b for one row (lower-triangular, in place on y).
inline void solve_lower_row(const Tensor& l, const double* b, double* y, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
}

// Solves L^T y = b for one row (upper-triangular backward substitution).
inline void solve_lower_transposed_row(const Tensor& l, const double* b, double* y, std::size_t d) {
  for (std::size_t ii = d; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < d; ++k) s -= l(k, ii) * y[k];
    y[ii] = s / l(ii, ii);
  }
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

class Tape {
 public:
  Var leaf(Tensor value) {
    detail::check_finite(value, "leaf");
    return push(Op::kLeaf, -1, -1, std::move(value));
  }

  // Constants are ordinary leaves; callers simply don't ask for their gradient.
  Var constant(Tensor value) { return leaf(std::move(value)); }
  Var constant(double value) { return leaf(Tensor::scalar(value)); }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // d(root)/d(param) for each param, in order. root must be scalar-valued and
  // every param a leaf of this tape. The tape itself is not mutated, so the
  // same tape can be replayed; replays are bitwise identical.
  std::vector<Tensor> gradients(Var root, std::span<const Var> params) const {
    if (root.tape != this || root.id < 0 || static_cast<std::size_t>(root.id) >= nodes_.size()) {
      throw std::invalid_argument("gradients: root is not on this tape");
    }
    if (nodes_[static_cast<std::size_t>(root.id)].value.size() != 1) {
      throw std::invalid_argument("gradients: root must be scalar-valued");
    }
    for (const Var& p : params) {
      if (p.tape != this || p.id < 0 || static_cast<std::size_t>(p.id) >= nodes_.size() ||
          nodes_[static_cast<std::size_t>(p.id)].op != Op::kLeaf) {
        throw std::invalid_argument("gradients: parameter is not a leaf of this tape");
      }
    }

    std::vector<Tensor> adj(nodes_.size());
    std::vector<bool> live(nodes_.size(), false);
    ensure(adj, live, root.id);
    adj[static_cast<std::size_t>(root.id)][0] = 1.0;

    for (std::size_t idx = nodes_.size(); idx-- > 0;) {
      if (!live[idx]) continue;
      backward_node(static_cast<int>(idx), adj, live);
      detail::check_finite(adj[idx], "backward pass");
    }

    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Var& p : params) {
      const std::size_t i = static_cast<std::size_t>(p.id);
      if (live[i]) {
        out.push_back(adj[i]);
      } else {
        out.push_back(Tensor::zeros(nodes_[i].value.shape()));
      }
    }
    return out;
  }

  std::vector<Tensor> gradients(Var root, std::initializer_list<Var> params) const {
    return gradients(root, std::span<const Var>(params.begin(), params.size()));
  }

  // Used by the op constructors below; not part of the public surface.
  Var push(Op op, int in0, int in1, Tensor value, Tensor aux = {}, double c0 = 0.0,
           double c1 = 0.0) {
    nodes_.push_back(Node{op, in0, in1, std::move(value), std::move(aux), c0, c1});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

 private:
  struct Node {
    Op op;
    int in0 = -1, in1 = -1;
    Tensor value;
    Tensor aux;  // constant operand (mask, row vector) or saved factor
    double c0 = 0.0, c1 = 0.0;
  };

  std::vector<Node> nodes_;

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  void ensure(std::vector<Tensor>& adj, std::vector<bool>& live, int id) const {
    const std::size_t i = static_cast<std::size_t>(id);
    if (!live[i]) {
      adj[i] = Tensor::zeros(nodes_[i].value.shape());
      live[i] = true;
    }
  }

  void backward_node(int id, std::vector<Tensor>& adj, std::vector<bool>& live) const;
};

inline const Tensor& Var::val() const { return tape->value(id); }

// ---- op constructors -------------------------------------------------------

namespace detail {

inline Tape* same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument("autodiff: operands belong to different tapes");
  }
  return a.tape;
}

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(std::string("autodiff: ") + msg);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  if (va.same_shape(vb)) {
    Tensor out = va;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += vb[k];
    detail::check_finite(out, "add");
    return t->push(Op::kAdd, a.id, b.id, std::move(out));
  }
  if (va.rank() == 2 && vb.rank() == 1 && va.cols() == vb.size()) {
    Tensor out = va;
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) += vb[j];
    detail::check_finite(out, "add(row broadcast)");
    return t->push(Op::kAddRow, a.id, b.id, std::move(out));
  }
  if (va.rank() == 2 && vb.rank() == 1 && va.rows() == vb.size() && va.cols() != vb.size()) {
    Tensor out = va;
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) += vb[i];
    detail::check_finite(out, "add(col broadcast)");
    return t->push(Op::kAddCol, a.id, b.id, std::move(out));
  }
  throw std::invalid_argument("add: incompatible shapes " + va.shape_str() + " vs " + vb.shape_str());
}

// Explicit column broadcast for the square-matrix case where add() would be
// ambiguous: (n,m) + per-row scalar (n,).
inline Var add_cols(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.rank() == 2 && vb.rank() == 1 && va.rows() == vb.size(),
                  "add_cols: expected (n,m) and (n,)");
  Tensor out = va;
  for (std::size_t i = 0; i < va.rows(); ++i)
    for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) += vb[i];
  detail::check_finite(out, "add_cols");
  return t->push(Op::kAddCol, a.id, b.id, std::move(out));
}

inline Var add_scalar(Var a, Var s) {
  Tape* t = detail::same_tape(a, s);
  detail::require(s.val().size() == 1, "add_scalar: second operand must be scalar");
  const double sv = s.val()[0];
  Tensor out = a.val();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += sv;
  detail::check_finite(out, "add_scalar");
  return t->push(Op::kAddScalar, a.id, s.id, std::move(out));
}

inline Var sub(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.same_shape(vb), "sub: shapes must match");
  Tensor out = va;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= vb[k];
  detail::check_finite(out, "sub");
  return t->push(Op::kSub, a.id, b.id, std::move(out));
}

inline Var neg(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = -x;
  return a.tape->push(Op::kNeg, a.id, -1, std::move(out));
}

inline Var mul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.same_shape(vb), "mul: shapes must match");
  Tensor out = va;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= vb[k];
  detail::check_finite(out, "mul");
  return t->push(Op::kMul, a.id, b.id, std::move(out));
}

inline Var mul_scalar(Var a, Var s) {
  Tape* t = detail::same_tape(a, s);
  detail::require(s.val().size() == 1, "mul_scalar: second operand must be scalar");
  const double sv = s.val()[0];
  Tensor out = a.val();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= sv;
  detail::check_finite(out, "mul_scalar");
  return t->push(Op::kMulScalar, a.id, s.id, std::move(out));
}

inline Var div(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.same_shape(vb), "div: shapes must match");
  Tensor out = va;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (vb[k] == 0.0) throw std::runtime_error("autodiff: division by zero");
    out[k] /= vb[k];
  }
  detail::check_finite(out, "div");
  return t->push(Op::kDiv, a.id, b.id, std::move(out));
}

inline Var div_scalar(Var a, Var s) {
  Tape* t = detail::same_tape(a, s);
  detail::require(s.val().size() == 1, "div_scalar: second operand must be scalar");
  const double sv = s.val()[0];
  if (sv == 0.0) throw std::runtime_error("autodiff: division by zero");
  Tensor out = a.val();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] /= sv;
  detail::check_finite(out, "div_scalar");
  return t->push(Op::kDivScalar, a.id, s.id, std::move(out));
}

// Multiply by a non-trainable tensor: same shape, or (m,) broadcast over the
// rows of an (n,m) operand. This is the masking primitive.
inline Var mul_const(Var a, Tensor c) {
  const Tensor& va = a.val();
  detail::check_finite(c, "mul_const operand");
  Tensor out = va;
  if (va.same_shape(c)) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] *= c[k];
  } else if (va.rank() == 2 && c.rank() == 1 && va.cols() == c.size()) {
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out(i, j) *= c[j];
  } else {
    throw std::invalid_argument("mul_const: incompatible shapes " + va.shape_str() + " vs " +
                                c.shape_str());
  }
  detail::check_finite(out, "mul_const");
  return a.tape->push(Op::kMulConst, a.id, -1, std::move(out), std::move(c));
}

inline Var affine(Var a, double scale, double shift) {
  Tensor out = a.val();
  for (double& x : out.data()) x = scale * x + shift;
  detail::check_finite(out, "affine");
  return a.tape->push(Op::kAffineConst, a.id, -1, std::move(out), {}, scale, shift);
}

inline Var matmul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.rank() == 2 && vb.rank() == 2 && va.cols() == vb.rows(),
                  "matmul: expected (n,k)x(k,m)");
  const std::size_t n = va.rows(), kk = va.cols(), m = vb.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < kk; ++k) {
      const double aik = va(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out(i, j) += aik * vb(k, j);
    }
  }
  detail::check_finite(out, "matmul");
  return t->push(Op::kMatmul, a.id, b.id, std::move(out));
}

inline Var transpose(Var a) {
  const Tensor& va = a.val();
  detail::require(va.rank() == 2, "transpose: rank-2 expected");
  Tensor out({va.cols(), va.rows()});
  for (std::size_t i = 0; i < va.rows(); ++i)
    for (std::size_t j = 0; j < va.cols(); ++j) out(j, i) = va(i, j);
  return a.tape->push(Op::kTranspose, a.id, -1, std::move(out));
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.val().data()) s += x;
  Tensor out = Tensor::scalar(s);
  detail::check_finite(out, "sum");
  return a.tape->push(Op::kSum, a.id, -1, std::move(out));
}

inline Var mean(Var a) {
  double s = 0.0;
  for (double x : a.val().data()) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(a.val().size()));
  detail::check_finite(out, "mean");
  return a.tape->push(Op::kMean, a.id, -1, std::move(out));
}

inline Var sum_cols(Var a) {
  const Tensor& va = a.val();
  detail::require(va.rank() == 2, "sum_cols: rank-2 expected");
  Tensor out({va.rows()});
  for (std::size_t i = 0; i < va.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < va.cols(); ++j) s += va(i, j);
    out[i] = s;
  }
  detail::check_finite(out, "sum_cols");
  return a.tape->push(Op::kSumCols, a.id, -1, std::move(out));
}

inline Var sum_rows(Var a) {
  const Tensor& va = a.val();
  detail::require(va.rank() == 2, "sum_rows: rank-2 expected");
  Tensor out({va.cols()});
  for (std::size_t j = 0; j < va.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < va.rows(); ++i) s += va(i, j);
    out[j] = s;
  }
  detail::check_finite(out, "sum_rows");
  return a.tape->push(Op::kSumRows, a.id, -1, std::move(out));
}

inline Var exp(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = std::exp(x);
  detail::check_finite(out, "exp");
  return a.tape->push(Op::kExp, a.id, -1, std::move(out));
}

inline Var log(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) {
    if (x <= 0.0) throw std::runtime_error("autodiff: log of non-positive value");
    x = std::log(x);
  }
  detail::check_finite(out, "log");
  return a.tape->push(Op::kLog, a.id, -1, std::move(out));
}

inline Var sqrt(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) {
    if (x < 0.0) throw std::runtime_error("autodiff: sqrt of negative value");
    x = std::sqrt(x);
  }
  detail::check_finite(out, "sqrt");
  return a.tape->push(Op::kSqrt, a.id, -1, std::move(out));
}

inline Var square(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = x * x;
  detail::check_finite(out, "square");
  return a.tape->push(Op::kSquare, a.id, -1, std::move(out));
}

inline Var tanh(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = std::tanh(x);
  return a.tape->push(Op::kTanh, a.id, -1, std::move(out));
}

inline Var relu(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
  return a.tape->push(Op::kRelu, a.id, -1, std::move(out));
}

inline Var softplus(Var a) {
  Tensor out = a.val();
  for (double& x : out.data()) x = detail::stable_softplus(x);
  detail::check_finite(out, "softplus");
  return a.tape->push(Op::kSoftplus, a.id, -1, std::move(out));
}

inline Var logaddexp(Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.same_shape(vb), "logaddexp: shapes must match");
  Tensor out = va;
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double hi = std::max(va[k], vb[k]);
    const double lo = std::min(va[k], vb[k]);
    out[k] = hi + std::log1p(std::exp(lo - hi));
  }
  detail::check_finite(out, "logaddexp");
  return t->push(Op::kLogaddexp, a.id, b.id, std::move(out));
}

inline Var logsumexp_cols(Var a) {
  const Tensor& va = a.val();
  detail::require(va.rank() == 2, "logsumexp_cols: rank-2 expected");
  Tensor out({va.rows()});
  for (std::size_t i = 0; i < va.rows(); ++i) {
    double hi = va(i, 0);
    for (std::size_t j = 1; j < va.cols(); ++j) hi = std::max(hi, va(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < va.cols(); ++j) s += std::exp(va(i, j) - hi);
    out[i] = hi + std::log(s);
  }
  detail::check_finite(out, "logsumexp_cols");
  return a.tape->push(Op::kLogsumexpCols, a.id, -1, std::move(out));
}

inline Var logsumexp(Var a) {
  const Tensor& va = a.val();
  double hi = va[0];
  for (double x : va.data()) hi = std::max(hi, x);
  double s = 0.0;
  for (double x : va.data()) s += std::exp(x - hi);
  Tensor out = Tensor::scalar(hi + std::log(s));
  detail::check_finite(out, "logsumexp");
  return a.tape->push(Op::kLogsumexpFull, a.id, -1, std::move(out));
}

// mask*a + (1-mask)*b with a constant 0/1 mask (same shape as the operands, or
// (m,) broadcast over rows).
inline Var select(const Tensor& mask, Var a, Var b) {
  Tape* t = detail::same_tape(a, b);
  const Tensor& va = a.val();
  const Tensor& vb = b.val();
  detail::require(va.same_shape(vb), "select: operand shapes must match");
  const bool row = !mask.same_shape(va);
  if (row) {
    detail::require(va.rank() == 2 && mask.rank() == 1 && mask.size() == va.cols(),
                    "select: mask must match operands or broadcast over rows");
  }
  Tensor out = va;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double m = row ? mask[i % va.cols()] : mask[i];
    out[i] = m * va[i] + (1.0 - m) * vb[i];
  }
  detail::check_finite(out, "select");
  return t->push(Op::kSelect, a.id, b.id, std::move(out), mask);
}

inline Var diag_embed(Var a) {
  const Tensor& va = a.val();
  detail::require(va.rank() == 1, "diag_embed: rank-1 expected");
  const std::size_t d = va.size();
  Tensor out({d, d});
  for (std::size_t i = 0; i < d; ++i) out(i, i) = va[i];
  return a.tape->push(Op::kDiagEmbed, a.id, -1, std::move(out));
}

// Rows of the result solve L y = x_row for a lower-triangular L with nonzero
// diagonal. Only the lower triangle of L is read, and only it receives
// gradient.
inline Var trisolve_lower(Var l, Var x) {
  Tape* t = detail::same_tape(l, x);
  const Tensor& vl = l.val();
  const Tensor& vx = x.val();
  detail::require(vl.rank() == 2 && vl.rows() == vl.cols(), "trisolve_lower: L must be square");
  detail::require(vx.rank() == 2 && vx.cols() == vl.rows(),
                  "trisolve_lower: x must be (n,d) with d = dim(L)");
  const std::size_t d = vl.rows();
  for (std::size_t i = 0; i < d; ++i) {
    if (vl(i, i) == 0.0) throw std::runtime_error("trisolve_lower: zero diagonal entry");
  }
  Tensor out({vx.rows(), d});
  for (std::size_t r = 0; r < vx.rows(); ++r) {
    detail::solve_lower_row(vl, &vx.data()[r * d], &out.data()[r * d], d);
  }
  detail::check_finite(out, "trisolve_lower");
  return t->push(Op::kTrisolveLower, l.id, x.id, std::move(out));
}

inline Var logdet_psd(Var m) {
  const Tensor& vm = m.val();
  detail::require(vm.rank() == 2 && vm.rows() == vm.cols(), "logdet_psd: square matrix expected");
  Tensor chol = detail::cholesky(vm);
  double ld = 0.0;
  for (std::size_t i = 0; i < vm.rows(); ++i) ld += 2.0 * std::log(chol(i, i));
  Tensor out = Tensor::scalar(ld);
  detail::check_finite(out, "logdet_psd");
  return m.tape->push(Op::kLogdetPsd, m.id, -1, std::move(out), std::move(chol));
}

// Operator sugar for the common same-shape cases.
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

// ---- backward rules --------------------------------------------------------

inline void Tape::backward_node(int id, std::vector<Tensor>& adj, std::vector<bool>& live) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  const Tensor& g = adj[static_cast<std::size_t>(id)];
  auto acc = [&](int in) -> Tensor& {
    ensure(adj, live, in);
    return adj[static_cast<std::size_t>(in)];
  };
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k];
        gb[k] += g[k];
      }
      break;
    }
    case Op::kAddRow: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const std::size_t m = gb.size();
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k];
        gb[k % m] += g[k];
      }
      break;
    }
    case Op::kAddCol: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const std::size_t m = g.size() / gb.size();
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k];
        gb[k / m] += g[k];
      }
      break;
    }
    case Op::kAddScalar: {
      Tensor& ga = acc(n.in0);
      Tensor& gs = acc(n.in1);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k];
        gs[0] += g[k];
      }
      break;
    }
    case Op::kSub: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k];
        gb[k] -= g[k];
      }
      break;
    }
    case Op::kNeg: {
      Tensor& ga = acc(n.in0);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] -= g[k];
      break;
    }
    case Op::kMul: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const Tensor& va = node(n.in0).value;
      const Tensor& vb = node(n.in1).value;
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k] * vb[k];
        gb[k] += g[k] * va[k];
      }
      break;
    }
    case Op::kMulScalar: {
      Tensor& ga = acc(n.in0);
      Tensor& gs = acc(n.in1);
      const Tensor& va = node(n.in0).value;
      const double sv = node(n.in1).value[0];
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k] * sv;
        gs[0] += g[k] * va[k];
      }
      break;
    }
    case Op::kDiv: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const Tensor& vb = node(n.in1).value;
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k] / vb[k];
        gb[k] -= g[k] * n.value[k] / vb[k];
      }
      break;
    }
    case Op::kDivScalar: {
      Tensor& ga = acc(n.in0);
      Tensor& gs = acc(n.in1);
      const double sv = node(n.in1).value[0];
      for (std::size_t k = 0; k < g.size(); ++k) {
        ga[k] += g[k] / sv;
        gs[0] -= g[k] * n.value[k] / sv;
      }
      break;
    }
    case Op::kMulConst: {
      Tensor& ga = acc(n.in0);
      const Tensor& c = n.aux;
      if (c.same_shape(n.value)) {
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * c[k];
      } else {
        const std::size_t m = c.size();
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * c[k % m];
      }
      break;
    }
    case Op::kAffineConst: {
      Tensor& ga = acc(n.in0);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * n.c0;
      break;
    }
    case Op::kMatmul: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const Tensor& va = node(n.in0).value;
      const Tensor& vb = node(n.in1).value;
      const std::size_t nn = va.rows(), kk = va.cols(), m = vb.cols();
      // ga += g * vb^T ; gb += va^T * g
      for (std::size_t i = 0; i < nn; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g(i, j);
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < kk; ++k) ga(i, k) += gij * vb(k, j);
        }
      }
      for (std::size_t i = 0; i < nn; ++i) {
        for (std::size_t k = 0; k < kk; ++k) {
          const double aik = va(i, k);
          if (aik == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb(k, j) += aik * g(i, j);
        }
      }
      break;
    }
    case Op::kTranspose: {
      Tensor& ga = acc(n.in0);
      const std::size_t r = n.value.rows(), c = n.value.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga(j, i) += g(i, j);
      break;
    }
    case Op::kSum: {
      Tensor& ga = acc(n.in0);
      for (double& x : ga.data()) x += g[0];
      break;
    }
    case Op::kMean: {
      Tensor& ga = acc(n.in0);
      const double s = g[0] / static_cast<double>(ga.size());
      for (double& x : ga.data()) x += s;
      break;
    }
    case Op::kSumCols: {
      Tensor& ga = acc(n.in0);
      const std::size_t m = ga.cols();
      for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[k / m];
      break;
    }
    case Op::kSumRows: {
      Tensor& ga = acc(n.in0);
      const std::size_t m = ga.cols();
      for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[k % m];
      break;
    }
    case Op::kExp: {
      Tensor& ga = acc(n.in0);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * n.value[k];
      break;
    }
    case Op::kLog: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] / va[k];
      break;
    }
    case Op::kSqrt: {
      Tensor& ga = acc(n.in0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (n.value[k] == 0.0) throw std::runtime_error("autodiff: sqrt gradient at zero");
        ga[k] += g[k] * 0.5 / n.value[k];
      }
      break;
    }
    case Op::kSquare: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += 2.0 * g[k] * va[k];
      break;
    }
    case Op::kTanh: {
      Tensor& ga = acc(n.in0);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * (1.0 - n.value[k] * n.value[k]);
      break;
    }
    case Op::kRelu: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += va[k] > 0.0 ? g[k] : 0.0;
      break;
    }
    case Op::kSoftplus: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * detail::sigmoid(va[k]);
      break;
    }
    case Op::kLogaddexp: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const Tensor& va = node(n.in0).value;
      const Tensor& vb = node(n.in1).value;
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double wa = detail::sigmoid(va[k] - vb[k]);
        ga[k] += g[k] * wa;
        gb[k] += g[k] * (1.0 - wa);
      }
      break;
    }
    case Op::kLogsumexpCols: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      const std::size_t m = ga.cols();
      for (std::size_t k = 0; k < ga.size(); ++k) {
        const std::size_t i = k / m;
        ga[k] += g[i] * std::exp(va[k] - n.value[i]);
      }
      break;
    }
    case Op::kLogsumexpFull: {
      Tensor& ga = acc(n.in0);
      const Tensor& va = node(n.in0).value;
      for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[0] * std::exp(va[k] - n.value[0]);
      break;
    }
    case Op::kSelect: {
      Tensor& ga = acc(n.in0);
      Tensor& gb = acc(n.in1);
      const Tensor& mask = n.aux;
      const bool row = !mask.same_shape(n.value);
      const std::size_t m = n.value.rank() == 2 ? n.value.cols() : n.value.size();
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double mk = row ? mask[k % m] : mask[k];
        ga[k] += g[k] * mk;
        gb[k] += g[k] * (1.0 - mk);
      }
      break;
    }
    case Op::kDiagEmbed: {
      Tensor& ga = acc(n.in0);
      const std::size_t d = ga.size();
      for (std::size_t i = 0; i < d; ++i) ga[i] += g(i, i);
      break;
    }
    case Op::kTrisolveLower: {
      Tensor& gl = acc(n.in0);
      Tensor& gx = acc(n.in1);
      const Tensor& vl = node(n.in0).value;
      const Tensor& y = n.value;  // solution rows
      const std::size_t d = vl.rows();
      std::vector<double> z(d);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        // z = L^-T g_row ; gx_row += z ; gL -= tril(z y_row^T)
        detail::solve_lower_transposed_row(vl, &g.data()[r * d], z.data(), d);
        for (std::size_t i = 0; i < d; ++i) {
          gx(r, i) += z[i];
          for (std::size_t j = 0; j <= i; ++j) gl(i, j) -= z[i] * y(r, j);
        }
      }
      break;
    }
    case Op::kLogdetPsd: {
      Tensor& gm = acc(n.in0);
      const Tensor& chol = n.aux;
      const std::size_t d = chol.rows();
      // inv(M) column by column from the saved Cholesky factor
      std::vector<double> e(d), w(d), col(d);
      for (std::size_t j = 0; j < d; ++j) {
        std::fill(e.begin(), e.end(), 0.0);
        e[j] = 1.0;
        detail::solve_lower_row(chol, e.data(), w.data(), d);
        detail::solve_lower_transposed_row(chol, w.data(), col.data(), d);
        for (std::size_t i = 0; i < d; ++i) gm(i, j) += g[0] * col[i];
      }
      break;
    }
  }
}

}  // namespace lrmf::ad
