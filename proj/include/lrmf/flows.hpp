#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lrmf/autodiff.hpp"
#include "lrmf/rng.hpp"
#include "lrmf/tensor.hpp"

namespace lrmf {

// Invertible transforms T(x; phi) with exact log-det Jacobians. Two families:
// an affine map with guaranteed-invertible linear part, and a stack of
// coupling blocks with alternating masks. Both invert in closed form.

enum class FlowKind { kAffine, kCoupling };
enum class AffineForm { kTriangular, kPosDef };
enum class Activation { kTanh, kRelu };

struct FlowSpec {
  FlowKind kind = FlowKind::kAffine;
  std::size_t dim = 2;
  std::size_t blocks = 4;       // coupling only
  std::size_t hidden = 64;      // conditioner width
  double s_max = 5.0;           // tanh bound on log-scales
  AffineForm affine_form = AffineForm::kTriangular;
  Activation activation = Activation::kTanh;
};

// Triangular form reads lin_raw as strict-lower entries plus a
// softplus-positive diagonal, so L is invertible by construction and
// logdet = sum log diag. PosDef form (the supplementary's T(x)=A^T A x + b)
// reads lin_raw as a free matrix A.
struct AffineFlowParams {
  AffineForm form = AffineForm::kTriangular;
  Tensor lin_raw;  // (d,d)
  Tensor bias;     // (d,)
};

struct CouplingNet {
  Tensor w1, b1, w2, b2, w3, b3;  // (d,h) (h,) (h,h) (h,) (h,d) (d,)
};

struct CouplingBlock {
  Tensor mask;  // (d,) of 0/1; consecutive blocks complement each other
  CouplingNet s, t;
};

struct CouplingFlowParams {
  std::vector<CouplingBlock> blocks;
  double s_max = 5.0;
  Activation activation = Activation::kTanh;
};

struct FlowParams {
  std::variant<AffineFlowParams, CouplingFlowParams> v;

  std::size_t dim() const {
    if (const auto* a = std::get_if<AffineFlowParams>(&v)) return a->bias.size();
    return std::get<CouplingFlowParams>(v).blocks.at(0).mask.size();
  }
  bool is_affine() const { return std::holds_alternative<AffineFlowParams>(v); }
};

namespace detail {

constexpr double kDiagFloor = 1e-8;

inline double softplus_inv(double y) {
  // inverse of log1p(exp(x)); y must be positive
  if (y <= 0.0) throw std::invalid_argument("softplus_inv: positive input required");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

inline Tensor strict_lower_mask(std::size_t d) {
  Tensor m({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) m(i, j) = 1.0;
  return m;
}

inline Tensor eye_mask(std::size_t d) { return Tensor::identity(d); }

// Raw value whose realized diagonal softplus(raw) + floor is exactly 1.0, so
// identity-initialized affine flows reproduce their input bitwise.
inline double raw_for_unit_diag() {
  auto realized = [](double r) { return ad::detail::stable_softplus(r) + kDiagFloor; };
  double raw = softplus_inv(1.0 - kDiagFloor);
  for (int i = 0; i < 256 && realized(raw) != 1.0; ++i) {
    raw = std::nextafter(raw, realized(raw) > 1.0 ? -1e30 : 1e30);
  }
  return raw;
}

inline ad::Var act(Activation a, ad::Var x) {
  return a == Activation::kTanh ? ad::tanh(x) : ad::relu(x);
}

}  // namespace detail

// ---- construction ----------------------------------------------------------

// Exact identity: affine gets L=I, b=0; coupling zeroes the last layer of
// every conditioner (hidden layers get small random weights so the nets are
// trainable from the start).
inline FlowParams init_identity(const FlowSpec& spec, Rng rng = Rng(0)) {
  if (spec.dim == 0) throw std::invalid_argument("init_identity: dim must be positive");
  if (spec.kind == FlowKind::kAffine) {
    AffineFlowParams p;
    p.form = spec.affine_form;
    p.bias = Tensor::zeros({spec.dim});
    if (spec.affine_form == AffineForm::kTriangular) {
      p.lin_raw = Tensor::zeros({spec.dim, spec.dim});
      const double raw_one = detail::raw_for_unit_diag();
      for (std::size_t i = 0; i < spec.dim; ++i) p.lin_raw(i, i) = raw_one;
    } else {
      p.lin_raw = Tensor::identity(spec.dim);
    }
    return FlowParams{std::move(p)};
  }

  if (spec.blocks == 0) throw std::invalid_argument("init_identity: coupling needs >= 1 block");
  CouplingFlowParams p;
  p.s_max = spec.s_max;
  p.activation = spec.activation;
  const std::size_t d = spec.dim, h = spec.hidden;
  auto net = [&](Rng& r) {
    CouplingNet n;
    const double sd1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd2 = 1.0 / std::sqrt(static_cast<double>(h));
    n.w1 = Tensor({d, h});
    for (double& x : n.w1.data()) x = sd1 * r.normal();
    n.b1 = Tensor::zeros({h});
    n.w2 = Tensor({h, h});
    for (double& x : n.w2.data()) x = sd2 * r.normal();
    n.b2 = Tensor::zeros({h});
    n.w3 = Tensor::zeros({h, d});  // zero last layer -> T = id exactly
    n.b3 = Tensor::zeros({d});
    return n;
  };
  for (std::size_t b = 0; b < spec.blocks; ++b) {
    CouplingBlock blk;
    blk.mask = Tensor({d});
    for (std::size_t j = 0; j < d; ++j) blk.mask[j] = ((j + b) % 2 == 0) ? 1.0 : 0.0;
    blk.s = net(rng);
    blk.t = net(rng);
    p.blocks.push_back(std::move(blk));
  }
  return FlowParams{std::move(p)};
}

// Triangular affine flow realizing exactly y = L x + b for a given
// lower-triangular L with positive diagonal.
inline FlowParams make_affine_flow(const Tensor& lower, const Tensor& bias) {
  const std::size_t d = bias.size();
  if (lower.rank() != 2 || lower.rows() != d || lower.cols() != d) {
    throw std::invalid_argument("make_affine_flow: L must be (d,d)");
  }
  AffineFlowParams p;
  p.form = AffineForm::kTriangular;
  p.bias = bias;
  p.lin_raw = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    if (!(lower(i, i) > detail::kDiagFloor)) {
      throw std::invalid_argument("make_affine_flow: diagonal must exceed the 1e-8 floor");
    }
    p.lin_raw(i, i) = detail::softplus_inv(lower(i, i) - detail::kDiagFloor);
    for (std::size_t j = 0; j < i; ++j) p.lin_raw(i, j) = lower(i, j);
  }
  return FlowParams{std::move(p)};
}

// ---- parameter plumbing ----------------------------------------------------

inline std::vector<Tensor*> param_ptrs(FlowParams& p) {
  std::vector<Tensor*> out;
  if (auto* a = std::get_if<AffineFlowParams>(&p.v)) {
    out = {&a->lin_raw, &a->bias};
  } else {
    auto& c = std::get<CouplingFlowParams>(p.v);
    for (auto& blk : c.blocks) {
      for (CouplingNet* n : {&blk.s, &blk.t}) {
        out.push_back(&n->w1);
        out.push_back(&n->b1);
        out.push_back(&n->w2);
        out.push_back(&n->b2);
        out.push_back(&n->w3);
        out.push_back(&n->b3);
      }
    }
  }
  return out;
}

inline std::vector<Tensor> param_values(const FlowParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : param_ptrs(const_cast<FlowParams&>(p))) out.push_back(*t);
  return out;
}

inline std::vector<ad::Var> bind_params(ad::Tape& tape, const FlowParams& p) {
  std::vector<ad::Var> vars;
  for (const Tensor& t : param_values(p)) vars.push_back(tape.leaf(t));
  return vars;
}

// ---- forward ----------------------------------------------------------------

struct FlowForward {
  ad::Var y;       // (n,d)
  ad::Var logdet;  // (n,)
};

namespace detail {

inline ad::Var coupling_net(Activation act_kind, ad::Var x, std::span<const ad::Var> w) {
  auto h1 = act(act_kind, ad::add(ad::matmul(x, w[0]), w[1]));
  auto h2 = act(act_kind, ad::add(ad::matmul(h1, w[2]), w[3]));
  return ad::add(ad::matmul(h2, w[4]), w[5]);
}

}  // namespace detail

// y = T(x; phi) and the per-row log|det dT/dx|. pvars must come from
// bind_params on the same structure (Adam may have changed values in between).
inline FlowForward flow_forward_tape(ad::Tape& tape, const FlowParams& p,
                                     std::span<const ad::Var> pvars, ad::Var x) {
  const std::size_t n = x.val().rows();
  const std::size_t d = x.val().cols();
  if (d != p.dim()) throw std::invalid_argument("flow_forward: dimension mismatch");

  if (const auto* a = std::get_if<AffineFlowParams>(&p.v)) {
    ad::Var lin_raw = pvars[0], bias = pvars[1];
    if (a->form == AffineForm::kTriangular) {
      auto diag = ad::sum_cols(ad::mul_const(lin_raw, detail::eye_mask(d)));
      auto dpos = ad::affine(ad::softplus(diag), 1.0, detail::kDiagFloor);
      auto lower = ad::mul_const(lin_raw, detail::strict_lower_mask(d));
      auto lmat = ad::add(lower, ad::diag_embed(dpos));
      auto y = ad::add(ad::matmul(x, ad::transpose(lmat)), bias);
      auto ld = ad::sum(ad::log(dpos));
      auto ld_rows = ad::mul_scalar(tape.constant(Tensor::full({n}, 1.0)), ld);
      return {y, ld_rows};
    }
    auto m = ad::matmul(ad::transpose(lin_raw), lin_raw);
    Tensor ridge = Tensor::identity(d);
    for (double& v : ridge.data()) v *= detail::kDiagFloor;
    auto mreg = ad::add(m, tape.constant(ridge));
    auto y = ad::add(ad::matmul(x, mreg), bias);  // M symmetric
    auto ld = ad::logdet_psd(mreg);
    auto ld_rows = ad::mul_scalar(tape.constant(Tensor::full({n}, 1.0)), ld);
    return {y, ld_rows};
  }

  const auto& c = std::get<CouplingFlowParams>(p.v);
  ad::Var cur = x;
  ad::Var ld_rows = tape.constant(Tensor::zeros({n}));
  std::size_t off = 0;
  for (const auto& blk : c.blocks) {
    Tensor keep = blk.mask;
    Tensor change = blk.mask;
    for (double& v : change.data()) v = 1.0 - v;

    auto xm = ad::mul_const(cur, keep);
    auto s_out = detail::coupling_net(c.activation, xm, pvars.subspan(off, 6));
    auto t_out = detail::coupling_net(c.activation, xm, pvars.subspan(off + 6, 6));
    off += 12;

    auto s = ad::affine(ad::tanh(s_out), c.s_max, 0.0);
    auto s_masked = ad::mul_const(s, change);
    auto z = ad::add(ad::mul(cur, ad::exp(s_masked)), ad::mul_const(t_out, change));
    cur = ad::select(keep, cur, z);
    ld_rows = ad::add(ld_rows, ad::sum_cols(ad::mul_const(s, change)));
  }
  return {cur, ld_rows};
}

// Convenience plain evaluation through a scratch tape.
inline std::pair<Tensor, Tensor> flow_forward(const FlowParams& p, const Tensor& x) {
  ad::Tape tape;
  auto pvars = bind_params(tape, p);
  auto fw = flow_forward_tape(tape, p, pvars, tape.leaf(x));
  return {fw.y.val(), fw.logdet.val()};
}

// ---- inverse ----------------------------------------------------------------

namespace detail {

inline Tensor affine_lower_factor(const AffineFlowParams& a) {
  const std::size_t d = a.bias.size();
  Tensor l({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = a.lin_raw(i, j);
    l(i, i) = ad::detail::stable_softplus(a.lin_raw(i, i)) + kDiagFloor;
  }
  return l;
}

inline Tensor coupling_net_plain(const CouplingNet& net, Activation act_kind, const Tensor& x) {
  auto dense = [&](const Tensor& in, const Tensor& w, const Tensor& b, bool activate) {
    Tensor out({in.rows(), b.size()});
    for (std::size_t i = 0; i < in.rows(); ++i) {
      for (std::size_t k = 0; k < in.cols(); ++k) {
        const double v = in(i, k);
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < b.size(); ++j) out(i, j) += v * w(k, j);
      }
    }
    for (std::size_t i = 0; i < in.rows(); ++i) {
      for (std::size_t j = 0; j < b.size(); ++j) {
        double v = out(i, j) + b[j];
        if (activate) v = act_kind == Activation::kTanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
        out(i, j) = v;
      }
    }
    return out;
  };
  Tensor h1 = dense(x, net.w1, net.b1, true);
  Tensor h2 = dense(h1, net.w2, net.b2, true);
  return dense(h2, net.w3, net.b3, false);
}

}  // namespace detail

// Exact inverse plus the log|det| of the inverse map, accumulated on the
// inverse path itself (not by negating the forward value).
inline std::pair<Tensor, Tensor> flow_inverse_with_logdet(const FlowParams& p, const Tensor& y) {
  const std::size_t n = y.rows(), d = y.cols();
  if (d != p.dim()) throw std::invalid_argument("flow_inverse: dimension mismatch");

  if (const auto* a = std::get_if<AffineFlowParams>(&p.v)) {
    Tensor x({n, d});
    Tensor ld({n});
    if (a->form == AffineForm::kTriangular) {
      Tensor l = detail::affine_lower_factor(*a);
      std::vector<double> rhs(d);
      double ldval = 0.0;
      for (std::size_t i = 0; i < d; ++i) ldval -= std::log(l(i, i));
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) rhs[j] = y(r, j) - a->bias[j];
        ad::detail::solve_lower_row(l, rhs.data(), &x.data()[r * d], d);
        ld[r] = ldval;
      }
      return {x, ld};
    }
    // M = A^T A + floor*I; x = M^-1 (y - b) via Cholesky
    Tensor m({d, d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = i == j ? detail::kDiagFloor : 0.0;
        for (std::size_t k = 0; k < d; ++k) s += a->lin_raw(k, i) * a->lin_raw(k, j);
        m(i, j) = s;
      }
    Tensor chol = ad::detail::cholesky(m);
    double ldval = 0.0;
    for (std::size_t i = 0; i < d; ++i) ldval -= 2.0 * std::log(chol(i, i));
    std::vector<double> rhs(d), w(d);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) rhs[j] = y(r, j) - a->bias[j];
      ad::detail::solve_lower_row(chol, rhs.data(), w.data(), d);
      ad::detail::solve_lower_transposed_row(chol, w.data(), &x.data()[r * d], d);
      ld[r] = ldval;
    }
    return {x, ld};
  }

  const auto& c = std::get<CouplingFlowParams>(p.v);
  Tensor x = y;
  Tensor ld({n});
  for (auto it = c.blocks.rbegin(); it != c.blocks.rend(); ++it) {
    const auto& blk = *it;
    Tensor xm({n, d});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) xm(r, j) = x(r, j) * blk.mask[j];
    Tensor s_out = detail::coupling_net_plain(blk.s, c.activation, xm);
    Tensor t_out = detail::coupling_net_plain(blk.t, c.activation, xm);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        if (blk.mask[j] != 0.0) continue;
        const double s = c.s_max * std::tanh(s_out(r, j));
        x(r, j) = (x(r, j) - t_out(r, j)) * std::exp(-s);
        ld[r] -= s;
      }
    }
  }
  if (!x.all_finite() || !ld.all_finite()) {
    throw std::runtime_error("flow_inverse: non-finite result");
  }
  return {x, ld};
}

inline Tensor flow_inverse(const FlowParams& p, const Tensor& y) {
  return flow_inverse_with_logdet(p, y).first;
}

}  // namespace lrmf
