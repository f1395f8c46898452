#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "lrmf/autodiff.hpp"
#include "lrmf/config.hpp"
#include "lrmf/dataset.hpp"
#include "lrmf/flows.hpp"
#include "lrmf/optim.hpp"
#include "lrmf/rng.hpp"
#include "lrmf/tensor.hpp"

namespace lrmf {

// The density family M(theta): log-likelihood evaluation and maximum-likelihood
// fitting for three families. Everything is reported in nats per sample.

enum class Family { kGaussian, kMixture2, kFlow };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::kGaussian: return "gaussian";
    case Family::kMixture2: return "mixture2";
    case Family::kFlow: return "flow";
  }
  return "?";
}

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2*pi)

// ---- Gaussian ---------------------------------------------------------------

// Covariance carried as its lower Cholesky factor, Sigma = L L^T; the diagonal
// stays >= 1e-8 so the factor is always invertible.
struct GaussianParams {
  Tensor mean;        // (d,)
  Tensor scale_tril;  // (d,d)

  std::size_t dim() const { return mean.size(); }
};

namespace detail {

// Sum of a multiset of doubles in value order: independent of input order.
inline double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline void check_gaussian(const GaussianParams& p) {
  const std::size_t d = p.dim();
  if (p.scale_tril.rank() != 2 || p.scale_tril.rows() != d || p.scale_tril.cols() != d) {
    throw std::invalid_argument("gaussian: scale_tril must be (d,d)");
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (!(p.scale_tril(i, i) > 0.0)) {
      throw std::invalid_argument("gaussian: scale_tril diagonal must be positive");
    }
  }
}

}  // namespace detail

inline Tensor gaussian_logpdf_rows(const GaussianParams& p, const Tensor& x) {
  detail::check_gaussian(p);
  const std::size_t d = p.dim();
  if (x.rank() != 2 || x.cols() != d) {
    throw std::invalid_argument("gaussian_logpdf: x must be (n,d) with matching d");
  }
  double logdiag = 0.0;
  for (std::size_t i = 0; i < d; ++i) logdiag += std::log(p.scale_tril(i, i));
  const double c = -logdiag - 0.5 * static_cast<double>(d) * kLog2Pi;
  Tensor out({x.rows()});
  std::vector<double> delta(d), y(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < d; ++j) delta[j] = x(r, j) - p.mean[j];
    ad::detail::solve_lower_row(p.scale_tril, delta.data(), y.data(), d);
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) q += y[j] * y[j];
    out[r] = c - 0.5 * q;
  }
  return out;
}

inline double gaussian_logpdf(const Tensor& x, const GaussianParams& p) {
  Tensor row({1, x.size()});
  for (std::size_t j = 0; j < x.size(); ++j) row(0, j) = x[j];
  return gaussian_logpdf_rows(p, row)[0];
}

// -1/2 log det(2 pi e Sigma): the maximal average log-likelihood of the family
// at these parameters' own distribution.
inline double gaussian_negentropy(const GaussianParams& p) {
  detail::check_gaussian(p);
  double logdiag = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) logdiag += std::log(p.scale_tril(i, i));
  return -logdiag - 0.5 * static_cast<double>(p.dim()) * (kLog2Pi + 1.0);
}

// Closed-form MLE: sample mean and (1/n)-covariance. Accumulations run in
// value order so the result does not depend on row order. A singular
// covariance gets one 1e-9 ridge; if that still fails the error propagates.
inline GaussianParams gaussian_mle(const Dataset& data) {
  const std::size_t n = data.n(), d = data.dim();
  if (n < d + 1) throw std::invalid_argument("gaussian_mle: need at least d+1 samples");
  GaussianParams p;
  p.mean = Tensor({d});
  std::vector<double> col(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = data.x(i, j);
    p.mean[j] = detail::sorted_sum(col) / static_cast<double>(n);
  }
  Tensor cov({d, d});
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = j; k < d; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = (data.x(i, j) - p.mean[j]) * (data.x(i, k) - p.mean[k]);
      }
      cov(j, k) = cov(k, j) = detail::sorted_sum(col) / static_cast<double>(n);
    }
  }
  try {
    p.scale_tril = ad::detail::cholesky(cov);
  } catch (const std::runtime_error&) {
    for (std::size_t j = 0; j < d; ++j) cov(j, j) += 1e-9;
    try {
      p.scale_tril = ad::detail::cholesky(cov);
    } catch (const std::runtime_error&) {
      throw std::runtime_error("gaussian_mle: singular sample covariance");
    }
  }
  return p;
}

// Argmax of the equally-weighted objective avg_ll(A;theta) + avg_ll(B;theta)
// over the Gaussian family, from the two private MLEs.
inline GaussianParams gaussian_shared_fit(const GaussianParams& a, const GaussianParams& b) {
  const std::size_t d = a.dim();
  if (b.dim() != d) throw std::invalid_argument("gaussian_shared_fit: dimension mismatch");
  GaussianParams s;
  s.mean = Tensor({d});
  for (std::size_t j = 0; j < d; ++j) s.mean[j] = 0.5 * (a.mean[j] + b.mean[j]);
  Tensor cov({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double ca = 0.0, cb = 0.0;
      for (std::size_t k = 0; k <= std::min(i, j); ++k) {
        ca += a.scale_tril(i, k) * a.scale_tril(j, k);
        cb += b.scale_tril(i, k) * b.scale_tril(j, k);
      }
      const double dd = (a.mean[i] - b.mean[i]) * (a.mean[j] - b.mean[j]);
      cov(i, j) = 0.5 * (ca + cb) + 0.25 * dd;
    }
  }
  s.scale_tril = ad::detail::cholesky(cov);
  return s;
}

// ---- two-component mixture (Example family) ---------------------------------

// Equal-weight mixture of two univariate normals with shared variance.
struct Mixture2Params {
  double mu1 = 0.0;
  double mu2 = 0.0;
  double var = 1.0;
};

inline double mixture2_logpdf(double x, const Mixture2Params& p) {
  if (!(p.var > 0.0)) throw std::invalid_argument("mixture2: variance must be positive");
  const double c = -0.5 * (kLog2Pi + std::log(p.var));
  const double lp1 = c - (x - p.mu1) * (x - p.mu1) / (2.0 * p.var);
  const double lp2 = c - (x - p.mu2) * (x - p.mu2) / (2.0 * p.var);
  const double hi = std::max(lp1, lp2);
  const double lo = std::min(lp1, lp2);
  return hi + std::log1p(std::exp(lo - hi)) - std::numbers::ln2;
}

inline Tensor mixture2_logpdf_rows(const Mixture2Params& p, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != 1) {
    throw std::invalid_argument("mixture2_logpdf: x must be (n,1)");
  }
  Tensor out({x.rows()});
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = mixture2_logpdf(x(r, 0), p);
  return out;
}

// ---- flow density ------------------------------------------------------------

// A coupling/affine flow in the normalizing direction (data -> latent) with a
// standard-normal prior; logpdf(x) = logN(f(x)) + log|det df/dx(x)|. In the
// generative reading T = f^{-1}, this is exactly the change-of-variables value
// logN(T^{-1}(x)) + log|det grad T^{-1}(x)|.
struct FlowDensityParams {
  FlowParams normalizer;

  std::size_t dim() const { return normalizer.dim(); }
};

inline Tensor flow_logpdf(const Tensor& x, const FlowDensityParams& p) {
  auto [z, logdet] = flow_forward(p.normalizer, x);
  const std::size_t d = x.cols();
  Tensor out({x.rows()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) q += z(r, j) * z(r, j);
    out[r] = -0.5 * q - 0.5 * static_cast<double>(d) * kLog2Pi + logdet[r];
  }
  return out;
}

// ---- tagged union + plain dispatch -------------------------------------------

using DensityParams = std::variant<GaussianParams, Mixture2Params, FlowDensityParams>;

inline Family family_of(const DensityParams& p) {
  if (std::holds_alternative<GaussianParams>(p)) return Family::kGaussian;
  if (std::holds_alternative<Mixture2Params>(p)) return Family::kMixture2;
  return Family::kFlow;
}

inline Tensor density_logpdf_rows(const DensityParams& p, const Tensor& x) {
  if (const auto* g = std::get_if<GaussianParams>(&p)) return gaussian_logpdf_rows(*g, x);
  if (const auto* m = std::get_if<Mixture2Params>(&p)) return mixture2_logpdf_rows(*m, x);
  return flow_logpdf(x, std::get<FlowDensityParams>(p));
}

// Accumulated in value order, so the average depends only on the multiset of
// rows; identical datasets cancel exactly inside the loss.
inline double density_avg_loglik(const DensityParams& p, const Tensor& x) {
  const Tensor lp = density_logpdf_rows(p, x);
  return detail::sorted_sum(lp.data()) / static_cast<double>(lp.size());
}

// ---- trainable models --------------------------------------------------------

// Raw (unconstrained) parameterizations that gradient fitting runs on; freeze()
// converts back to the constrained records above.
class DensityModel {
 public:
  virtual ~DensityModel() = default;
  virtual std::vector<Tensor*> params() = 0;
  virtual ad::Var logpdf_rows_tape(ad::Tape& tape, std::span<const ad::Var> pvars,
                                   ad::Var x) const = 0;
  virtual DensityParams freeze() const = 0;

  std::vector<ad::Var> bind(ad::Tape& tape) {
    std::vector<ad::Var> vars;
    for (Tensor* t : params()) vars.push_back(tape.leaf(*t));
    return vars;
  }

  Tensor logpdf_rows(const Tensor& x) {
    ad::Tape tape;
    auto pvars = bind(tape);
    return logpdf_rows_tape(tape, pvars, tape.leaf(x)).val();
  }
};

namespace detail {

constexpr double kVarFloor = 1e-10;

inline ad::Var gaussian_logpdf_graph(ad::Tape&, ad::Var mean, ad::Var diag_raw, ad::Var below,
                                     ad::Var x) {
  const std::size_t d = mean.val().size();
  auto dpos = ad::affine(ad::softplus(diag_raw), 1.0, kDiagFloor);
  auto lmat = ad::add(ad::mul_const(below, strict_lower_mask(d)), ad::diag_embed(dpos));
  auto delta = ad::add(x, ad::neg(mean));
  auto solved = ad::trisolve_lower(lmat, delta);
  auto quad = ad::sum_cols(ad::square(solved));
  auto lp = ad::affine(quad, -0.5, -0.5 * static_cast<double>(d) * kLog2Pi);
  return ad::add_scalar(lp, ad::neg(ad::sum(ad::log(dpos))));
}

}  // namespace detail

class GaussianModel final : public DensityModel {
 public:
  explicit GaussianModel(const GaussianParams& p) {
    const std::size_t d = p.dim();
    mean_ = p.mean;
    diag_raw_ = Tensor({d});
    below_ = Tensor({d, d});
    for (std::size_t i = 0; i < d; ++i) {
      diag_raw_[i] = detail::softplus_inv(std::max(p.scale_tril(i, i) - detail::kDiagFloor,
                                                   detail::kDiagFloor));
      for (std::size_t j = 0; j < i; ++j) below_(i, j) = p.scale_tril(i, j);
    }
  }

  std::vector<Tensor*> params() override { return {&mean_, &diag_raw_, &below_}; }

  ad::Var logpdf_rows_tape(ad::Tape& tape, std::span<const ad::Var> pvars,
                           ad::Var x) const override {
    return detail::gaussian_logpdf_graph(tape, pvars[0], pvars[1], pvars[2], x);
  }

  DensityParams freeze() const override {
    const std::size_t d = mean_.size();
    GaussianParams p;
    p.mean = mean_;
    p.scale_tril = Tensor({d, d});
    for (std::size_t i = 0; i < d; ++i) {
      p.scale_tril(i, i) = ad::detail::stable_softplus(diag_raw_[i]) + detail::kDiagFloor;
      for (std::size_t j = 0; j < i; ++j) p.scale_tril(i, j) = below_(i, j);
    }
    return p;
  }

 private:
  Tensor mean_, diag_raw_, below_;
};

class Mixture2Model final : public DensityModel {
 public:
  explicit Mixture2Model(const Mixture2Params& p)
      : mu1_(Tensor::scalar(p.mu1)),
        mu2_(Tensor::scalar(p.mu2)),
        var_raw_(Tensor::scalar(detail::softplus_inv(std::max(p.var - detail::kVarFloor, 1e-9)))) {}

  std::vector<Tensor*> params() override { return {&mu1_, &mu2_, &var_raw_}; }

  ad::Var logpdf_rows_tape(ad::Tape&, std::span<const ad::Var> pvars, ad::Var x) const override {
    auto var = ad::affine(ad::softplus(pvars[2]), 1.0, detail::kVarFloor);
    auto twovar = ad::affine(var, 2.0, 0.0);
    auto norm = ad::affine(ad::log(var), -0.5, -0.5 * kLog2Pi);
    auto comp = [&](ad::Var mu) {
      auto q = ad::square(ad::add_scalar(x, ad::neg(mu)));
      return ad::add_scalar(ad::neg(ad::div_scalar(q, twovar)), norm);
    };
    auto mix = ad::logaddexp(comp(pvars[0]), comp(pvars[1]));
    return ad::sum_cols(ad::affine(mix, 1.0, -std::numbers::ln2));
  }

  DensityParams freeze() const override {
    return Mixture2Params{mu1_.item(), mu2_.item(),
                          ad::detail::stable_softplus(var_raw_.item()) + detail::kVarFloor};
  }

 private:
  Tensor mu1_, mu2_, var_raw_;
};

class FlowDensityModel final : public DensityModel {
 public:
  explicit FlowDensityModel(FlowParams normalizer) : flow_(std::move(normalizer)) {}

  std::vector<Tensor*> params() override { return param_ptrs(flow_); }

  ad::Var logpdf_rows_tape(ad::Tape& tape, std::span<const ad::Var> pvars,
                           ad::Var x) const override {
    auto fw = flow_forward_tape(tape, flow_, pvars, x);
    const double d = static_cast<double>(flow_.dim());
    auto prior = ad::affine(ad::sum_cols(ad::square(fw.y)), -0.5, -0.5 * d * kLog2Pi);
    return ad::add(prior, fw.logdet);
  }

  DensityParams freeze() const override { return FlowDensityParams{flow_}; }

  const FlowParams& flow() const { return flow_; }

 private:
  FlowParams flow_;
};

inline std::unique_ptr<DensityModel> make_density_model(const DensityParams& p) {
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    return std::make_unique<GaussianModel>(*g);
  }
  if (const auto* m = std::get_if<Mixture2Params>(&p)) {
    return std::make_unique<Mixture2Model>(*m);
  }
  return std::make_unique<FlowDensityModel>(std::get<FlowDensityParams>(p).normalizer);
}

// ---- fitting -----------------------------------------------------------------

struct FitResult {
  DensityParams params;
  double avg_loglik = 0.0;
  bool converged = false;  // gradient-norm criterion met before the iteration cap
  long iters = 0;
};

// Epoch-shuffled batches without replacement.
class Batcher {
 public:
  Batcher(std::size_t n, std::size_t batch, Rng rng)
      : n_(n), batch_(std::min(batch, n)), rng_(rng) {}

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      order_ = rng_.permutation(n_);
      pos_ = 0;
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<long>(pos_),
                                 order_.begin() + static_cast<long>(pos_ + batch_));
    pos_ += batch_;
    return idx;
  }

  bool full_batch() const { return batch_ == n_; }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 1;  // forces a shuffle on first call
};

struct DensityOptions {
  FlowSpec flow{FlowKind::kCoupling, 2, 4, 64, 5.0, AffineForm::kTriangular, Activation::kTanh};
};

namespace detail {

// Deterministic data-driven start for the mixture fit: outer quartiles and the
// sample variance.
inline Mixture2Params mixture2_init(const Dataset& data) {
  std::vector<double> v(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) v[i] = data.x(i, 0);
  std::sort(v.begin(), v.end());
  const double q1 = v[v.size() / 4];
  const double q3 = v[(3 * v.size()) / 4];
  double m = sorted_sum(v) / static_cast<double>(v.size());
  double s2 = 0.0;
  for (double x : v) s2 += (x - m) * (x - m);
  s2 /= static_cast<double>(v.size());
  return Mixture2Params{q1, q3, std::max(s2 / 4.0, 1e-6)};
}

}  // namespace detail

// Gaussian resolves in closed form; the other families ascend mini-batch
// average log-likelihood with Adam until the gradient norm drops below
// grad_threshold or max_iters is hit (non-convergence is reported, not fatal).
inline FitResult fit_density(Family family, const Dataset& data, const TrainConfig& cfg,
                             const DensityOptions& opts = {}) {
  cfg.validate();
  if (data.n() == 0) throw std::invalid_argument("fit_density: empty dataset");

  if (family == Family::kGaussian) {
    const Dataset canon = data.sorted();
    FitResult r;
    r.params = gaussian_mle(canon);
    r.avg_loglik = density_avg_loglik(r.params, canon.x);
    r.converged = true;
    return r;
  }

  const bool full = cfg.batch_size >= data.n();
  const Dataset work = full ? data.sorted() : data;

  std::unique_ptr<DensityModel> model;
  if (family == Family::kMixture2) {
    if (work.dim() != 1) throw std::invalid_argument("fit_density: mixture2 is univariate");
    model = std::make_unique<Mixture2Model>(detail::mixture2_init(work));
  } else {
    FlowSpec spec = opts.flow;
    spec.dim = work.dim();
    model = std::make_unique<FlowDensityModel>(init_identity(spec, Rng(cfg.seed).substream(17)));
  }

  std::vector<Tensor*> ps = model->params();
  std::vector<Tensor> pvals;
  for (Tensor* t : ps) pvals.push_back(*t);
  AdamState adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, pvals);
  Batcher batcher(work.n(), cfg.batch_size, Rng(cfg.seed).substream(1));

  FitResult r;
  bool stop = false;
  while (!stop && r.iters < cfg.max_iters) {
    const Tensor batch = work.rows(batcher.next());
    ad::Tape tape;
    std::vector<ad::Var> pvars;
    for (const Tensor& t : pvals) pvars.push_back(tape.leaf(t));
    auto obj = ad::mean(model->logpdf_rows_tape(tape, pvars, tape.leaf(batch)));
    auto grads = tape.gradients(obj, pvars);
    const double gn = grad_norm(grads);
    ++r.iters;
    if (gn < cfg.grad_threshold) {
      r.converged = true;
      stop = true;
    } else {
      for (Tensor& g : grads)
        for (double& v : g.data()) v = -v;  // ascend
      adam.step(pvals, grads);
    }
  }
  for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = pvals[i];
  r.params = model->freeze();
  r.avg_loglik = density_avg_loglik(r.params, work.x);
  return r;
}

}  // namespace lrmf
