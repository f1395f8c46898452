#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lrmf/autodiff.hpp"
#include "lrmf/config.hpp"
#include "lrmf/dataset.hpp"
#include "lrmf/densities.hpp"
#include "lrmf/flows.hpp"
#include "lrmf/optim.hpp"
#include "lrmf/rng.hpp"

namespace lrmf {

// The core objective. A trained flow T makes T(A) indistinguishable from B
// with respect to the density family M; the loss provably reaches zero at
// alignment, so the final value doubles as the convergence indicator.
// Every likelihood quantity is a dataset average (nats per sample), so the
// precomputed constant, the loss and the distance are comparable across
// dataset sizes.

struct TraceRow {
  long iter = 0;
  double minibatch_loss = 0.0;
  double full_loss = std::numeric_limits<double>::quiet_NaN();  // at eval periods only
  double grad_norm_t = 0.0;
  double grad_norm_s = 0.0;
};

struct LrmfState {
  FlowParams flow;          // phi*
  DensityParams shared;     // theta_S*
  DensityParams private_a;  // theta_A*
  DensityParams private_b;  // theta_B*
  double c_ab = 0.0;
  double final_loss = 0.0;  // full-data LRMF loss at exit
  bool succeeded = false;   // I_c
  long iters = 0;
  std::vector<TraceRow> trace;
  std::string error_note;  // non-empty when training aborted on a numeric error
};

struct ConstantResult {
  double c_ab = 0.0;
  DensityParams theta_a;
  DensityParams theta_b;
  double avg_loglik_a = 0.0;
  double avg_loglik_b = 0.0;
};

// c(A,B) = max_theta avg log P_M(A;theta) + max_theta avg log P_M(B;theta).
// No flow parameter enters, so the value can be computed once up front.
inline ConstantResult precompute_constant(const Dataset& a, const Dataset& b, Family family,
                                          const TrainConfig& cfg,
                                          const DensityOptions& opts = {}) {
  ConstantResult r;
  TrainConfig pcfg = cfg;
  if (cfg.private_max_iters > 0) pcfg.max_iters = cfg.private_max_iters;
  auto fa = fit_density(family, a, pcfg, opts);
  auto fb = fit_density(family, b, pcfg, opts);
  r.theta_a = std::move(fa.params);
  r.theta_b = std::move(fb.params);
  r.avg_loglik_a = fa.avg_loglik;
  r.avg_loglik_b = fb.avg_loglik;
  r.c_ab = fa.avg_loglik + fb.avg_loglik;
  return r;
}

// L_LRMF(A,B,phi,theta_S) = -avg logdet - avg log P_M(T(A);theta_S)
//                           - avg log P_M(B;theta_S) + c(A,B).
inline double lrmf_loss(const Dataset& a, const Dataset& b, const FlowParams& flow,
                        const DensityParams& shared, double c_ab) {
  auto [ta, logdet] = flow_forward(flow, a.x);
  const double mean_logdet =
      detail::sorted_sum(logdet.data()) / static_cast<double>(logdet.size());
  if (!std::isfinite(mean_logdet)) {
    throw std::runtime_error("lrmf_loss: non-finite log-det term");
  }
  const double lp_ta = density_avg_loglik(shared, ta);
  if (!std::isfinite(lp_ta)) {
    throw std::runtime_error("lrmf_loss: non-finite log P_M(T(A); theta_S) term");
  }
  const double lp_b = density_avg_loglik(shared, b.x);
  if (!std::isfinite(lp_b)) {
    throw std::runtime_error("lrmf_loss: non-finite log P_M(B; theta_S) term");
  }
  return c_ab - mean_logdet - lp_ta - lp_b;
}

namespace detail {

inline DensityParams cold_shared_init(Family family, const Dataset& a, const Dataset& b,
                                      const DensityOptions& opts) {
  if (family == Family::kGaussian) {
    const std::size_t d = a.dim();
    return GaussianParams{Tensor::zeros({d}), Tensor::identity(d)};
  }
  if (family == Family::kMixture2) return mixture2_init(concat(a, b));
  FlowSpec spec = opts.flow;
  spec.dim = a.dim();
  return FlowDensityParams{init_identity(spec, Rng(999))};
}

}  // namespace detail

struct SharedFit {
  DensityParams params;
  double objective = 0.0;  // avg_ll(X;theta) + avg_ll(Y;theta) at the optimum
  bool converged = false;
  long iters = 0;
};

// Maximizes the equally-weighted objective avg_ll(X;theta) + avg_ll(Y;theta).
// Gaussian resolves in closed form from the two MLEs; other families ascend
// with balanced half-batches, mirroring Algorithm 1's shared-model update.
inline SharedFit fit_shared(Family family, const Dataset& x, const Dataset& y,
                            const TrainConfig& cfg, const DensityOptions& opts = {},
                            std::unique_ptr<DensityModel> init = nullptr) {
  cfg.validate();
  SharedFit r;
  if (family == Family::kGaussian && init == nullptr) {
    const GaussianParams px = gaussian_mle(x.sorted());
    const GaussianParams py = gaussian_mle(y.sorted());
    GaussianParams s = gaussian_shared_fit(px, py);
    r.objective = density_avg_loglik(DensityParams{s}, x.x) +
                  density_avg_loglik(DensityParams{s}, y.x);
    r.params = std::move(s);
    r.converged = true;
    return r;
  }

  std::unique_ptr<DensityModel> model =
      init ? std::move(init)
           : make_density_model(detail::cold_shared_init(family, x, y, opts));
  std::vector<Tensor*> ps = model->params();
  std::vector<Tensor> pvals;
  for (Tensor* t : ps) pvals.push_back(*t);
  AdamState adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, pvals);
  Batcher bx(x.n(), cfg.batch_size, Rng(cfg.seed).substream(5));
  Batcher by(y.n(), cfg.batch_size, Rng(cfg.seed).substream(6));

  while (r.iters < cfg.max_iters) {
    const Tensor batch_x = x.rows(bx.next());
    const Tensor batch_y = y.rows(by.next());
    ad::Tape tape;
    std::vector<ad::Var> pvars;
    for (const Tensor& t : pvals) pvars.push_back(tape.leaf(t));
    auto obj = ad::add(ad::mean(model->logpdf_rows_tape(tape, pvars, tape.leaf(batch_x))),
                       ad::mean(model->logpdf_rows_tape(tape, pvars, tape.leaf(batch_y))));
    auto grads = tape.gradients(obj, pvars);
    ++r.iters;
    if (grad_norm(grads) < cfg.grad_threshold) {
      r.converged = true;
      break;
    }
    for (Tensor& g : grads)
      for (double& v : g.data()) v = -v;
    adam.step(pvals, grads);
  }
  for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = pvals[i];
  r.params = model->freeze();
  r.objective = density_avg_loglik(r.params, x.x) + density_avg_loglik(r.params, y.x);
  return r;
}

// d_Lambda(A,B;M): private-optimal likelihood sum minus shared-optimal sum.
inline double lrd_estimate(const Dataset& a, const Dataset& b, Family family,
                           const TrainConfig& cfg, const DensityOptions& opts = {}) {
  auto fa = fit_density(family, a, cfg, opts);
  auto fb = fit_density(family, b, cfg, opts);
  auto shared = fit_shared(family, a, b, cfg, opts);
  return fa.avg_loglik + fb.avg_loglik - shared.objective;
}

struct BoundGapResult {
  double min_loss = 0.0;  // min over theta of L_LRMF(A,B,phi,theta)
  double lrd = 0.0;       // d_Lambda(T(A;phi), B)
  double gap = 0.0;       // min_loss - lrd; >= -tol, ~0 when E_bias = 0
};

// Both sides of the Theorem bound at a fixed phi.
inline BoundGapResult bound_gap(const Dataset& a, const Dataset& b, const FlowParams& flow,
                                Family family, const TrainConfig& cfg,
                                const DensityOptions& opts = {}) {
  auto [ta_x, logdet] = flow_forward(flow, a.x);
  const double mean_logdet =
      detail::sorted_sum(logdet.data()) / static_cast<double>(logdet.size());
  const Dataset ta(ta_x);

  auto fa = fit_density(family, a, cfg, opts);
  auto fb = fit_density(family, b, cfg, opts);
  auto fta = fit_density(family, ta, cfg, opts);
  auto shared = fit_shared(family, ta, b, cfg, opts);

  BoundGapResult r;
  r.min_loss = fa.avg_loglik + fb.avg_loglik - mean_logdet - shared.objective;
  r.lrd = fta.avg_loglik + fb.avg_loglik - shared.objective;
  r.gap = r.min_loss - r.lrd;
  return r;
}

// Algorithm 1: private fits, then simultaneous ascent of theta_S on
// [log P_M(T(A);theta_S) + log P_M(B;theta_S)] and phi on
// [log P_M(T(A);theta_S) + logdet], one Adam step each per iteration, until
// ||g_T|| + ||g_S|| < grad_threshold or the iteration cap. The convergence
// indicator comes from the final full-data loss alone; nothing here is fatal.
inline LrmfState train_lrmf(const Dataset& a, const Dataset& b, Family family,
                            FlowSpec flowspec, const TrainConfig& cfg,
                            const DensityOptions& opts = {}) {
  cfg.validate();
  if (a.dim() != b.dim() || a.n() == 0 || b.n() == 0) {
    throw std::invalid_argument("train_lrmf: datasets must be nonempty with equal dimension");
  }
  flowspec.dim = a.dim();

  LrmfState st;
  auto constant = precompute_constant(a, b, family, cfg, opts);
  st.c_ab = constant.c_ab;
  st.private_a = constant.theta_a;
  st.private_b = constant.theta_b;

  std::unique_ptr<DensityModel> shared_model =
      cfg.warm_start_shared
          ? make_density_model(constant.theta_b)
          : make_density_model(detail::cold_shared_init(family, a, b, opts));
  st.flow = init_identity(flowspec, Rng(cfg.seed).substream(2));

  std::vector<Tensor*> sp = shared_model->params();
  std::vector<Tensor*> fp = param_ptrs(st.flow);
  std::vector<Tensor> svals, fvals;
  for (Tensor* t : sp) svals.push_back(*t);
  for (Tensor* t : fp) fvals.push_back(*t);
  AdamState adam_s(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, svals);
  AdamState adam_t(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, fvals);
  Batcher ba(a.n(), cfg.batch_size, Rng(cfg.seed).substream(3));
  Batcher bb(b.n(), cfg.batch_size, Rng(cfg.seed).substream(4));

  auto sync = [&]() {
    for (std::size_t i = 0; i < sp.size(); ++i) *sp[i] = svals[i];
    for (std::size_t i = 0; i < fp.size(); ++i) *fp[i] = fvals[i];
  };
  auto full_loss = [&]() {
    sync();
    return lrmf_loss(a, b, st.flow, shared_model->freeze(), st.c_ab);
  };

  long t = 0;
  try {
    while (t < cfg.max_iters) {
      const Tensor batch_a = a.rows(ba.next());
      const Tensor batch_b = b.rows(bb.next());

      ad::Tape tape;
      std::vector<ad::Var> svars, fvars;
      for (const Tensor& v : svals) svars.push_back(tape.leaf(v));
      for (const Tensor& v : fvals) fvars.push_back(tape.leaf(v));
      auto fw = flow_forward_tape(tape, st.flow, fvars, tape.leaf(batch_a));
      auto lp_ta = ad::mean(shared_model->logpdf_rows_tape(tape, svars, fw.y));
      auto lp_b = ad::mean(shared_model->logpdf_rows_tape(tape, svars, tape.leaf(batch_b)));
      auto obj = ad::add(ad::add(lp_ta, lp_b), ad::mean(fw.logdet));

      std::vector<ad::Var> all = svars;
      all.insert(all.end(), fvars.begin(), fvars.end());
      auto grads = tape.gradients(obj, all);
      std::vector<Tensor> gs(grads.begin(), grads.begin() + static_cast<long>(svars.size()));
      std::vector<Tensor> gt(grads.begin() + static_cast<long>(svars.size()), grads.end());
      const double ns = grad_norm(gs);
      const double nt = grad_norm(gt);

      TraceRow row;
      row.iter = t;
      row.minibatch_loss = st.c_ab - obj.val().item();
      row.grad_norm_s = ns;
      row.grad_norm_t = nt;
      if (cfg.full_eval_period > 0 && t % cfg.full_eval_period == 0) {
        row.full_loss = full_loss();
      }
      st.trace.push_back(row);

      if (ns + nt < cfg.grad_threshold) break;

      for (Tensor& g : gs)
        for (double& v : g.data()) v = -v;
      for (Tensor& g : gt)
        for (double& v : g.data()) v = -v;
      adam_s.step(svals, gs);
      adam_t.step(fvals, gt);
      ++t;
    }
    st.final_loss = full_loss();
  } catch (const std::runtime_error& e) {
    st.error_note = e.what();
    st.final_loss = std::numeric_limits<double>::infinity();
    sync();
  }

  st.iters = t;
  st.shared = shared_model->freeze();
  st.succeeded = std::isfinite(st.final_loss) && st.final_loss < cfg.loss_threshold;

  TraceRow final_row;
  final_row.iter = t + 1;
  final_row.minibatch_loss = st.trace.empty() ? st.final_loss : st.trace.back().minibatch_loss;
  final_row.full_loss = st.final_loss;
  final_row.grad_norm_s = st.trace.empty() ? 0.0 : st.trace.back().grad_norm_s;
  final_row.grad_norm_t = st.trace.empty() ? 0.0 : st.trace.back().grad_norm_t;
  st.trace.push_back(final_row);
  return st;
}

}  // namespace lrmf
