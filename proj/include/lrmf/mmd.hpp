#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "lrmf/autodiff.hpp"
#include "lrmf/config.hpp"
#include "lrmf/dataset.hpp"
#include "lrmf/densities.hpp"
#include "lrmf/flows.hpp"
#include "lrmf/optim.hpp"
#include "lrmf/tensor.hpp"

namespace lrmf {

// Kernel two-sample machinery for the comparison objective: unbiased MMD^2
// with an RBF kernel, k(x,y) = exp(-||x-y||^2 / (2 h^2)).

struct MmdConfig {
  double bandwidth = 0.0;  // 0 means: use the median heuristic; must be positive when explicit
};

// Median pairwise Euclidean distance over the pooled sample, exact.
inline double median_heuristic(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.rows(), m = y.rows(), d = x.cols();
  if (y.cols() != d) throw std::invalid_argument("median_heuristic: dimension mismatch");
  if (n + m < 2) throw std::invalid_argument("median_heuristic: pooled size must be >= 2");
  std::vector<double> dist;
  dist.reserve((n + m) * (n + m - 1) / 2);
  auto at = [&](std::size_t i, std::size_t j) {
    return i < n ? x(i, j) : y(i - n, j);
  };
  for (std::size_t i = 0; i < n + m; ++i) {
    for (std::size_t j = i + 1; j < n + m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = at(i, k) - at(j, k);
        s += diff * diff;
      }
      dist.push_back(std::sqrt(s));
    }
  }
  std::sort(dist.begin(), dist.end());
  const double med = dist.size() % 2 == 1
                         ? dist[dist.size() / 2]
                         : 0.5 * (dist[dist.size() / 2 - 1] + dist[dist.size() / 2]);
  if (med <= 0.0) throw std::invalid_argument("median_heuristic: all points identical");
  return med;
}

namespace detail {

// Pairwise squared distances via the expansion ||x||^2 + ||y||^2 - 2 x.y,
// clamped at zero through relu.
inline ad::Var sq_dists(ad::Tape& tape, ad::Var x, ad::Var y) {
  auto xx = ad::sum_cols(ad::square(x));  // (n,)
  auto yy = ad::sum_cols(ad::square(y));  // (m,)
  auto cross = ad::matmul(x, ad::transpose(y));
  auto d2 = ad::add(ad::add_cols(ad::affine(cross, -2.0, 0.0), xx), yy);
  (void)tape;
  return ad::relu(d2);
}

}  // namespace detail

// Unbiased U-statistic estimator on the tape (differentiable through x and y).
inline ad::Var mmd2_unbiased_tape(ad::Tape& tape, ad::Var x, ad::Var y, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("mmd2: bandwidth must be positive");
  const double n = static_cast<double>(x.val().rows());
  const double m = static_cast<double>(y.val().rows());
  if (n < 2 || m < 2) throw std::invalid_argument("mmd2: need at least two samples per side");
  const double gamma = -0.5 / (bandwidth * bandwidth);

  auto kxx = ad::exp(ad::affine(detail::sq_dists(tape, x, x), gamma, 0.0));
  auto kyy = ad::exp(ad::affine(detail::sq_dists(tape, y, y), gamma, 0.0));
  auto kxy = ad::exp(ad::affine(detail::sq_dists(tape, x, y), gamma, 0.0));

  // off-diagonal sums: the diagonal of a same-sample kernel matrix is 1
  auto sxx = ad::affine(ad::sum(kxx), 1.0 / (n * (n - 1.0)), -n / (n * (n - 1.0)));
  auto syy = ad::affine(ad::sum(kyy), 1.0 / (m * (m - 1.0)), -m / (m * (m - 1.0)));
  auto sxy = ad::affine(ad::sum(kxy), -2.0 / (n * m), 0.0);
  return ad::add(ad::add(sxx, syy), sxy);
}

inline double mmd2_unbiased(const Dataset& x, const Dataset& y, const MmdConfig& cfg = {}) {
  if (cfg.bandwidth < 0.0) throw std::invalid_argument("mmd2: bandwidth must be positive");
  const double h = cfg.bandwidth > 0.0 ? cfg.bandwidth : median_heuristic(x.x, y.x);
  ad::Tape tape;
  return mmd2_unbiased_tape(tape, tape.leaf(x.x), tape.leaf(y.x), h).val().item();
}

struct MmdTrainResult {
  FlowParams flow;
  double final_mmd2 = 0.0;
  double bandwidth = 0.0;
  long iters = 0;
  std::vector<std::pair<long, double>> trace;  // (iter, minibatch mmd^2)
};

// Minimizes mmd2(T(A;phi), B) over the same flow family, optimizer, budget and
// seed protocol as train_lrmf, so the two objectives compare fairly. The
// bandwidth is fixed up front from the full datasets (median heuristic) unless
// given explicitly.
inline MmdTrainResult train_mmd_align(const Dataset& a, const Dataset& b, FlowSpec flowspec,
                                      const TrainConfig& cfg, const MmdConfig& mcfg = {}) {
  cfg.validate();
  if (a.dim() != b.dim() || a.n() == 0 || b.n() == 0) {
    throw std::invalid_argument("train_mmd: datasets must be nonempty with equal dimension");
  }
  flowspec.dim = a.dim();

  if (mcfg.bandwidth < 0.0) throw std::invalid_argument("train_mmd: bandwidth must be positive");
  MmdTrainResult r;
  r.bandwidth = mcfg.bandwidth > 0.0 ? mcfg.bandwidth : median_heuristic(a.x, b.x);
  r.flow = init_identity(flowspec, Rng(cfg.seed).substream(2));

  std::vector<Tensor*> fp = param_ptrs(r.flow);
  std::vector<Tensor> fvals;
  for (Tensor* t : fp) fvals.push_back(*t);
  AdamState adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, fvals);
  Batcher ba(a.n(), cfg.batch_size, Rng(cfg.seed).substream(3));
  Batcher bb(b.n(), cfg.batch_size, Rng(cfg.seed).substream(4));

  long t = 0;
  while (t < cfg.max_iters) {
    const Tensor batch_a = a.rows(ba.next());
    const Tensor batch_b = b.rows(bb.next());
    ad::Tape tape;
    std::vector<ad::Var> fvars;
    for (const Tensor& v : fvals) fvars.push_back(tape.leaf(v));
    auto fw = flow_forward_tape(tape, r.flow, fvars, tape.leaf(batch_a));
    auto obj = mmd2_unbiased_tape(tape, fw.y, tape.leaf(batch_b), r.bandwidth);
    auto grads = tape.gradients(obj, fvars);
    r.trace.emplace_back(t, obj.val().item());
    if (grad_norm(grads) < cfg.grad_threshold) break;
    adam.step(fvals, grads);
    ++t;
  }
  r.iters = t;
  for (std::size_t i = 0; i < fp.size(); ++i) *fp[i] = fvals[i];
  ad::Tape tape;
  auto fvars = bind_params(tape, r.flow);
  auto fw = flow_forward_tape(tape, r.flow, fvars, tape.leaf(a.x));
  r.final_mmd2 =
      mmd2_unbiased_tape(tape, fw.y, tape.leaf(b.x), r.bandwidth).val().item();
  return r;
}

// Accuracy of a 1-nearest-neighbor classifier trained on the target (B with
// its labels) and evaluated on the transformed source.
inline double knn_transfer_accuracy(const Dataset& ta, const std::vector<int>& ya,
                                    const Dataset& b, const std::vector<int>& yb) {
  if (ta.n() == 0 || b.n() == 0) throw std::invalid_argument("knn: empty inputs");
  if (ya.size() != ta.n() || yb.size() != b.n()) {
    throw std::invalid_argument("knn: labels must match dataset sizes");
  }
  const std::size_t d = ta.dim();
  if (b.dim() != d) throw std::invalid_argument("knn: dimension mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ta.n(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < b.n(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = ta.x(i, k) - b.x(j, k);
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        arg = j;
      }
    }
    if (yb[arg] == ya[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ta.n());
}

}  // namespace lrmf
