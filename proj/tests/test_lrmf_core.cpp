#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "lrmf/analytic.hpp"
#include "lrmf/generators.hpp"
#include "lrmf/lrmf.hpp"

using namespace lrmf;

namespace {

Dataset gaussian_sample_1d(Rng& rng, std::size_t n, double mu, double sigma) {
  Tensor x({n, 1});
  for (double& v : x.data()) v = mu + sigma * rng.normal();
  return Dataset(std::move(x));
}

// Sample with its mean removed exactly, so the printed optimum
// (sigma_B/sigma_A, mu_B - mu_A) and the push-forward optimum coincide.
Dataset centered(const Dataset& d) {
  auto p = gaussian_mle(d);
  Tensor x = d.x;
  for (std::size_t i = 0; i < d.n(); ++i)
    for (std::size_t j = 0; j < d.dim(); ++j) x(i, j) -= p.mean[j];
  return Dataset(std::move(x));
}

constexpr double kNegentStd = -1.4189385332046727;  // -1/2 log(2 pi e)

}  // namespace

TEST_CASE("precompute_constant") {
  SUBCASE("A=B gives exactly twice one fit and cancels in the loss") {
    auto [a, b] = gen_blobs(5, 300);
    TrainConfig cfg;
    auto c = precompute_constant(a, a, Family::kGaussian, cfg);
    CHECK(c.c_ab == 2.0 * c.avg_loglik_a);
    CHECK(c.avg_loglik_a == c.avg_loglik_b);

    FlowSpec spec;
    spec.kind = FlowKind::kAffine;
    spec.dim = 2;
    const double loss = lrmf_loss(a, a, init_identity(spec), c.theta_a, c.c_ab);
    CHECK(loss == 0.0);
  }
  SUBCASE("population d=1 value: sigma_A=1, sigma_B=2") {
    // c_AB at the population optimum is the sum of the two negentropies
    GaussianParams pa{Tensor::vector({0.0}), Tensor::matrix(1, 1, {1.0})};
    GaussianParams pb{Tensor::vector({0.0}), Tensor::matrix(1, 1, {2.0})};
    const double want = -std::log(2.0) - std::log(2.0 * std::numbers::pi * std::numbers::e);
    CHECK(gaussian_negentropy(pa) + gaussian_negentropy(pb) ==
          doctest::Approx(want).epsilon(1e-12));

    Rng rng(31);
    Dataset a = gaussian_sample_1d(rng, 50000, 0.0, 1.0);
    Dataset b = gaussian_sample_1d(rng, 50000, 0.0, 2.0);
    TrainConfig cfg;
    auto c = precompute_constant(a, b, Family::kGaussian, cfg);
    CHECK(c.c_ab == doctest::Approx(want).epsilon(0.02));
  }
  SUBCASE("the constant does not depend on the flow: recomputation is bitwise identical") {
    auto [a, b] = gen_blobs(9, 200);
    TrainConfig cfg;
    auto c1 = precompute_constant(a, b, Family::kGaussian, cfg);
    auto c2 = precompute_constant(a, b, Family::kGaussian, cfg);
    CHECK(c1.c_ab == c2.c_ab);
  }
}

TEST_CASE("closed-form loss evaluator (univariate gaussian/affine)") {
  auto s = gaussian_affine_solution({0.0, 1.0}, {2.0, 3.0});
  CHECK(s.a_star == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(s.b_star == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(s.loss(3.0, 2.0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(s.loss(1.0, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto id = gaussian_affine_solution({1.3, 0.7}, {1.3, 0.7});
  CHECK(id.a_star == 1.0);
  CHECK(id.b_star == 0.0);

  CHECK_THROWS_AS(gaussian_affine_solution({0.0, 0.0}, {1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(s.loss(-1.0, 0.0), std::invalid_argument);

  // coarse grid sanity; the acceptance suite runs the 1e-3 grid
  double best = 1e300, ba = 0.0, bb = 0.0;
  for (double a = 0.1; a <= 5.0; a += 0.01) {
    for (double b = -5.0; b <= 5.0; b += 0.01) {
      const double l = s.loss(a, b);
      if (l < best) { best = l; ba = a; bb = b; }
    }
  }
  CHECK(std::abs(ba - 3.0) <= 0.011);
  CHECK(std::abs(bb - 2.0) <= 0.011);
}

TEST_CASE("lrd_estimate") {
  Rng rng(17);
  SUBCASE("population gaussians with sigma 1 and 2: log 1.25") {
    Dataset a = gaussian_sample_1d(rng, 40000, 0.7, 1.0);
    Dataset b = gaussian_sample_1d(rng, 40000, 0.7, 2.0);
    TrainConfig cfg;
    CHECK(lrd_estimate(a, b, Family::kGaussian, cfg) ==
          doctest::Approx(std::log(1.25)).epsilon(0.03));
  }
  SUBCASE("d(A,A) = 0 and non-negativity across random pairs") {
    TrainConfig cfg;
    for (std::uint64_t s = 0; s < 10; ++s) {
      auto [a, b] = gen_blobs(s, 150);
      CHECK(lrd_estimate(a, a, Family::kGaussian, cfg) <= 1e-6);
      CHECK(lrd_estimate(a, b, Family::kGaussian, cfg) >= -1e-3);
    }
  }
}

TEST_CASE("bound_gap") {
  TrainConfig cfg;
  SUBCASE("identity flow on identical datasets") {
    auto [a, b] = gen_blobs(3, 250);
    FlowSpec spec;
    spec.kind = FlowKind::kAffine;
    spec.dim = 2;
    auto r = bound_gap(a, a, init_identity(spec), Family::kGaussian, cfg);
    CHECK(std::abs(r.gap) <= 1e-6);
    CHECK(std::abs(r.min_loss) <= 1e-6);
    CHECK(std::abs(r.lrd) <= 1e-6);
  }
  SUBCASE("gap stays in [-0.01, 0.05] for gaussian/affine across seeds and flows") {
    Rng rng(23);
    for (std::uint64_t s = 0; s < 8; ++s) {
      Rng data_rng(1000 + s);
      Dataset a = gaussian_sample_1d(data_rng, 400, data_rng.uniform(-2, 2),
                                     data_rng.uniform(0.5, 2.0));
      Dataset b = gaussian_sample_1d(data_rng, 400, data_rng.uniform(-2, 2),
                                     data_rng.uniform(0.5, 2.0));
      const double av = rng.uniform(0.5, 2.0), bv = rng.uniform(-1.0, 1.0);
      FlowParams flow =
          make_affine_flow(Tensor::matrix(1, 1, {av}), Tensor::vector({bv}));
      auto r = bound_gap(a, b, flow, Family::kGaussian, cfg);
      CHECK(r.gap >= -0.01);
      CHECK(r.gap <= 0.05);
      CHECK(r.min_loss + 0.01 >= r.lrd);  // the Theorem bound itself
    }
  }
  SUBCASE("both sides vanish at the analytic optimum (A centered)") {
    Rng rng(5);
    Dataset a = centered(gaussian_sample_1d(rng, 600, 0.4, 1.3));
    Dataset b = gaussian_sample_1d(rng, 600, -0.9, 0.6);
    auto pa = gaussian_mle(a);
    auto pb = gaussian_mle(b);
    auto sol = gaussian_affine_solution({pa.mean[0], pa.scale_tril(0, 0)},
                                        {pb.mean[0], pb.scale_tril(0, 0)});
    FlowParams flow = make_affine_flow(Tensor::matrix(1, 1, {sol.a_star}),
                                       Tensor::vector({sol.b_star}));
    auto r = bound_gap(a, b, flow, Family::kGaussian, cfg);
    CHECK(std::abs(r.min_loss) <= 0.01);
    CHECK(std::abs(r.lrd) <= 0.01);
  }
}

TEST_CASE("train_lrmf on identical datasets stays at zero loss") {
  auto [a, bunused] = gen_blobs(11, 400);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 128;
  cfg.max_iters = 400;
  cfg.full_eval_period = 50;
  cfg.seed = 2;
  FlowSpec spec;
  spec.kind = FlowKind::kAffine;
  auto st = train_lrmf(a, a, Family::kGaussian, spec, cfg);
  CHECK(st.succeeded);
  for (const auto& row : st.trace) {
    if (!std::isnan(row.full_loss)) CHECK(std::abs(row.full_loss) <= 0.02);
  }
  CHECK(std::abs(st.final_loss) <= 0.02);
}

TEST_CASE("train_lrmf aligns the blob pair and matches moments") {
  auto [a, b] = gen_blobs(0, 500);
  TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.batch_size = 128;
  cfg.max_iters = 12000;
  cfg.seed = 0;
  cfg.loss_threshold = 0.05;
  FlowSpec spec;
  spec.kind = FlowKind::kAffine;
  auto st = train_lrmf(a, b, Family::kGaussian, spec, cfg);
  CHECK(st.succeeded);
  CHECK(st.final_loss < 0.05);

  // transformed moments against B's MLE
  auto bm = gaussian_mle(b);
  auto tm = gaussian_mle(Dataset(flow_forward(st.flow, a.x).first));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(std::abs(tm.mean[j] - bm.mean[j]) / std::abs(bm.mean[j]) < 0.05);
  }

  // monotone trace on converged runs: final full loss <= the first recorded one
  double first = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : st.trace) {
    if (!std::isnan(row.full_loss)) {
      first = row.full_loss;
      break;
    }
  }
  CHECK(st.final_loss <= first);
}

TEST_CASE("the inverse-logdet identity holds inside the loss") {
  Rng rng(7);
  FlowSpec spec;
  spec.kind = FlowKind::kCoupling;
  spec.dim = 2;
  spec.blocks = 2;
  spec.hidden = 8;
  FlowParams flow = init_identity(spec, Rng(1));
  for (Tensor* t : param_ptrs(flow))
    for (double& v : t->data()) v += 0.3 * rng.normal();

  auto [a, b] = gen_blobs(2, 300);
  auto [ta, ld_fwd] = flow_forward(flow, a.x);
  auto [back, ld_inv] = flow_inverse_with_logdet(flow, ta);
  const double mean_fwd = detail::sorted_sum(ld_fwd.data()) / 300.0;
  const double mean_inv = detail::sorted_sum(ld_inv.data()) / 300.0;
  CHECK(std::abs(mean_fwd + mean_inv) <= 1e-9);
}

TEST_CASE("jsd identity") {
  SUBCASE("identical gaussians give zero on both sides") {
    auto r = jsd_identity_check({0.3, 1.1}, {0.3, 1.1});
    CHECK(std::abs(r.lhs) <= 1e-12);
    CHECK(std::abs(r.rhs) <= 1e-6);
  }
  SUBCASE("N(0,1) vs N(0,4): both sides equal log 1.25") {
    auto r = jsd_identity_check({0.0, 1.0}, {0.0, 2.0});
    CHECK(r.lhs == doctest::Approx(std::log(1.25)).epsilon(1e-12));
    CHECK(std::abs(r.lhs - r.rhs) <= 1e-3);
  }
  SUBCASE("N(0,1) vs N(3,1): quadrature agrees") {
    auto r = jsd_identity_check({0.0, 1.0}, {3.0, 1.0});
    CHECK(std::abs(r.lhs - r.rhs) <= 1e-3);
  }
}

TEST_CASE("gradient decay simulation (reduced sample)") {
  auto grid = linear_grid(7.0, 16.0, 0.5);
  auto r = gradient_decay_sim(kGradDecayDelta, kGradDecaySigma0, grid, 20000, 3);
  CHECK(r.r2 >= 0.999);
  CHECK(std::abs(r.slope - r.predicted_slope) / r.predicted_slope <= 0.1);
  CHECK(r.dropped == 0);
  CHECK(r.table.size() == grid.size());

  CHECK_THROWS_AS(gradient_decay_sim(1.0, 0.5, {7.0}, 1000, 0), std::invalid_argument);
}
