#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lrmf/finite_diff.hpp"
#include "lrmf/flows.hpp"
#include "lrmf/rng.hpp"

using namespace lrmf;
namespace ad = lrmf::ad;

namespace {

Tensor random_batch(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  Tensor x({n, d});
  for (double& v : x.data()) v = scale * rng.normal();
  return x;
}

// Small random perturbation of every trainable tensor, so round-trip and
// logdet checks run on non-trivial flows.
void jitter(FlowParams& p, Rng& rng, double scale) {
  for (Tensor* t : param_ptrs(p)) {
    for (double& v : t->data()) v += scale * rng.normal();
  }
}

FlowSpec coupling_spec(std::size_t d, std::size_t blocks, std::size_t hidden) {
  FlowSpec s;
  s.kind = FlowKind::kCoupling;
  s.dim = d;
  s.blocks = blocks;
  s.hidden = hidden;
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace

TEST_CASE("identity-initialized flows are exactly the identity with zero logdet") {
  Rng rng(5);
  const Tensor x = random_batch(rng, 20, 2, 2.0);

  for (FlowKind kind : {FlowKind::kAffine, FlowKind::kCoupling}) {
    FlowSpec spec = coupling_spec(2, 3, 16);
    spec.kind = kind;
    const FlowParams p = init_identity(spec, Rng(9));
    auto [y, ld] = flow_forward(p, x);
    CHECK(max_abs_diff(y, x) == 0.0);
    for (double v : ld.data()) CHECK(v == 0.0);
  }

  FlowSpec pd = coupling_spec(2, 1, 8);
  pd.kind = FlowKind::kAffine;
  pd.affine_form = AffineForm::kPosDef;
  const FlowParams p = init_identity(pd, Rng(9));
  auto [y, ld] = flow_forward(p, x);
  CHECK(max_abs_diff(y, x) < 1e-7);  // the 1e-8 ridge shifts the map slightly
  for (double v : ld.data()) CHECK(std::abs(v) < 1e-7);
}

TEST_CASE("affine d=1 with a=2,b=3 maps 1 to 5 with logdet log 2") {
  const FlowParams p =
      make_affine_flow(Tensor::matrix(1, 1, {2.0}), Tensor::vector({3.0}));
  Tensor x({1, 1});
  x(0, 0) = 1.0;
  auto [y, ld] = flow_forward(p, x);
  CHECK(y(0, 0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(ld[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor y5({1, 1});
  y5(0, 0) = 5.0;
  CHECK(flow_inverse(p, y5)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("coupling logdet matches the finite-difference Jacobian determinant") {
  Rng rng(21);
  FlowParams p = init_identity(coupling_spec(2, 1, 6), Rng(2));
  jitter(p, rng, 0.4);

  const double h = 1e-6;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_batch(rng, 1, 2);
    auto [y, ld] = flow_forward(p, x);
    // numeric 2x2 Jacobian
    double jac[2][2];
    for (std::size_t j = 0; j < 2; ++j) {
      Tensor xp = x, xm = x;
      xp(0, j) += h;
      xm(0, j) -= h;
      auto yp = flow_forward(p, xp).first;
      auto ym = flow_forward(p, xm).first;
      for (std::size_t i = 0; i < 2; ++i) jac[i][j] = (yp(0, i) - ym(0, i)) / (2.0 * h);
    }
    const double det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    CHECK(std::log(std::abs(det)) == doctest::Approx(ld[0]).epsilon(1e-4));
  }
}

TEST_CASE("round trip and logdet cancellation hold for random flows") {
  Rng rng(33);
  for (int trial = 0; trial < 8; ++trial) {
    FlowParams p = init_identity(coupling_spec(2, 4, 8), Rng(100 + trial));
    jitter(p, rng, 0.3);
    const Tensor x = random_batch(rng, 50, 2);
    auto [y, ld_fwd] = flow_forward(p, x);
    auto [back, ld_inv] = flow_inverse_with_logdet(p, y);
    CHECK(max_abs_diff(back, x) <= 1e-9);
    for (std::size_t r = 0; r < 50; ++r) CHECK(std::abs(ld_fwd[r] + ld_inv[r]) <= 1e-9);
  }

  // affine, both forms
  for (AffineForm form : {AffineForm::kTriangular, AffineForm::kPosDef}) {
    FlowSpec spec;
    spec.kind = FlowKind::kAffine;
    spec.dim = 2;
    spec.affine_form = form;
    FlowParams p = init_identity(spec);
    jitter(p, rng, 0.5);
    const Tensor x = random_batch(rng, 40, 2);
    auto [y, ld_fwd] = flow_forward(p, x);
    auto [back, ld_inv] = flow_inverse_with_logdet(p, y);
    CHECK(max_abs_diff(back, x) <= 1e-9);
    for (std::size_t r = 0; r < 40; ++r) CHECK(std::abs(ld_fwd[r] + ld_inv[r]) <= 1e-9);
  }
}

TEST_CASE("logdet of a stack equals the sum of per-block logdets") {
  Rng rng(44);
  FlowParams stacked = init_identity(coupling_spec(2, 2, 8), Rng(7));
  jitter(stacked, rng, 0.3);

  // split the two blocks into standalone single-block flows
  const auto& c = std::get<CouplingFlowParams>(stacked.v);
  CouplingFlowParams c0{{c.blocks[0]}, c.s_max, c.activation};
  CouplingFlowParams c1{{c.blocks[1]}, c.s_max, c.activation};
  FlowParams f0{c0}, f1{c1};

  const Tensor x = random_batch(rng, 30, 2);
  auto [y_all, ld_all] = flow_forward(stacked, x);
  auto [y0, ld0] = flow_forward(f0, x);
  auto [y1, ld1] = flow_forward(f1, y0);
  CHECK(max_abs_diff(y_all, y1) <= 1e-12);
  for (std::size_t r = 0; r < 30; ++r) {
    CHECK(ld_all[r] == doctest::Approx(ld0[r] + ld1[r]).epsilon(1e-12));
  }
}

TEST_CASE("gradients of y and logdet wrt flow parameters match finite differences") {
  Rng rng(55);
  for (FlowKind kind : {FlowKind::kCoupling, FlowKind::kAffine}) {
    FlowSpec spec = coupling_spec(2, 2, 4);
    spec.kind = kind;
    FlowParams p = init_identity(spec, Rng(8));
    jitter(p, rng, 0.3);
    const Tensor x = random_batch(rng, 6, 2);
    Tensor w({6, 2});
    for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);

    auto value_at = [&](const std::vector<Tensor>& pv) {
      FlowParams q = p;
      auto ptrs = param_ptrs(q);
      for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = pv[i];
      ad::Tape tape;
      auto pvars = bind_params(tape, q);
      auto fw = flow_forward_tape(tape, q, pvars, tape.leaf(x));
      auto root = ad::add(ad::sum(ad::mul_const(fw.y, w)), ad::mean(fw.logdet));
      return root.val().item();
    };

    std::vector<Tensor> pv = param_values(p);
    ad::Tape tape;
    std::vector<ad::Var> pvars;
    for (const Tensor& t : pv) pvars.push_back(tape.leaf(t));
    auto fw = flow_forward_tape(tape, p, pvars, tape.leaf(x));
    auto root = ad::add(ad::sum(ad::mul_const(fw.y, w)), ad::mean(fw.logdet));
    auto got = tape.gradients(root, pvars);

    auto want = finite_diff_grad(value_at, pv, 1e-5);

    double scale = 1e-6, diff = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
      for (std::size_t k = 0; k < got[i].size(); ++k) {
        scale = std::max({scale, std::abs(got[i][k]), std::abs(want[i][k])});
        diff = std::max(diff, std::abs(got[i][k] - want[i][k]));
      }
    }
    CHECK(diff / scale <= 1e-4);
  }
}

TEST_CASE("alternating masks complement each other") {
  const FlowParams p = init_identity(coupling_spec(2, 4, 4), Rng(3));
  const auto& c = std::get<CouplingFlowParams>(p.v);
  for (std::size_t b = 1; b < c.blocks.size(); ++b) {
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(c.blocks[b].mask[j] == 1.0 - c.blocks[b - 1].mask[j]);
    }
  }
}
