#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <numbers>
#include <vector>

#include "lrmf/autodiff.hpp"
#include "lrmf/finite_diff.hpp"
#include "lrmf/optim.hpp"
#include "lrmf/rng.hpp"

using namespace lrmf;
namespace ad = lrmf::ad;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

// Keeps relu inputs away from the kink and log/sqrt/div inputs away from zero.
Tensor random_positive(Rng& rng, std::vector<std::size_t> shape, double lo = 0.2, double hi = 2.0) {
  return random_tensor(rng, std::move(shape), lo, hi);
}

double max_rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double scale = 1e-6, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      scale = std::max({scale, std::abs(a[i][k]), std::abs(b[i][k])});
      diff = std::max(diff, std::abs(a[i][k] - b[i][k]));
    }
  }
  return diff / scale;
}

// Compares tape gradients against central differences for a graph builder that
// maps leaves to a scalar root.
void gradcheck(const std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>& build,
               const std::vector<Tensor>& params, double tol = 1e-4) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& p : params) vars.push_back(tape.leaf(p));
  ad::Var root = build(tape, vars);
  auto got = tape.gradients(root, vars);

  auto f = [&](const std::vector<Tensor>& ps) {
    ad::Tape t2;
    std::vector<ad::Var> vs;
    for (const Tensor& p : ps) vs.push_back(t2.leaf(p));
    return build(t2, vs).val().item();
  };
  auto want = finite_diff_grad(f, params, 1e-5);
  CHECK(max_rel_err(got, want) <= tol);
}

}  // namespace

TEST_CASE("grad of x*x at 3 is 6") {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::scalar(3.0));
  auto y = ad::mul(x, x);
  auto g = tape.gradients(y, {x});
  CHECK(g[0].item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("grad of log(sum(exp(x))) at [0,0] is [0.5,0.5]") {
  ad::Tape tape;
  auto x = tape.leaf(Tensor::vector({0.0, 0.0}));
  auto y = ad::logsumexp(x);
  auto g = tape.gradients(y, {x});
  CHECK(g[0][0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g[0][1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.val().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("every primitive matches finite differences over 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor(rng, {3, 4});
    const Tensor b = random_tensor(rng, {3, 4});
    const Tensor pos = random_positive(rng, {3, 4});
    const Tensor posb = random_positive(rng, {3, 4});
    const Tensor row = random_tensor(rng, {4});
    const Tensor colv = random_tensor(rng, {3});
    const Tensor sc = random_positive(rng, {});
    const Tensor w = random_tensor(rng, {3, 4});
    Tensor mask({4});
    for (std::size_t j = 0; j < 4; ++j) mask[j] = (rng.uniform() < 0.5) ? 0.0 : 1.0;
    // relu inputs at least 1e-3 from the kink
    Tensor rel = a;
    for (double& x : rel.data())
      if (std::abs(x) < 1e-3) x = 1e-3;

    auto weighted = [&](ad::Tape&, ad::Var v) { return ad::sum(ad::mul_const(v, w)); };

    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::add(vs[0], vs[1])); }, {a, b});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::add(vs[0], vs[1])); }, {a, row});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::add_cols(vs[0], vs[1])); },
              {a, colv});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::add_scalar(vs[0], vs[1])); },
              {a, sc});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::sub(vs[0], vs[1])); }, {a, b});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::neg(vs[0])); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::mul(vs[0], vs[1])); }, {a, b});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::mul_scalar(vs[0], vs[1])); },
              {a, sc});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::div(vs[0], vs[1])); },
              {a, posb});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::div_scalar(vs[0], vs[1])); },
              {a, sc});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::mul_const(vs[0], w)); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::affine(vs[0], -0.5, 1.7)); },
              {a});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::sum(ad::matmul(vs[0], vs[1])); },
              {random_tensor(rng, {3, 2}), random_tensor(rng, {2, 4})});
    gradcheck(
        [&](ad::Tape&, auto& vs) { return ad::sum(ad::square(ad::transpose(vs[0]))); },
        {random_tensor(rng, {2, 5})});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::sum(vs[0]); }, {a});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::mean(vs[0]); }, {a});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::sum(ad::square(ad::sum_cols(vs[0]))); },
              {a});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::sum(ad::square(ad::sum_rows(vs[0]))); },
              {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::exp(vs[0])); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::log(vs[0])); }, {pos});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::sqrt(vs[0])); }, {pos});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::square(vs[0])); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::tanh(vs[0])); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::relu(vs[0])); }, {rel});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::softplus(vs[0])); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::logaddexp(vs[0], vs[1])); },
              {a, b});
    gradcheck(
        [&](ad::Tape&, auto& vs) { return ad::sum(ad::square(ad::logsumexp_cols(vs[0]))); },
        {a});
    gradcheck([&](ad::Tape&, auto& vs) { return ad::logsumexp(vs[0]); }, {a});
    gradcheck([&](ad::Tape& tt, auto& vs) { return weighted(tt, ad::select(mask, vs[0], vs[1])); },
              {a, b});
    gradcheck(
        [&](ad::Tape&, auto& vs) { return ad::sum(ad::square(ad::diag_embed(vs[0]))); },
        {row});

    // trisolve: well-conditioned lower-triangular factor
    Tensor ltri({3, 3});
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < i; ++j) ltri(i, j) = rng.uniform(-0.5, 0.5);
      ltri(i, i) = rng.uniform(0.8, 1.8);
    }
    const Tensor rhs = random_tensor(rng, {5, 3});
    gradcheck(
        [&](ad::Tape&, auto& vs) {
          return ad::sum(ad::square(ad::trisolve_lower(vs[0], vs[1])));
        },
        {ltri, rhs});

    // logdet on an SPD matrix built inside the graph as L L^T + eps I
    gradcheck(
        [&](ad::Tape& tt, auto& vs) {
          auto m = ad::matmul(vs[0], ad::transpose(vs[0]));
          Tensor reg = Tensor::identity(3);
          for (double& x : reg.data()) x *= 0.3;
          return ad::logdet_psd(ad::add(m, tt.constant(reg)));
        },
        {ltri});
  }
}

TEST_CASE("backward of a sum of independent terms is the sum of backwards") {
  Rng rng(7);
  const Tensor a = random_tensor(rng, {4});
  const Tensor b = random_tensor(rng, {4});

  ad::Tape t1;
  auto x1 = t1.leaf(a);
  auto g1 = t1.gradients(ad::sum(ad::square(x1)), {x1});

  ad::Tape t2;
  auto x2 = t2.leaf(a);
  auto g2 = t2.gradients(ad::sum(ad::mul(x2, t2.leaf(b))), {x2});

  ad::Tape t3;
  auto x3 = t3.leaf(a);
  auto root = ad::add(ad::sum(ad::square(x3)), ad::sum(ad::mul(x3, t3.leaf(b))));
  auto g3 = t3.gradients(root, {x3});

  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(g3[0][k] == doctest::Approx(g1[0][k] + g2[0][k]).epsilon(1e-14));
  }
}

TEST_CASE("replaying the same tape yields bitwise-identical gradients") {
  Rng rng(11);
  ad::Tape tape;
  auto x = tape.leaf(random_tensor(rng, {6, 3}));
  auto w = tape.leaf(random_tensor(rng, {3, 3}));
  auto root = ad::mean(ad::square(ad::tanh(ad::matmul(x, w))));
  auto g1 = tape.gradients(root, {x, w});
  auto g2 = tape.gradients(root, {x, w});
  for (std::size_t i = 0; i < g1.size(); ++i) {
    REQUIRE(g1[i].size() == g2[i].size());
    CHECK(std::memcmp(g1[i].data().data(), g2[i].data().data(),
                      g1[i].size() * sizeof(double)) == 0);
  }
}

TEST_CASE("error paths") {
  SUBCASE("non-scalar root") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor::vector({1.0, 2.0}));
    auto y = ad::square(x);
    CHECK_THROWS_AS((void)tape.gradients(y, {x}), std::invalid_argument);
  }
  SUBCASE("parameter not on tape") {
    ad::Tape t1, t2;
    auto x = t1.leaf(Tensor::scalar(1.0));
    auto other = t2.leaf(Tensor::scalar(1.0));
    auto y = ad::square(x);
    CHECK_THROWS_AS((void)t1.gradients(y, {other}), std::invalid_argument);
  }
  SUBCASE("parameter is not a leaf") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor::scalar(2.0));
    auto y = ad::square(x);
    auto z = ad::sum(y);
    CHECK_THROWS_AS((void)tape.gradients(z, {y}), std::invalid_argument);
  }
  SUBCASE("division by zero is an explicit error") {
    ad::Tape tape;
    auto a = tape.leaf(Tensor::scalar(1.0));
    auto b = tape.leaf(Tensor::scalar(0.0));
    CHECK_THROWS_AS((void)ad::div(a, b), std::runtime_error);
  }
  SUBCASE("log of non-positive value") {
    ad::Tape tape;
    auto a = tape.leaf(Tensor::scalar(-1.0));
    CHECK_THROWS_AS((void)ad::log(a), std::runtime_error);
  }
  SUBCASE("non-finite leaf rejected") {
    ad::Tape tape;
    CHECK_THROWS_AS((void)tape.leaf(Tensor::scalar(std::numeric_limits<double>::infinity())),
                    std::runtime_error);
  }
  SUBCASE("exp overflow surfaces as error") {
    ad::Tape tape;
    auto a = tape.leaf(Tensor::scalar(1000.0));
    CHECK_THROWS_AS((void)ad::exp(a), std::runtime_error);
  }
}

TEST_CASE("adam: zero gradient leaves params unchanged and advances the step") {
  std::vector<Tensor> params = {Tensor::vector({1.0, -2.0})};
  AdamState st(AdamConfig{}, params);
  st.step(params, {Tensor::zeros({2})});
  CHECK(st.step_count() == 1);
  CHECK(params[0][0] == 1.0);
  CHECK(params[0][1] == -2.0);
}

TEST_CASE("adam: bias-corrected first step moves by about lr*sign(g)") {
  AdamConfig cfg;
  cfg.lr = 0.01;
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamState st(cfg, params);
  st.step(params, {Tensor::scalar(3.5)});
  CHECK(params[0].item() == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam: 100 steps on (x-2)^2 lands near the minimizer") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<Tensor> params = {Tensor::scalar(0.0)};
  AdamState st(cfg, params);
  for (int i = 0; i < 100; ++i) {
    const double x = params[0].item();
    st.step(params, {Tensor::scalar(2.0 * (x - 2.0))});
  }
  CHECK(std::abs(params[0].item() - 2.0) < 0.05);
}

TEST_CASE("adam: shape mismatch is an error") {
  std::vector<Tensor> params = {Tensor::vector({1.0, 2.0})};
  AdamState st(AdamConfig{}, params);
  CHECK_THROWS_AS(st.step(params, {Tensor::vector({1.0, 2.0, 3.0})}), std::invalid_argument);
}

TEST_CASE("finite differences: x^3 at 2 and a constant function") {
  auto cube = [](const std::vector<Tensor>& p) { return std::pow(p[0].item(), 3.0); };
  auto g = finite_diff_grad(cube, {Tensor::scalar(2.0)}, 1e-5);
  CHECK(g[0].item() == doctest::Approx(12.0).epsilon(1e-6));

  auto constant = [](const std::vector<Tensor>&) { return 4.2; };
  auto gc = finite_diff_grad(constant, {Tensor::vector({1.0, 2.0, 3.0})});
  for (std::size_t k = 0; k < 3; ++k) CHECK(gc[0][k] == 0.0);
}
