#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "lrmf/dataset.hpp"
#include "lrmf/rng.hpp"
#include "lrmf/tensor.hpp"

namespace lrmf {

// Seeded synthetic datasets. Substream allocation is part of the format:
// blobs/moons draw A from substream(seed, 0) and B from substream(seed, 1);
// mixture1d uses substream(seed, 0). Values are consumed in row order.

// Two 2-D Gaussian clouds. The printed factors W are whitening factors:
// x = mu + W^-1 z with z standard normal, i.e. Sigma = W^-1 W^-T.
inline std::pair<Dataset, Dataset> gen_blobs(std::uint64_t seed, std::size_t n) {
  if (n < 2) throw std::invalid_argument("gen_blobs: n must be >= 2");
  const double mu_a[2] = {1.0, 1.0};
  const double mu_b[2] = {4.0, -2.0};
  const double w_a[2][2] = {{0.5, 0.7}, {-0.5, 0.3}};
  const double w_b[2][2] = {{0.5, 3.0}, {3.0, -2.0}};

  auto draw = [n](Rng rng, const double mu[2], const double w[2][2]) {
    const double det = w[0][0] * w[1][1] - w[0][1] * w[1][0];
    const double winv[2][2] = {{w[1][1] / det, -w[0][1] / det},
                               {-w[1][0] / det, w[0][0] / det}};
    Tensor x({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      const double z0 = rng.normal();
      const double z1 = rng.normal();
      x(i, 0) = mu[0] + winv[0][0] * z0 + winv[0][1] * z1;
      x(i, 1) = mu[1] + winv[1][0] * z0 + winv[1][1] * z1;
    }
    return Dataset(std::move(x));
  };

  Rng root(seed);
  return {draw(root.substream(0), mu_a, w_a), draw(root.substream(1), mu_b, w_b)};
}

// Two interleaved half-circles (radius 1, second moon offset by [1, 0.5]),
// i.i.d. Gaussian coordinate noise, B additionally rotated about its own
// centroid. Labels are moon membership.
inline std::pair<Dataset, Dataset> gen_moons(std::uint64_t seed, std::size_t n,
                                             double rotation_deg, double noise) {
  if (n < 4) throw std::invalid_argument("gen_moons: n must be >= 4");
  const std::size_t n_out = n / 2;
  const std::size_t n_in = n - n_out;

  auto draw = [&](Rng rng, bool rotate) {
    Tensor x({n, 2});
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n_out; ++i) {
      const double t = std::numbers::pi * static_cast<double>(i) /
                       static_cast<double>(n_out > 1 ? n_out - 1 : 1);
      x(i, 0) = std::cos(t);
      x(i, 1) = std::sin(t);
      y[i] = 0;
    }
    for (std::size_t i = 0; i < n_in; ++i) {
      const double t = std::numbers::pi * static_cast<double>(i) /
                       static_cast<double>(n_in > 1 ? n_in - 1 : 1);
      x(n_out + i, 0) = 1.0 - std::cos(t);
      x(n_out + i, 1) = 0.5 - std::sin(t);
      y[n_out + i] = 1;
    }
    if (noise > 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        x(i, 0) += noise * rng.normal();
        x(i, 1) += noise * rng.normal();
      }
    }
    if (rotate) {
      double cx = 0.0, cy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cx += x(i, 0);
        cy += x(i, 1);
      }
      cx /= static_cast<double>(n);
      cy /= static_cast<double>(n);
      const double a = rotation_deg * std::numbers::pi / 180.0;
      const double ca = std::cos(a), sa = std::sin(a);
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = x(i, 0) - cx, dy = x(i, 1) - cy;
        x(i, 0) = cx + ca * dx - sa * dy;
        x(i, 1) = cy + sa * dx + ca * dy;
      }
    }
    return Dataset(std::move(x), std::move(y));
  };

  Rng root(seed);
  return {draw(root.substream(0), false), draw(root.substream(1), true)};
}

// Equal mixture M(mu+delta, mu-delta, sigma0^2): per sample one uniform picks
// the component, one normal draws within it.
inline Dataset gen_mixture1d(std::uint64_t seed, std::size_t n, double mu, double delta,
                             double sigma0) {
  if (n < 2) throw std::invalid_argument("gen_mixture1d: n must be >= 2");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("gen_mixture1d: sigma0 must be positive");
  Rng rng = Rng(seed).substream(0);
  Tensor x({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double center = rng.uniform() < 0.5 ? mu + delta : mu - delta;
    x(i, 0) = center + sigma0 * rng.normal();
  }
  return Dataset(std::move(x));
}

}  // namespace lrmf
