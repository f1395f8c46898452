#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "lrmf/tensor.hpp"

namespace lrmf {

// Central-difference gradient, one coordinate at a time. Deliberately
// independent of the tape engine so the two can check each other.
inline std::vector<Tensor> finite_diff_grad(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor> params,
    double h = 1e-5) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor g = Tensor::zeros(params[i].shape());
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double orig = params[i][k];
      params[i][k] = orig + h;
      const double fp = f(params);
      params[i][k] = orig - h;
      const double fm = f(params);
      params[i][k] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("finite_diff_grad: non-finite function value");
      }
      g[k] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace lrmf
