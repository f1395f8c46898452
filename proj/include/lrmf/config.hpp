#pragma once

#include <cstdint>
#include <stdexcept>

namespace lrmf {

// Knobs for every iterative fit: Algorithm-style stopping on the gradient norm
// (grad_threshold, the paper's varepsilon) plus the loss threshold that drives
// the convergence indicator (epsilon).
struct TrainConfig {
  double learning_rate = 1e-3;
  double grad_threshold = 1e-4;
  double loss_threshold = 0.05;
  std::size_t batch_size = 128;
  long max_iters = 5000;
  long private_max_iters = 0;  // cap for the private-model while-loops; 0 = max_iters
  std::uint64_t seed = 0;
  long full_eval_period = 200;
  bool warm_start_shared = true;  // initialize theta_S from theta_B*

  void validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("config: learning_rate must be > 0");
    if (grad_threshold <= 0.0) throw std::invalid_argument("config: grad_threshold must be > 0");
    if (loss_threshold <= 0.0) throw std::invalid_argument("config: loss_threshold must be > 0");
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2");
    if (max_iters < 1) throw std::invalid_argument("config: max_iters must be >= 1");
    if (full_eval_period < 1) throw std::invalid_argument("config: full_eval_period must be >= 1");
  }
};

}  // namespace lrmf
