#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lrmf/tensor.hpp"

namespace lrmf {

// Samples as an (n,d) matrix, with optional integer labels that ride along for
// the 1-NN transfer metric only.
struct Dataset {
  Tensor x;                 // (n,d)
  std::vector<int> labels;  // empty, or one label per row

  Dataset() = default;
  explicit Dataset(Tensor samples, std::vector<int> y = {})
      : x(std::move(samples)), labels(std::move(y)) {
    if (x.rank() != 2) throw std::invalid_argument("Dataset: samples must be (n,d)");
    if (!labels.empty() && labels.size() != x.rows()) {
      throw std::invalid_argument("Dataset: label count does not match row count");
    }
  }

  std::size_t n() const { return x.rank() == 2 ? x.rows() : 0; }
  std::size_t dim() const { return x.rank() == 2 ? x.cols() : 0; }
  bool has_labels() const { return !labels.empty(); }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Tensor out({idx.size(), dim()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < dim(); ++j) out(r, j) = x(idx[r], j);
    }
    std::vector<int> y;
    if (has_labels()) {
      y.reserve(idx.size());
      for (std::size_t i : idx) y.push_back(labels[i]);
    }
    return Dataset(std::move(out), std::move(y));
  }

  Tensor rows(const std::vector<std::size_t>& idx) const {
    Tensor out({idx.size(), dim()});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < dim(); ++j) out(r, j) = x(idx[r], j);
    return out;
  }

  // Canonical row order (lexicographic). Fits that must not depend on the
  // storage order of equal multisets run on the sorted copy.
  Dataset sorted() const {
    std::vector<std::size_t> idx(n());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t d = dim();
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      for (std::size_t j = 0; j < d; ++j) {
        if (x(a, j) != x(b, j)) return x(a, j) < x(b, j);
      }
      return false;
    });
    return subset(idx);
  }
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("concat: dimension mismatch");
  Tensor out({a.n() + b.n(), a.dim()});
  for (std::size_t i = 0; i < a.n(); ++i)
    for (std::size_t j = 0; j < a.dim(); ++j) out(i, j) = a.x(i, j);
  for (std::size_t i = 0; i < b.n(); ++i)
    for (std::size_t j = 0; j < a.dim(); ++j) out(a.n() + i, j) = b.x(i, j);
  std::vector<int> y;
  if (a.has_labels() && b.has_labels()) {
    y = a.labels;
    y.insert(y.end(), b.labels.begin(), b.labels.end());
  }
  return Dataset(std::move(out), std::move(y));
}

}  // namespace lrmf
