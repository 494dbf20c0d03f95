#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "i2b/errors.hpp"
#include "i2b/rng.hpp"

namespace i2b {

// Dense 64-bit float tensor, row-major. Rank 1 or 2 is all the pipeline
// needs; a rank-1 tensor behaves as a single row wherever a matrix is
// expected. grad is empty until the tensor joins a differentiable pass.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty, or exactly data.size()

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape{rows, cols}, data(rows * cols, fill) {}
  explicit Tensor(std::size_t n, double fill = 0.0) : shape{n}, data(n, fill) {}

  std::size_t rows() const { return shape.empty() ? 0 : (shape.size() == 1 ? 1 : shape[0]); }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
  std::size_t size() const { return data.size(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { grad.assign(data.size(), 0.0); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static Tensor randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Tensor t(rows, cols);
    for (double& v : t.data) v = stddev * rng.normal();
    return t;
  }
};

// Gradient L2 norm over a set of tensors; 0 for tensors with no grad yet.
inline double grad_norm(const std::vector<Tensor*>& tensors) {
  double acc = 0.0;
  for (const Tensor* t : tensors)
    for (double g : t->grad) acc += g * g;
  return std::sqrt(acc);
}

}  // namespace i2b
