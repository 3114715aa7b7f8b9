#pragma once

#include <cstddef>
#include <vector>

namespace edh {

/// Plain row-major matrix of doubles (no graph attached).
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c) {}

  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const {
    return v[static_cast<std::size_t>(i) * cols + j];
  }
  const double* row(int i) const {
    return v.data() + static_cast<std::size_t>(i) * cols;
  }
  double* row(int i) { return v.data() + static_cast<std::size_t>(i) * cols; }
};

}  // namespace edh
