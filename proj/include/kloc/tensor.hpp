#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kloc/errors.hpp"

namespace kloc {

/// Dense row-major float32 tensor. Shapes are small (rank 1-2 in practice);
/// every op in the autodiff layer checks its output for non-finite entries.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  int rows() const;
  int cols() const;

  float& at(int r, int c);
  float at(int r, int c) const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;

  /// Euclidean norm, accumulated in double.
  double norm() const;
};

size_t shape_numel(const std::vector<int>& shape);

}  // namespace kloc
