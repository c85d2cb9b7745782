#include "kloc/tensor.hpp"

#include <cmath>
#include <sstream>

namespace kloc {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int s : shape) {
    require(s > 0, Error::Kind::Shape, "non-positive dimension in shape");
    n *= static_cast<size_t>(s);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size())
    fail(Error::Kind::Shape,
         "shape/data length mismatch: " + shape_str() + " vs " + std::to_string(data.size()));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  size_t n = shape_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(n, 0.0f);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (float& x : t.data) x = value;
  return t;
}

int Tensor::rows() const {
  require(!shape.empty(), Error::Kind::Shape, "rank-0 tensor has no rows");
  return shape[0];
}

int Tensor::cols() const {
  if (shape.size() == 1) return 1;
  if (shape.size() != 2) [[unlikely]]
    fail(Error::Kind::Shape, "cols() expects rank <= 2, got " + shape_str());
  return shape[1];
}

float& Tensor::at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
float Tensor::at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

bool Tensor::all_finite() const {
  for (float x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

double Tensor::norm() const {
  double s = 0.0;
  for (float x : data) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace kloc
