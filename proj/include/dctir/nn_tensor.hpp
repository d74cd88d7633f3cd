#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dctir/error.hpp"

namespace dctir {

/// Dense row-major tensor with up to 4 axes. The gradient buffer is empty
/// until something asks for it.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    require(shape.size() <= 4, ErrorCode::ShapeMismatch, "tensor rank above 4");
    for (int d : shape) require(d >= 0, ErrorCode::ShapeMismatch, "negative tensor dimension");
    data.assign(count(shape), fill);
  }

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
  void zero_grad() { grad.assign(data.size(), 0.0); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<int>& want, const char* what) {
  require(t.shape == want, ErrorCode::ShapeMismatch,
          std::string(what) + ": expected " + shape_string(want) + ", got " + shape_string(t.shape));
}

}  // namespace dctir
