#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flowbridge/errors.hpp"
#include "flowbridge/rng.hpp"

namespace flowbridge {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor of 64-bit floats. `grad`, when allocated, has
// the same length as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}

  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw std::invalid_argument("Tensor: " + std::to_string(data.size()) +
                                  " values for shape " + shape_str(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D accessors; the caller guarantees ndim() == 2
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data[r * shape[1] + c];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() { grad.assign(data.size(), 0.0); }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

  static Tensor randn(Shape s, RngStream& rng) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.next_normal();
    return t;
  }

  static Tensor uniform(Shape s, double lo, double hi, RngStream& rng) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.next_uniform(lo, hi);
    return t;
  }
};

inline void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite values in output of ") + what);
  }
}

}  // namespace flowbridge
