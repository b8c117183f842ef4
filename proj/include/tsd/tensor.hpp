#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsd {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes disagree. `axis` names the offending dimension
/// (or -1 when the rank itself is wrong).
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& what, int axis)
      : std::invalid_argument(what), axis_(axis) {}
  int axis() const noexcept { return axis_; }

 private:
  int axis_;
};

/// Raised on misuse of a tape: foreign nodes, stale handles, double backward.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major 64-bit tensor. Parameters and differentiable inputs are
/// Tensors with requires_grad set; a Tape accumulates into `grad` on backward.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), values(numel(shape), fill) {
    check_shape();
  }
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    check_shape();
    if (values.size() != numel(shape)) {
      throw DimensionError("tensor values length " + std::to_string(values.size()) +
                               " does not match shape " + shape_str(shape),
                           -1);
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t rank() const noexcept { return shape.size(); }

  Tensor& with_grad(bool on = true) {
    requires_grad = on;
    if (on) {
      grad.assign(values.size(), 0.0);
    } else {
      grad.clear();
    }
    return *this;
  }

  void zero_grad() {
    if (requires_grad) grad.assign(values.size(), 0.0);
  }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    for (double g : grad)
      if (!std::isfinite(g)) return false;
    return true;
  }

 private:
  void check_shape() const {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == 0) {
        throw DimensionError("tensor dimension " + std::to_string(i) + " must be positive",
                             static_cast<int>(i));
      }
    }
  }
};

}  // namespace tsd
