#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace protoxplain {

using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Single-channel spatial map, indexed (row, col).
using Grid = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when an input does not satisfy a documented precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(std::size_t c, std::size_t h, std::size_t w) {
  return "(" + std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")";
}

/// Dense (channels, height, width) block stored channel-major.
struct Tensor3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  std::size_t size() const { return data.size(); }

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }

  /// (channels, height*width) row-major view.
  Eigen::Map<RowMatrix> matrix() {
    return {data.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(plane())};
  }
  Eigen::Map<const RowMatrix> matrix() const {
    return {data.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(plane())};
  }

  Grid channel(std::size_t c) const {
    Grid g(height, width);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(c * plane()), plane(), g.data());
    return g;
  }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  std::string shape() const { return shape_string(channels, height, width); }
};

inline bool all_finite(const Tensor3& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace protoxplain
