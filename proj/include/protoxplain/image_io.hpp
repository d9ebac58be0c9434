#pragma once

// PNG/PPM reading and writing on top of OpenCV's codecs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "protoxplain/tensor.hpp"

namespace protoxplain {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline cv::Mat read_image(const std::string& path, int flags) {
  if (!std::filesystem::exists(path)) throw IoError("missing file " + path);
  cv::Mat m = cv::imread(path, flags);
  if (m.empty()) throw IoError("cannot decode image " + path);
  return m;
}

inline Grid to_grid(const cv::Mat& plane) {
  cv::Mat f;
  plane.convertTo(f, CV_64F);
  Grid g(f.rows, f.cols);
  for (int y = 0; y < f.rows; ++y) {
    for (int x = 0; x < f.cols; ++x) g(y, x) = f.at<double>(y, x);
  }
  return g;
}

inline cv::Mat to_u8(const Grid& g) {
  cv::Mat m(static_cast<int>(g.rows()), static_cast<int>(g.cols()), CV_8UC1);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      m.at<std::uint8_t>(y, x) = cv::saturate_cast<std::uint8_t>(std::lround(std::clamp(g(y, x), 0.0, 1.0) * 255.0));
    }
  }
  return m;
}

inline void write_mat(const std::string& path, const cv::Mat& m) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  if (!cv::imwrite(path, m)) throw IoError("cannot write image " + path);
}

}  // namespace detail

/// Raw channel planes (0..255 for 8-bit files), colour files in R, G, B order.
inline std::vector<Grid> read_channels(const std::string& path) {
  cv::Mat m = detail::read_image(path, cv::IMREAD_UNCHANGED);
  std::vector<cv::Mat> planes;
  cv::split(m, planes);
  if (planes.size() >= 3) std::swap(planes[0], planes[2]);  // BGR(A) -> RGB(A)
  if (planes.size() == 4) planes.pop_back();
  std::vector<Grid> out;
  for (const auto& p : planes) out.push_back(detail::to_grid(p));
  return out;
}

/// 8-bit single-channel mask, thresholded at 128 to {0,1}.
inline Grid read_mask(const std::string& path) {
  const Grid raw = detail::to_grid(detail::read_image(path, cv::IMREAD_GRAYSCALE));
  return (raw >= 128.0).cast<double>();
}

/// Values in [0,1] scaled by 255 and rounded.
inline void write_gray_png(const std::string& path, const Grid& g) { detail::write_mat(path, detail::to_u8(g)); }

/// Planes in R, G, B order, values in [0,1].
inline void write_rgb_png(const std::string& path, const Grid& r, const Grid& g, const Grid& b) {
  std::vector<cv::Mat> planes{detail::to_u8(b), detail::to_u8(g), detail::to_u8(r)};
  cv::Mat m;
  cv::merge(planes, m);
  detail::write_mat(path, m);
}

}  // namespace protoxplain
