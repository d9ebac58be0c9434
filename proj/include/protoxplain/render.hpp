#pragma once

// Heatmap overlays, Grad-CAM comparison panels and the alpha-sweep plot.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "protoxplain/evalrep.hpp"
#include "protoxplain/image_io.hpp"
#include "protoxplain/tensor.hpp"

namespace protoxplain {

inline constexpr double kOverlayAlpha = 0.4;

/// 8-bit BGR rendering of the first three channels (gray when fewer).
inline cv::Mat render_input(const Tensor3& image) {
  std::vector<cv::Mat> planes;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto src = std::min(c, image.channels - 1);
    planes.push_back(detail::to_u8(image.channel(src)));
  }
  std::swap(planes[0], planes[2]);
  cv::Mat out;
  cv::merge(planes, out);
  return out;
}

inline cv::Mat gray_base(const Tensor3& image) {
  cv::Mat g = detail::to_u8(image.channel(0));
  cv::Mat out;
  cv::cvtColor(g, out, cv::COLOR_GRAY2BGR);
  return out;
}

/// JET-coloured heatmap blended over the first image channel.
inline cv::Mat heatmap_overlay(const Tensor3& image, const Grid& heat) {
  if (heat.rows() != static_cast<Eigen::Index>(image.height) || heat.cols() != static_cast<Eigen::Index>(image.width)) {
    throw ContractError("heatmap " + std::to_string(heat.rows()) + "x" + std::to_string(heat.cols()) +
                        " does not match image " + image.shape());
  }
  cv::Mat colour;
  cv::applyColorMap(detail::to_u8(heat), colour, cv::COLORMAP_JET);
  cv::Mat out;
  cv::addWeighted(gray_base(image), 1.0 - kOverlayAlpha, colour, kOverlayAlpha, 0.0, out);
  return out;
}

/// Mask tinted green over the first image channel; an empty mask gives a blank tile.
inline cv::Mat mask_overlay(const Tensor3& image, const Grid& mask) {
  if (!(mask.sum() > 0.0)) return cv::Mat::zeros(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3);
  cv::Mat base = gray_base(image);
  cv::Mat tint = base.clone();
  tint.setTo(cv::Scalar(0, 255, 0), detail::to_u8(mask));
  cv::Mat out;
  cv::addWeighted(base, 1.0 - kOverlayAlpha, tint, kOverlayAlpha, 0.0, out);
  return out;
}

/// Input | expert mask | one heatmap overlay per model, left to right, each
/// tile scaled by `zoom` with nearest-neighbour sampling.
inline cv::Mat explain_panel(const Tensor3& image, const Grid& mask, const std::vector<Grid>& heatmaps, int zoom = 4) {
  std::vector<cv::Mat> tiles{render_input(image), mask_overlay(image, mask)};
  for (const auto& h : heatmaps) tiles.push_back(heatmap_overlay(image, h));
  const int gap = 2;
  const int tw = static_cast<int>(image.width) * zoom;
  const int th = static_cast<int>(image.height) * zoom;
  cv::Mat panel(th, static_cast<int>(tiles.size()) * (tw + gap) - gap, CV_8UC3, cv::Scalar(255, 255, 255));
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    cv::Mat big;
    cv::resize(tiles[i], big, cv::Size(tw, th), 0, 0, cv::INTER_NEAREST);
    big.copyTo(panel(cv::Rect(static_cast<int>(i) * (tw + gap), 0, tw, th)));
  }
  return panel;
}

/// Accuracy (blue) and alignment Dice (red) against alpha.
inline cv::Mat sweep_plot(const SweepResult& sweep) {
  const int w = 640;
  const int h = 420;
  const int left = 60;
  const int right = 20;
  const int top = 30;
  const int bottom = 50;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  double a_max = 0.0;
  for (const auto& r : sweep.rows) a_max = std::max(a_max, r.alpha);
  if (a_max <= 0.0) a_max = 1.0;
  auto px = [&](double a) { return left + static_cast<int>(std::lround(a / a_max * (w - left - right))); };
  auto py = [&](double v) { return h - bottom - static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * (h - top - bottom))); };

  const cv::Scalar axis(0, 0, 0);
  const cv::Scalar grid(220, 220, 220);
  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  char buf[32];
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    cv::line(img, {left, py(v)}, {w - right, py(v)}, grid, 1);
    std::snprintf(buf, sizeof buf, "%.1f", v);
    cv::putText(img, buf, {left - 35, py(v) + 4}, font, 0.4, axis, 1, cv::LINE_AA);
  }
  cv::line(img, {left, py(0)}, {w - right, py(0)}, axis, 1);
  cv::line(img, {left, py(0)}, {left, py(1)}, axis, 1);
  for (const auto& r : sweep.rows) {
    std::snprintf(buf, sizeof buf, "%g", r.alpha);
    cv::line(img, {px(r.alpha), py(0)}, {px(r.alpha), py(0) + 4}, axis, 1);
    cv::putText(img, buf, {px(r.alpha) - 10, py(0) + 18}, font, 0.4, axis, 1, cv::LINE_AA);
  }
  cv::putText(img, "alpha", {w / 2 - 20, h - 10}, font, 0.5, axis, 1, cv::LINE_AA);

  auto series = [&](auto value, const cv::Scalar& colour) {
    for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
      const cv::Point p{px(sweep.rows[i].alpha), py(value(sweep.rows[i]))};
      cv::circle(img, p, 4, colour, cv::FILLED, cv::LINE_AA);
      if (i > 0) {
        cv::line(img, {px(sweep.rows[i - 1].alpha), py(value(sweep.rows[i - 1]))}, p, colour, 2, cv::LINE_AA);
      }
    }
  };
  const cv::Scalar blue(200, 80, 0);
  const cv::Scalar red(40, 40, 220);
  series([](const SweepRow& r) { return r.accuracy; }, blue);
  series([](const SweepRow& r) { return r.alignment; }, red);
  cv::putText(img, "accuracy", {left + 10, top - 10}, font, 0.5, blue, 1, cv::LINE_AA);
  cv::putText(img, "alignment Dice", {left + 110, top - 10}, font, 0.5, red, 1, cv::LINE_AA);
  return img;
}

inline void write_png(const std::string& path, const cv::Mat& image) { detail::write_mat(path, image); }

}  // namespace protoxplain
