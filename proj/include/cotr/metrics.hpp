#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotr/errors.hpp"

namespace cotr {

/// Dense displacement field (pixels) with a validity mask.
struct FlowField {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> flow;  // H×W×2, interleaved (u, v)
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(std::size_t w, std::size_t h) : width(w), height(h), flow(w * h * 2, 0.f), valid(w * h, 0) {}

  float u(std::size_t x, std::size_t y) const { return flow[2 * (y * width + x)]; }
  float v(std::size_t x, std::size_t y) const { return flow[2 * (y * width + x) + 1]; }
  void set(std::size_t x, std::size_t y, float fu, float fv, bool ok = true) {
    flow[2 * (y * width + x)] = fu;
    flow[2 * (y * width + x) + 1] = fv;
    valid[y * width + x] = ok ? 1 : 0;
  }
  bool is_valid(std::size_t x, std::size_t y) const { return valid[y * width + x] != 0; }
  friend bool operator==(const FlowField&, const FlowField&) = default;
};

namespace detail {

/// End-point errors over pixels valid in both fields, with gt magnitudes.
inline void joint_errors(const FlowField& pred, const FlowField& gt, std::vector<double>& epe,
                         std::vector<double>* mag = nullptr) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw std::invalid_argument("flow dimensions differ: " + std::to_string(pred.width) + "x" +
                                std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                                std::to_string(gt.height));
  for (std::size_t i = 0; i < gt.valid.size(); ++i) {
    if (!pred.valid[i] || !gt.valid[i]) continue;
    const double du = double(pred.flow[2 * i]) - gt.flow[2 * i];
    const double dv = double(pred.flow[2 * i + 1]) - gt.flow[2 * i + 1];
    epe.push_back(std::hypot(du, dv));
    if (mag) mag->push_back(std::hypot(double(gt.flow[2 * i]), double(gt.flow[2 * i + 1])));
  }
  if (epe.empty()) throw DomainError("no pixel is valid in both flows");
}

}  // namespace detail

inline double aepe(const FlowField& pred, const FlowField& gt) {
  std::vector<double> e;
  detail::joint_errors(pred, gt, e);
  double s = 0;
  for (double v : e) s += v;
  return s / double(e.size());
}

/// Fraction of jointly valid pixels with end-point error ≤ threshold.
inline double pck(const FlowField& pred, const FlowField& gt, double threshold_px) {
  if (threshold_px < 0) throw std::invalid_argument("pck threshold must be non-negative");
  std::vector<double> e;
  detail::joint_errors(pred, gt, e);
  std::size_t hits = 0;
  for (double v : e) hits += v <= threshold_px;
  return double(hits) / double(e.size());
}

/// Outlier fraction: EPE > 3 px and EPE > 5% of |gt| (or only EPE > 3 px
/// with `plain`).
inline double fl_ratio(const FlowField& pred, const FlowField& gt, bool plain = false) {
  std::vector<double> e, m;
  detail::joint_errors(pred, gt, e, &m);
  std::size_t out = 0;
  for (std::size_t i = 0; i < e.size(); ++i) out += e[i] > 3.0 && (plain || e[i] > 0.05 * m[i]);
  return double(out) / double(e.size());
}

}  // namespace cotr
