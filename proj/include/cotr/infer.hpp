#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <thread>
#include <vector>

#include "cotr/delaunay.hpp"
#include "cotr/errors.hpp"
#include "cotr/geometry.hpp"
#include "cotr/metrics.hpp"
#include "cotr/model.hpp"

namespace cotr {

class NoCovisibilityError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Anything that maps query points between two views. Coordinates are
/// normalized to each view (unit square).
class Matcher {
 public:
  virtual ~Matcher() = default;
  virtual std::vector<Vec2> match(const View& a, const View& b, std::span<const Vec2> queries) const = 0;

  struct Cycle {
    std::vector<Vec2> forward;
    std::vector<Vec2> back;
  };
  /// Forward matches and the reverse matches of those estimates.
  virtual Cycle match_cycle(const View& a, const View& b, std::span<const Vec2> queries) const {
    Cycle c;
    c.forward = match(a, b, queries);
    c.back = match(b, a, c.forward);
    return c;
  }
};

/// Runs the network on both views resampled to the model input size.
class NetworkMatcher : public Matcher {
 public:
  explicit NetworkMatcher(const Model& model) : config_(model.config), params_(with_grad(model.params, false)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }

  std::vector<Vec2> match(const View& a, const View& b, std::span<const Vec2> queries) const override {
    const Tensor<float> fa = features(a), fb = features(b);
    return run(queries, prepare_direction(fa, fb, params_, config_));
  }

  Cycle match_cycle(const View& a, const View& b, std::span<const Vec2> queries) const override {
    const Tensor<float> fa = features(a), fb = features(b);
    Cycle c;
    c.forward = run(queries, prepare_direction(fa, fb, params_, config_));
    c.back = run(c.forward, prepare_direction(fb, fa, params_, config_));
    return c;
  }

 private:
  Tensor<float> features(const View& v) const {
    return backbone(image_tensor<float>(render_view(v, config_.input_size)), params_, config_);
  }
  std::vector<Vec2> run(std::span<const Vec2> queries, const DirectionState<float>& dir) const {
    const Tensor<float> out = predict(points_tensor<float>(queries), dir, params_, config_);
    std::vector<Vec2> r(queries.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = {double(out[2 * i]), double(out[2 * i + 1])};
    return r;
  }

  ModelConfig config_;
  ParamSet<float> params_;
};

/// Exact matcher from known pixel-space maps between two images. Views of
/// `first` are mapped with `to_second`, views of `second` with `to_first`.
class OracleMatcher : public Matcher {
 public:
  using PixelMap = std::function<Vec2(Vec2)>;
  OracleMatcher(const Image& first, const Image& second, PixelMap to_second, PixelMap to_first)
      : first_(&first), second_(&second), to_second_(std::move(to_second)), to_first_(std::move(to_first)) {}

  std::vector<Vec2> match(const View& a, const View& b, std::span<const Vec2> queries) const override {
    const PixelMap* f = nullptr;
    if (a.image == first_ && b.image == second_) f = &to_second_;
    else if (a.image == second_ && b.image == first_) f = &to_first_;
    else if (a.image == b.image) f = nullptr;
    else throw std::invalid_argument("oracle matcher: unknown image");
    std::vector<Vec2> out;
    out.reserve(queries.size());
    for (Vec2 q : queries) {
      const Vec2 p = a.to_pixel(q);
      out.push_back(b.to_normalized(f ? (*f)(p) : p));
    }
    return out;
  }

 private:
  const Image* first_;
  const Image* second_;
  PixelMap to_second_;
  PixelMap to_first_;
};

struct ZoomSchedule {
  double factor = 2;
  std::size_t steps = 4;

  void validate() const {
    if (!(factor > 1)) throw std::invalid_argument("zoom factor must exceed 1");
  }
};

enum class ScaleRule { kArea, kLinear };

/// Thresholds are stated in pixels of a 256-pixel image and scale with the
/// image's long edge; `tau_std` is a fraction of the long edge.
struct InferOptions {
  ZoomSchedule zoom;
  double tau_visible = 5;
  double tau_cycle = 5;
  double tau_std = 0.02;
  std::size_t grid = 32;
  ScaleRule scale_rule = ScaleRule::kArea;
  std::size_t threads = 1;

  void validate() const {
    zoom.validate();
    if (!(tau_visible > 0) || !(tau_cycle > 0) || !(tau_std > 0)) throw std::invalid_argument("thresholds must be positive");
    if (grid == 0) throw std::invalid_argument("covisibility grid must be positive");
    if (threads == 0) throw std::invalid_argument("threads must be positive");
  }
};

enum class Rejection { kNone, kCycle, kOscillation, kNoCovisibility };

inline std::string_view rejection_name(Rejection r) {
  switch (r) {
    case Rejection::kNone: return "none";
    case Rejection::kCycle: return "cycle";
    case Rejection::kOscillation: return "oscillation";
    case Rejection::kNoCovisibility: return "no_covisibility";
  }
  return "unknown";
}

struct MatchEstimate {
  Vec2 query;
  std::vector<Vec2> per_step;
  double cycle_error = 0;
  double oscillation = 0;
  bool accepted = false;
  Rejection reason = Rejection::kNone;

  Vec2 estimate() const { return per_step.empty() ? Vec2{} : per_step.back(); }
};

struct CovisibilityResult {
  std::size_t grid = 0;
  std::vector<std::uint8_t> valid_first;
  std::vector<std::uint8_t> valid_second;
  std::size_t count_first = 0;
  std::size_t count_second = 0;
  double side_scale_ratio = 1;

  double fraction_first() const { return double(count_first) / double(valid_first.size()); }
  double fraction_second() const { return double(count_second) / double(valid_second.size()); }
};

inline double long_edge(const Image& img) { return double(std::max(img.width, img.height)); }

namespace detail {

inline std::vector<Vec2> unit_grid(std::size_t g) {
  std::vector<Vec2> pts;
  pts.reserve(g * g);
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c) pts.push_back({(double(c) + 0.5) / double(g), (double(r) + 0.5) / double(g)});
  return pts;
}

/// Grid points of `a` whose round trip through `b` returns within tau.
inline std::vector<std::uint8_t> cycle_valid(const Matcher& m, const Image& a, const Image& b, std::size_t g,
                                             double tau_px) {
  const View va = View::full(a), vb = View::full(b);
  const std::vector<Vec2> q = unit_grid(g);
  const Matcher::Cycle c = m.match_cycle(va, vb, q);
  std::vector<std::uint8_t> valid(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) valid[i] = (va.to_pixel(c.back[i]) - va.to_pixel(q[i])).norm() <= tau_px;
  return valid;
}

/// RMS distance of the per-step estimates from their mean.
inline double spread(const std::vector<Vec2>& pts) {
  if (pts.empty()) return 0;
  Vec2 mean;
  for (Vec2 p : pts) mean = mean + p;
  mean = (1.0 / double(pts.size())) * mean;
  double ss = 0;
  for (Vec2 p : pts) {
    const Vec2 d = p - mean;
    ss += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(ss / double(pts.size()));
}

}  // namespace detail

/// Cycle-consistency masks on a grid over each image and the crop-side
/// multiplier for image two. Throws NoCovisibilityError when either image
/// has no valid grid point.
inline CovisibilityResult estimate_covisibility_and_scale(const Image& first, const Image& second, const Matcher& m,
                                                          const InferOptions& o = {}) {
  CovisibilityResult r;
  r.grid = o.grid;
  r.valid_first = detail::cycle_valid(m, first, second, o.grid, o.tau_visible * long_edge(first) / 256.0);
  r.valid_second = detail::cycle_valid(m, second, first, o.grid, o.tau_visible * long_edge(second) / 256.0);
  r.count_first = std::size_t(std::count(r.valid_first.begin(), r.valid_first.end(), 1));
  r.count_second = std::size_t(std::count(r.valid_second.begin(), r.valid_second.end(), 1));
  if (r.count_first == 0 || r.count_second == 0) throw NoCovisibilityError("no_covisibility");
  const double ratio = double(r.count_second) / double(r.count_first);
  r.side_scale_ratio = o.scale_rule == ScaleRule::kArea ? std::sqrt(ratio) : ratio;
  return r;
}

/// Side of the image-two crop matching an image-one crop of `side_first`
/// pixels: the covisibility ratio applies to normalized extents, converted
/// to pixels by the images' relative size.
inline double second_side(double side_first, const Image& first, const Image& second, const CovisibilityResult& cv) {
  const double px = std::sqrt(double(second.width * second.height) / double(first.width * first.height));
  return side_first * cv.side_scale_ratio * px;
}

/// Zoom refinement for one query given its coarse (step-0) estimate in
/// image-two pixels. The cycle error is measured on the last crop pair.
inline MatchEstimate refine_from(Vec2 query, Vec2 coarse, const Image& first, const Image& second, const Matcher& m,
                                 const CovisibilityResult& cv, const InferOptions& o) {
  MatchEstimate e;
  e.query = query;
  e.per_step.push_back(coarse);
  View va = View::full(first), vb = View::full(second);
  for (std::size_t t = 1; t <= o.zoom.steps; ++t) {
    const double side_a = long_edge(first) / std::pow(o.zoom.factor, double(t));
    va = View::crop(first, CropWindow::centered(query, side_a, first.width, first.height));
    vb = View::crop(second, CropWindow::centered(e.per_step.back(), second_side(side_a, first, second, cv),
                                                 second.width, second.height));
    const Vec2 q = va.to_normalized(query);
    e.per_step.push_back(vb.to_pixel(m.match(va, vb, std::span(&q, 1)).front()));
  }
  const Vec2 last = vb.to_normalized(e.per_step.back());
  e.cycle_error = (va.to_pixel(m.match(vb, va, std::span(&last, 1)).front()) - query).norm();
  e.oscillation = detail::spread(e.per_step) / long_edge(second);
  if (e.oscillation > o.tau_std) e.reason = Rejection::kOscillation;
  else if (e.cycle_error > o.tau_cycle * long_edge(first) / 256.0) e.reason = Rejection::kCycle;
  e.accepted = e.reason == Rejection::kNone;
  return e;
}

/// Step 0 starts on the full views.
inline MatchEstimate refine_recursive(Vec2 query, const Image& first, const Image& second, const Matcher& m,
                                      const CovisibilityResult& cv, const InferOptions& o = {}) {
  if (!(query.x >= 0 && query.y >= 0 && query.x <= double(first.width) && query.y <= double(first.height)))
    throw std::invalid_argument("query outside image one");
  const View va = View::full(first), vb = View::full(second);
  const Vec2 q = va.to_normalized(query);
  return refine_from(query, vb.to_pixel(m.match(va, vb, std::span(&q, 1)).front()), first, second, m, cv, o);
}

struct TiledEstimate {
  Vec2 target;
  double cycle_error = 0;
};

/// Number of square tiles along the long edge after the short edge is
/// resized to the model input.
inline std::size_t tile_count(std::size_t w, std::size_t h) {
  const std::size_t lo = std::min(w, h), hi = std::max(w, h);
  return (hi + lo - 1) / lo;
}

/// Square tiles of side = short edge spread evenly along the long edge.
inline std::vector<CropWindow> image_tiles(const Image& img) {
  const std::size_t n = tile_count(img.width, img.height);
  const double s = double(std::min(img.width, img.height)), l = long_edge(img);
  const bool wide = img.width >= img.height;
  std::vector<CropWindow> tiles;
  for (std::size_t k = 0; k < n; ++k) {
    const double o = n == 1 ? 0 : double(k) * (l - s) / double(n - 1);
    tiles.push_back({wide ? o : 0, wide ? 0 : o, s, img.width, img.height});
  }
  return tiles;
}

/// Coarse estimates (image-two pixels) for every query. Each query goes to
/// every tile that covers it; the lowest cycle error wins.
inline std::vector<TiledEstimate> tile_initial_estimates(std::span<const Vec2> queries, const Image& first,
                                                         const Image& second, const Matcher& m) {
  const View vb = View::full(second);
  std::vector<TiledEstimate> best(queries.size(), {{}, std::numeric_limits<double>::infinity()});
  for (const CropWindow& tile : image_tiles(first)) {
    const View va = View::crop(first, tile);
    std::vector<std::size_t> idx;
    std::vector<Vec2> local;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const Vec2 u = va.to_normalized(queries[i]);
      if (u.x >= 0 && u.x <= 1 && u.y >= 0 && u.y <= 1) {
        idx.push_back(i);
        local.push_back(u);
      }
    }
    if (idx.empty()) continue;
    const Matcher::Cycle c = m.match_cycle(va, vb, local);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double err = (va.to_pixel(c.back[j]) - queries[idx[j]]).norm();
      if (err < best[idx[j]].cycle_error) best[idx[j]] = {vb.to_pixel(c.forward[j]), err};
    }
  }
  return best;
}

/// Covisibility once, tiled coarse estimates, then per-query zoom
/// refinement. Results follow the input order for any thread count.
inline std::vector<MatchEstimate> match_sparse(std::span<const Vec2> queries, const Image& first, const Image& second,
                                               const Matcher& m, const InferOptions& o = {}) {
  o.validate();
  if (queries.empty()) throw std::invalid_argument("match_sparse: no queries");
  for (Vec2 q : queries)
    if (!(q.x >= 0 && q.y >= 0 && q.x <= double(first.width) && q.y <= double(first.height)))
      throw std::invalid_argument("query outside image one");
  std::vector<MatchEstimate> out(queries.size());
  CovisibilityResult cv;
  try {
    cv = estimate_covisibility_and_scale(first, second, m, o);
  } catch (const NoCovisibilityError&) {
    for (std::size_t i = 0; i < queries.size(); ++i) {
      out[i].query = queries[i];
      out[i].reason = Rejection::kNoCovisibility;
    }
    return out;
  }
  const std::vector<TiledEstimate> coarse = tile_initial_estimates(queries, first, second, m);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < queries.size(); i = next++)
      out[i] = refine_from(queries[i], coarse[i].target, first, second, m, cv, o);
  };
  const std::size_t n = std::min(o.threads, queries.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  return out;
}

inline std::vector<Vec2> pixel_grid_queries(std::size_t w, std::size_t h, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("query stride must be positive");
  std::vector<Vec2> q;
  for (std::size_t r = stride / 2; r < h; r += stride)
    for (std::size_t c = stride / 2; c < w; c += stride) q.push_back({double(c) + 0.5, double(r) + 0.5});
  return q;
}

/// Flow of image one: sparse grid queries densified by Delaunay
/// interpolation, or with stride 1 and `query_every_pixel` a direct answer
/// for every pixel.
inline FlowField match_dense(const Image& first, const Image& second, const Matcher& m, const InferOptions& o,
                             std::size_t stride, bool query_every_pixel = false) {
  const std::vector<Vec2> q = pixel_grid_queries(first.width, first.height, query_every_pixel ? 1 : stride);
  const std::vector<MatchEstimate> est = match_sparse(q, first, second, m, o);
  if (!est.empty() && est.front().reason == Rejection::kNoCovisibility) throw NoCovisibilityError("no_covisibility");
  if (query_every_pixel) {
    FlowField f(first.width, first.height);
    for (const MatchEstimate& e : est) {
      if (!e.accepted) continue;
      const Vec2 d = e.estimate() - e.query;
      f.set(std::size_t(e.query.x), std::size_t(e.query.y), float(d.x), float(d.y));
    }
    return f;
  }
  std::vector<Vec2> src, dst;
  for (const MatchEstimate& e : est)
    if (e.accepted) {
      src.push_back(e.query);
      dst.push_back(e.estimate());
    }
  return densify_delaunay(src, dst, first.width, first.height);
}

}  // namespace cotr
