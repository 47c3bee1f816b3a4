#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cotr/config.hpp"
#include "cotr/errors.hpp"
#include "cotr/geometry.hpp"

namespace cotr {

/// Independent deterministic stream `stream` derived from `seed`.
inline std::mt19937_64 seeded_stream(std::uint64_t seed, std::uint64_t stream = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return std::mt19937_64(z ^ (z >> 31));
}

struct Wave {
  double fx = 0, fy = 0, phase = 0;
  std::array<double, 3> amp{};
};

struct Blob {
  double cx = 0, cy = 0, radius = 0.1;
  std::array<double, 3> color{};
};

/// Low-frequency sinusoids plus compactly supported blobs over the plane.
struct Texture {
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::vector<Wave> waves;
  std::vector<Blob> blobs;

  std::array<double, 3> at(Vec2 p) const {
    std::vector<std::uint32_t> all(blobs.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = std::uint32_t(i);
    return at(p, all);
  }

  /// Color using only the listed blobs (ascending order); blobs left out
  /// must not cover p.
  std::array<double, 3> at(Vec2 p, std::span<const std::uint32_t> blob_ids) const {
    std::array<double, 3> c = base;
    for (const Wave& w : waves) {
      const double s = std::sin(2 * std::numbers::pi * (w.fx * p.x + w.fy * p.y) + w.phase);
      for (int k = 0; k < 3; ++k) c[k] += w.amp[k] * s;
    }
    for (std::uint32_t i : blob_ids) {
      const Blob& b = blobs[i];
      const double dx = p.x - b.cx, dy = p.y - b.cy;
      const double q = 1.0 - (dx * dx + dy * dy) / (b.radius * b.radius);
      if (q <= 0) continue;
      const double wgt = std::min(1.0, 4.0 * q);
      for (int k = 0; k < 3; ++k) c[k] += wgt * (b.color[k] - c[k]);
    }
    for (double& v : c) v = std::clamp(v, 0.0, 1.0);
    return c;
  }
};

namespace detail {

/// Uniform grid over the texture plane listing the blobs that may cover
/// each cell. Points off the grid see every blob.
class BlobGrid {
 public:
  explicit BlobGrid(const Texture& t) : all_(t.blobs.size()), cells_(kCells * kCells) {
    for (std::size_t i = 0; i < all_.size(); ++i) {
      all_[i] = std::uint32_t(i);
      const Blob& b = t.blobs[i];
      const int x0 = cell(b.cx - b.radius), x1 = cell(b.cx + b.radius);
      const int y0 = cell(b.cy - b.radius), y1 = cell(b.cy + b.radius);
      for (int y = std::max(y0, 0); y <= std::min(y1, kCells - 1); ++y)
        for (int x = std::max(x0, 0); x <= std::min(x1, kCells - 1); ++x)
          cells_[std::size_t(y * kCells + x)].push_back(std::uint32_t(i));
    }
  }

  std::span<const std::uint32_t> candidates(Vec2 p) const {
    const int x = cell(p.x), y = cell(p.y);
    if (x < 0 || y < 0 || x >= kCells || y >= kCells) return all_;
    return cells_[std::size_t(y * kCells + x)];
  }

 private:
  static constexpr int kCells = 64;
  static constexpr double kLo = -0.5, kHi = 1.5;
  static int cell(double v) { return int(std::floor((v - kLo) / (kHi - kLo) * kCells)); }

  std::vector<std::uint32_t> all_;
  std::vector<std::vector<std::uint32_t>> cells_;
};

}  // namespace detail

/// One rigid scene layer: a region of image one (the whole plane when the
/// polygon is empty) moving under a homography in normalized coordinates.
struct Layer {
  std::vector<Vec2> polygon;
  Homography motion;
  Texture texture;
};

struct Photometric {
  double contrast = 1;
  double brightness = 0;
  bool identity() const { return contrast == 1 && brightness == 0; }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Layer> layers;  // later layers occlude earlier ones
  Photometric photometric;
};

inline bool point_in_polygon(const std::vector<Vec2>& poly, Vec2 p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

/// Per-layer motions and regions with inverse motions cached.
struct GroundTruthMap {
  std::vector<Layer> layers;
  std::vector<Homography> inverse;

  explicit GroundTruthMap(const SceneSpec& spec) : layers(spec.layers) {
    if (layers.empty()) throw DomainError("scene has no layers");
    for (const Layer& l : layers) {
      const double det = l.motion.determinant();
      if (!(std::abs(det) > 1e-6) || !std::isfinite(det)) throw DomainError("degenerate layer homography");
      inverse.push_back(l.motion.inverse());
    }
  }
  GroundTruthMap() = default;

  bool covers(std::size_t l, Vec2 p) const {
    return layers[l].polygon.empty() || point_in_polygon(layers[l].polygon, p);
  }

  /// Front-most layer owning the image-one point p.
  std::size_t owner_one(Vec2 p) const {
    for (std::size_t l = layers.size(); l-- > 0;)
      if (covers(l, p)) return l;
    return 0;
  }

  /// Front-most layer visible at the image-two point q, or -1 if none.
  int owner_two(Vec2 q) const {
    for (std::size_t l = layers.size(); l-- > 0;) {
      const Vec2 p = inverse[l].apply(q);
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || layers[l].motion.denominator(p) <= 0) continue;
      if (covers(l, p)) return int(l);
    }
    return -1;
  }

  /// Image-two point of the scene content at image-one point q.
  Vec2 inverse_map(Vec2 q) const {
    const int l = owner_two(q);
    return inverse[l < 0 ? 0 : std::size_t(l)].apply(q);
  }
};

struct GroundTruth {
  Vec2 target;
  bool visible = false;
};

/// x' for an image-one point x (both normalized). Invisible when x' leaves
/// the unit square or a layer in front covers it in image two.
inline GroundTruth ground_truth_map(const GroundTruthMap& map, Vec2 x) {
  const std::size_t l = map.owner_one(x);
  const Homography& h = map.layers[l].motion;
  if (h.denominator(x) <= 0) return {{0, 0}, false};
  const Vec2 t = h.apply(x);
  const bool inside = t.x >= 0 && t.x <= 1 && t.y >= 0 && t.y <= 1;
  return {t, inside && map.owner_two(t) == int(l)};
}

struct ScenePair {
  Image first;
  Image second;
  GroundTruthMap map;
};

namespace detail {

inline std::array<double, 3> scene_color(const GroundTruthMap& map, const std::vector<BlobGrid>& grids, Vec2 p,
                                         bool second) {
  std::size_t li = 0;
  if (second) {
    const int l = map.owner_two(p);
    li = l < 0 ? 0 : std::size_t(l);
    p = map.inverse[li].apply(p);
  } else {
    li = map.owner_one(p);
  }
  return map.layers[li].texture.at(p, grids[li].candidates(p));
}

inline Image render(const GroundTruthMap& map, const Photometric& ph, std::size_t w, std::size_t h, bool second) {
  Image img(w, h, 3);
  std::vector<BlobGrid> grids;
  for (const Layer& l : map.layers) grids.emplace_back(l.texture);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const Vec2 p{(double(c) + 0.5) / double(w), (double(r) + 0.5) / double(h)};
      auto col = scene_color(map, grids, p, second);
      if (second && !ph.identity())
        for (double& v : col) v = std::clamp(ph.contrast * (v - 0.5) + 0.5 + ph.brightness, 0.0, 1.0);
      // Quantized to 8 bits so that exported PPMs hold the exact pixels.
      for (std::size_t k = 0; k < 3; ++k) img.at(c, r, k) = float(std::round(col[k] * 255.0) / 255.0);
    }
  return img;
}

}  // namespace detail

/// Renders both views of the scene at width×height pixels.
inline ScenePair generate_scene_pair(const SceneSpec& spec, std::size_t width, std::size_t height) {
  if (width < 64 || height < 64) throw std::invalid_argument("scene size must be at least 64 pixels");
  GroundTruthMap map(spec);
  Image a = detail::render(map, spec.photometric, width, height, false);
  Image b = detail::render(map, spec.photometric, width, height, true);
  return {std::move(a), std::move(b), std::move(map)};
}

inline ScenePair generate_scene_pair(const SceneSpec& spec, std::size_t size) {
  return generate_scene_pair(spec, size, size);
}

/// Knobs for random scene synthesis. Motions are similarity transforms
/// about the image center with a small projective component.
struct SceneOptions {
  std::size_t layers = 1;
  double max_rotation = 0.25;  // radians
  double min_scale = 0.8;
  double max_scale = 1.25;
  double max_translation = 0.15;
  double max_perspective = 0.15;
  double max_contrast = 0.15;
  double max_brightness = 0.08;
  std::size_t waves = 6;
  std::size_t blobs = 160;
};

inline Texture random_texture(std::mt19937_64& rng, const SceneOptions& o) {
  std::uniform_real_distribution<double> u(0, 1);
  Texture t;
  for (double& b : t.base) b = 0.3 + 0.4 * u(rng);
  for (std::size_t i = 0; i < o.waves; ++i) {
    const double f = 1.0 + 7.0 * u(rng), ang = 2 * std::numbers::pi * u(rng);
    Wave w{f * std::cos(ang), f * std::sin(ang), 2 * std::numbers::pi * u(rng), {}};
    for (double& a : w.amp) a = 0.25 * (u(rng) - 0.5);
    t.waves.push_back(w);
  }
  for (std::size_t i = 0; i < o.blobs; ++i) {
    Blob b{-0.3 + 1.6 * u(rng), -0.3 + 1.6 * u(rng), 0.01 + 0.07 * u(rng), {}};
    for (double& c : b.color) c = u(rng);
    t.blobs.push_back(b);
  }
  return t;
}

inline Homography random_motion(std::mt19937_64& rng, const SceneOptions& o) {
  std::uniform_real_distribution<double> u(-1, 1);
  const double s = std::exp(std::log(o.min_scale) + (std::log(o.max_scale) - std::log(o.min_scale)) * (0.5 + 0.5 * u(rng)));
  const double a = o.max_rotation * u(rng);
  const double tx = o.max_translation * u(rng), ty = o.max_translation * u(rng);
  const double px = o.max_perspective * u(rng), py = o.max_perspective * u(rng);
  const Homography to_center = Homography::translation(-0.5, -0.5);
  Homography sim{{s * std::cos(a), -s * std::sin(a), 0, s * std::sin(a), s * std::cos(a), 0, px, py, 1}};
  return Homography::translation(0.5 + tx, 0.5 + ty).compose(sim).compose(to_center);
}

/// Seeded random scene: a background layer and, for layers > 1, convex
/// foreground quadrilaterals with independent motion and texture.
inline SceneSpec random_scene(std::uint64_t seed, const SceneOptions& o = {}) {
  auto rng = seeded_stream(seed, 1);
  std::uniform_real_distribution<double> u(0, 1);
  SceneSpec spec;
  spec.seed = seed;
  for (std::size_t l = 0; l < std::max<std::size_t>(o.layers, 1); ++l) {
    Layer layer;
    layer.texture = random_texture(rng, o);
    layer.motion = random_motion(rng, o);
    if (l > 0) {
      const Vec2 c{0.25 + 0.5 * u(rng), 0.25 + 0.5 * u(rng)};
      const double rx = 0.15 + 0.15 * u(rng), ry = 0.15 + 0.15 * u(rng), rot = std::numbers::pi * u(rng);
      for (int k = 0; k < 4; ++k) {
        const double t = rot + k * std::numbers::pi / 2 + 0.3 * (u(rng) - 0.5);
        layer.polygon.push_back({c.x + rx * std::cos(t), c.y + ry * std::sin(t)});
      }
    }
    spec.layers.push_back(std::move(layer));
  }
  spec.photometric.contrast = 1.0 + o.max_contrast * (2 * u(rng) - 1);
  spec.photometric.brightness = o.max_brightness * (2 * u(rng) - 1);
  return spec;
}

/// Plain-text key-value form; numbers are written with round-trip precision.
inline std::string serialize_scene(const SceneSpec& s) {
  std::ostringstream os;
  os << std::setprecision(17);
  auto list = [&os](auto begin, auto end) {
    for (auto it = begin; it != end; ++it) os << (it == begin ? "" : " ") << *it;
  };
  os << "seed = " << s.seed << "\n";
  os << "contrast = " << s.photometric.contrast << "\nbrightness = " << s.photometric.brightness << "\n";
  os << "layers = " << s.layers.size() << "\n";
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const Layer& L = s.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    os << p << "motion = ";
    list(L.motion.m.begin(), L.motion.m.end());
    os << "\n" << p << "polygon =";
    for (const Vec2& v : L.polygon) os << " " << v.x << " " << v.y;
    os << "\n" << p << "base = ";
    list(L.texture.base.begin(), L.texture.base.end());
    os << "\n";
    for (std::size_t i = 0; i < L.texture.waves.size(); ++i) {
      const Wave& w = L.texture.waves[i];
      os << p << "wave." << i << " = " << w.fx << " " << w.fy << " " << w.phase << " " << w.amp[0] << " "
         << w.amp[1] << " " << w.amp[2] << "\n";
    }
    for (std::size_t i = 0; i < L.texture.blobs.size(); ++i) {
      const Blob& b = L.texture.blobs[i];
      os << p << "blob." << i << " = " << b.cx << " " << b.cy << " " << b.radius << " " << b.color[0] << " "
         << b.color[1] << " " << b.color[2] << "\n";
    }
  }
  return os.str();
}

inline SceneSpec parse_scene(const std::string& text) {
  const KeyValues kv = parse_key_values(text);
  SceneSpec s;
  s.seed = kv.get<std::uint64_t>("seed", 0);
  s.photometric.contrast = kv.get<double>("contrast", 1.0);
  s.photometric.brightness = kv.get<double>("brightness", 0.0);
  const auto n = kv.require<std::size_t>("layers");
  for (std::size_t l = 0; l < n; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    Layer L;
    const auto m = kv.numbers(p + "motion");
    if (m.size() != 9) throw FormatError(p + "motion needs 9 values");
    std::copy(m.begin(), m.end(), L.motion.m.begin());
    const auto poly = kv.numbers(p + "polygon");
    if (poly.size() % 2 != 0 || (!poly.empty() && poly.size() < 6))
      throw FormatError(p + "polygon needs at least 3 x y pairs");
    for (std::size_t i = 0; i < poly.size(); i += 2) L.polygon.push_back({poly[i], poly[i + 1]});
    const auto base = kv.numbers(p + "base");
    if (base.size() != 3) throw FormatError(p + "base needs 3 values");
    std::copy(base.begin(), base.end(), L.texture.base.begin());
    for (std::size_t i = 0; kv.has(p + "wave." + std::to_string(i)); ++i) {
      const auto w = kv.numbers(p + "wave." + std::to_string(i));
      if (w.size() != 6) throw FormatError(p + "wave needs 6 values");
      L.texture.waves.push_back({w[0], w[1], w[2], {w[3], w[4], w[5]}});
    }
    for (std::size_t i = 0; kv.has(p + "blob." + std::to_string(i)); ++i) {
      const auto b = kv.numbers(p + "blob." + std::to_string(i));
      if (b.size() != 6) throw FormatError(p + "blob needs 6 values");
      L.texture.blobs.push_back({b[0], b[1], b[2], {b[3], b[4], b[5]}});
    }
    s.layers.push_back(std::move(L));
  }
  return s;
}

/// Dense ground-truth flow of image one in pixels (image-two pixel grid).
inline std::vector<GroundTruth> ground_truth_grid(const GroundTruthMap& map, std::size_t w, std::size_t h) {
  std::vector<GroundTruth> out(w * h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      out[r * w + c] = ground_truth_map(map, {(double(c) + 0.5) / double(w), (double(r) + 0.5) / double(h)});
  return out;
}

/// Zoom level i of the training sampler: 10^(i/9), i = 0..9.
inline double zoom_level(int i) { return std::pow(10.0, double(i) / 9.0); }

struct TrainSample {
  Image crop_a;
  Image crop_b;
  std::vector<Vec2> queries;  // crop-normalized in crop_a
  std::vector<Vec2> targets;  // crop-normalized in crop_b
  double zoom = 1;
  View view_a;  // crop geometry in the original images; image pointers cleared
  View view_b;
};

struct SamplerOptions {
  std::size_t input_size = 128;
  std::size_t correspondences = 100;
  bool zoom = false;
  std::size_t attempts_per_point = 20;
};

/// Random crop pair around a random visible query. Returns nullopt when the
/// crops share fewer than the requested number of valid correspondences.
inline std::optional<TrainSample> sample_training_crop(const ScenePair& pair, std::uint64_t seed,
                                                       const SamplerOptions& o) {
  auto rng = seeded_stream(seed, 2);
  std::uniform_real_distribution<double> u(0, 1);
  const Image& a = pair.first;
  const Image& b = pair.second;
  const double wa = double(a.width), ha = double(a.height), wb = double(b.width), hb = double(b.height);

  TrainSample s;
  s.zoom = o.zoom ? zoom_level(int(std::uniform_int_distribution<int>(0, 9)(rng))) : 1.0;
  View va = View::full(a), vb = View::full(b);
  if (s.zoom > 1.0) {
    GroundTruth center;
    Vec2 q;
    for (int t = 0; t < 100 && !center.visible; ++t) {
      q = {u(rng), u(rng)};
      center = ground_truth_map(pair.map, q);
    }
    if (!center.visible) return std::nullopt;
    const std::size_t l = pair.map.owner_one(q);
    const double side_a = double(a.long_edge()) / s.zoom;
    const double scale = pair.map.layers[l].motion.local_scale(q);
    va = View::crop(a, CropWindow::centered({q.x * wa, q.y * ha}, side_a, a.width, a.height));
    vb = View::crop(b, CropWindow::centered({center.target.x * wb, center.target.y * hb}, side_a * scale,
                                            b.width, b.height));
  }

  const std::size_t want = o.correspondences;
  for (std::size_t t = 0; t < want * o.attempts_per_point && s.queries.size() < want; ++t) {
    const Vec2 qn{u(rng), u(rng)};
    const Vec2 px = va.to_pixel(qn);
    if (px.x < 0 || px.y < 0 || px.x > wa || px.y > ha) continue;
    const GroundTruth g = ground_truth_map(pair.map, {px.x / wa, px.y / ha});
    if (!g.visible) continue;
    const Vec2 tn = vb.to_normalized({g.target.x * wb, g.target.y * hb});
    if (tn.x < 0 || tn.x > 1 || tn.y < 0 || tn.y > 1) continue;
    s.queries.push_back(qn);
    s.targets.push_back(tn);
  }
  if (s.queries.size() < want) return std::nullopt;
  s.crop_a = render_view(va, o.input_size);
  s.crop_b = render_view(vb, o.input_size);
  s.view_a = va;
  s.view_b = vb;
  s.view_a.image = s.view_b.image = nullptr;
  return s;
}

}  // namespace cotr
