#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <map>
#include <vector>

#include "cotr/errors.hpp"
#include "cotr/geometry.hpp"
#include "cotr/metrics.hpp"

namespace cotr {

using Triangle = std::array<std::size_t, 3>;

namespace detail {

inline double orient(Vec2 a, Vec2 b, Vec2 c) { return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x); }

/// Strictly inside the circumcircle of counter-clockwise (a, b, c).
inline bool in_circumcircle(Vec2 a, Vec2 b, Vec2 c, Vec2 p) {
  const double ax = a.x - p.x, ay = a.y - p.y, bx = b.x - p.x, by = b.y - p.y, cx = c.x - p.x, cy = c.y - p.y;
  const double det = (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay) +
                     (cx * cx + cy * cy) * (ax * by - bx * ay);
  return det > 0;
}

}  // namespace detail

/// Bowyer–Watson triangulation. Triangles index into `pts` and are counter-
/// clockwise. Duplicate points are ignored. Throws DomainError when fewer
/// than three distinct non-collinear points are given.
inline std::vector<Triangle> delaunay(const std::vector<Vec2>& pts) {
  std::vector<std::size_t> ids;
  {
    std::map<std::pair<double, double>, std::size_t> seen;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (seen.emplace(std::pair{pts[i].x, pts[i].y}, i).second) ids.push_back(i);
  }
  bool spread = false;
  for (std::size_t k = 2; k < ids.size() && !spread; ++k)
    spread = std::abs(detail::orient(pts[ids[0]], pts[ids[1]], pts[ids[k]])) > 1e-12;
  if (ids.size() < 3 || !spread) throw DomainError("densification impossible: need 3 non-collinear matches");

  double minx = pts[ids[0]].x, maxx = minx, miny = pts[ids[0]].y, maxy = miny;
  for (auto i : ids) {
    minx = std::min(minx, pts[i].x);
    maxx = std::max(maxx, pts[i].x);
    miny = std::min(miny, pts[i].y);
    maxy = std::max(maxy, pts[i].y);
  }
  const double d = std::max(maxx - minx, maxy - miny) * 20 + 1;
  const double mx = (minx + maxx) / 2, my = (miny + maxy) / 2;
  std::vector<Vec2> v(pts);
  const std::size_t s0 = v.size();
  v.push_back({mx - d, my - d});
  v.push_back({mx + d, my - d});
  v.push_back({mx, my + d});

  std::vector<Triangle> tris{{s0, s0 + 1, s0 + 2}};
  for (auto pi : ids) {
    const Vec2 p = v[pi];
    std::vector<Triangle> keep;
    std::map<std::pair<std::size_t, std::size_t>, int> edges;
    for (const Triangle& t : tris) {
      if (detail::in_circumcircle(v[t[0]], v[t[1]], v[t[2]], p)) {
        for (int e = 0; e < 3; ++e) {
          std::size_t a = t[e], b = t[(e + 1) % 3];
          ++edges[{std::min(a, b), std::max(a, b)}];
        }
      } else {
        keep.push_back(t);
      }
    }
    // Boundary of the cavity: edges used by exactly one removed triangle,
    // re-oriented counter-clockwise around the new point.
    for (const Triangle& t : tris) {
      if (!detail::in_circumcircle(v[t[0]], v[t[1]], v[t[2]], p)) continue;
      for (int e = 0; e < 3; ++e) {
        const std::size_t a = t[e], b = t[(e + 1) % 3];
        if (edges[{std::min(a, b), std::max(a, b)}] == 1) keep.push_back({a, b, pi});
      }
    }
    tris = std::move(keep);
  }
  std::vector<Triangle> out;
  for (const Triangle& t : tris)
    if (t[0] < s0 && t[1] < s0 && t[2] < s0) out.push_back(t);
  return out;
}

/// Per-pixel displacements in double precision with a validity mask.
struct DenseDisplacement {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Vec2> disp;
  std::vector<std::uint8_t> valid;

  DenseDisplacement(std::size_t w, std::size_t h) : width(w), height(h), disp(w * h), valid(w * h, 0) {}
  Vec2 at(std::size_t x, std::size_t y) const { return disp[y * width + x]; }
  bool is_valid(std::size_t x, std::size_t y) const { return valid[y * width + x] != 0; }

  FlowField to_flow() const {
    FlowField f(width, height);
    for (std::size_t i = 0; i < disp.size(); ++i)
      if (valid[i]) f.set(i % width, i / width, float(disp[i].x), float(disp[i].y));
    return f;
  }
};

/// Barycentric interpolation of per-match displacements over the Delaunay
/// triangulation of the query points, evaluated at pixel centers
/// (c + 0.5, r + 0.5). Pixels outside the hull stay invalid.
inline DenseDisplacement interpolate_delaunay(const std::vector<Vec2>& queries, const std::vector<Vec2>& targets,
                                              std::size_t width, std::size_t height) {
  if (queries.size() != targets.size()) throw std::invalid_argument("densify: query/target count mismatch");
  const std::vector<Triangle> tris = delaunay(queries);
  DenseDisplacement f(width, height);
  for (const Triangle& t : tris) {
    const Vec2 a = queries[t[0]], b = queries[t[1]], c = queries[t[2]];
    const double det = detail::orient(a, b, c);
    if (!(std::abs(det) > 0)) continue;
    const Vec2 da = targets[t[0]] - a, db = targets[t[1]] - b, dc = targets[t[2]] - c;
    const double lo_x = std::min({a.x, b.x, c.x}), hi_x = std::max({a.x, b.x, c.x});
    const double lo_y = std::min({a.y, b.y, c.y}), hi_y = std::max({a.y, b.y, c.y});
    const long c0 = std::max(0L, long(std::floor(lo_x - 0.5))), c1 = std::min(long(width) - 1, long(std::ceil(hi_x - 0.5)));
    const long r0 = std::max(0L, long(std::floor(lo_y - 0.5))), r1 = std::min(long(height) - 1, long(std::ceil(hi_y - 0.5)));
    const double tol = -1e-12 * std::abs(det);
    for (long r = r0; r <= r1; ++r) {
      for (long col = c0; col <= c1; ++col) {
        const Vec2 p{double(col) + 0.5, double(r) + 0.5};
        const double wa = detail::orient(b, c, p), wb = detail::orient(c, a, p), wc = detail::orient(a, b, p);
        const double sa = det > 0 ? wa : -wa, sb = det > 0 ? wb : -wb, sc = det > 0 ? wc : -wc;
        if (sa < tol || sb < tol || sc < tol) continue;
        Vec2 d;
        if (p == a) d = da;
        else if (p == b) d = db;
        else if (p == c) d = dc;
        else d = (wa / det) * da + (wb / det) * db + (wc / det) * dc;
        const std::size_t i = std::size_t(r) * width + std::size_t(col);
        f.disp[i] = d;
        f.valid[i] = 1;
      }
    }
  }
  return f;
}

/// Flow field (32-bit) of interpolate_delaunay.
inline FlowField densify_delaunay(const std::vector<Vec2>& queries, const std::vector<Vec2>& targets,
                                  std::size_t width, std::size_t height) {
  return interpolate_delaunay(queries, targets, width, height).to_flow();
}

}  // namespace cotr
