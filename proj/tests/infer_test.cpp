#include <gtest/gtest.h>

#include "cotr/corpus.hpp"
#include "cotr/delaunay.hpp"
#include "cotr/infer.hpp"

namespace cotr {
namespace {

Image noise(std::size_t w, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Image img(w, h, 3);
  for (float& v : img.data) v = u(rng);
  return img;
}

OracleMatcher affine_oracle(const Image& a, const Image& b, double s, Vec2 t) {
  return OracleMatcher(
      a, b, [=](Vec2 p) { return s * p + t; }, [=](Vec2 p) { return (1.0 / s) * (p - t); });
}

/// Ground truth plus an error proportional to the size of view two.
class FractionMatcher : public Matcher {
 public:
  FractionMatcher(const OracleMatcher& o, Vec2 err) : oracle_(o), err_(err) {}
  std::vector<Vec2> match(const View& a, const View& b, std::span<const Vec2> q) const override {
    auto r = oracle_.match(a, b, q);
    for (Vec2& p : r) p = p + err_;
    return r;
  }
  Cycle match_cycle(const View& a, const View& b, std::span<const Vec2> q) const override {
    return oracle_.match_cycle(a, b, q);
  }

 private:
  const OracleMatcher& oracle_;
  Vec2 err_;
};

/// Ground truth shifted alternately by ±amp pixels on successive calls.
class AlternatingMatcher : public Matcher {
 public:
  AlternatingMatcher(const OracleMatcher& o, double amp) : oracle_(o), amp_(amp) {}
  std::vector<Vec2> match(const View& a, const View& b, std::span<const Vec2> q) const override {
    auto r = oracle_.match(a, b, q);
    if (a.image == b.image) return r;
    const double s = (calls_++ % 2 == 0 ? 1.0 : -1.0) * amp_;
    for (Vec2& p : r) p = b.to_normalized(b.to_pixel(p) + Vec2{s, 0});
    return r;
  }
  Cycle match_cycle(const View& a, const View& b, std::span<const Vec2> q) const override {
    return oracle_.match_cycle(a, b, q);
  }
  std::size_t calls() const { return calls_; }

 private:
  const OracleMatcher& oracle_;
  double amp_;
  mutable std::size_t calls_ = 0;
};

/// Every query lands on the same point.
class ConstantMatcher : public Matcher {
 public:
  std::vector<Vec2> match(const View&, const View&, std::span<const Vec2> q) const override {
    return std::vector<Vec2>(q.size(), Vec2{0.5, 0.5});
  }
};

TEST(Crop, RoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-500, 500), s(0.01, 400);
  for (int i = 0; i < 1000; ++i) {
    const CropWindow w = CropWindow::centered({u(rng), u(rng)}, s(rng), 300, 200);
    const Vec2 p{u(rng), u(rng)};
    EXPECT_LE((w.to_pixel(w.to_normalized(p)) - p).norm(), 1e-9);
  }
}

TEST(Crop, ClampedInsideImage) {
  const CropWindow w = CropWindow::centered({5, 195}, 50, 300, 200);
  EXPECT_EQ(w.origin_x, 0);
  EXPECT_EQ(w.origin_y, 150);
  const CropWindow big = CropWindow::centered({5, 5}, 400, 300, 200);
  EXPECT_EQ(big.origin_x, -50);
  EXPECT_EQ(big.origin_y, -100);
  EXPECT_THROW(CropWindow::centered({0, 0}, 0, 10, 10), std::invalid_argument);
}

TEST(Covisibility, IdenticalImages) {
  const Image a = noise(64, 64, 1);
  const OracleMatcher m = affine_oracle(a, a, 1, {0, 0});
  const auto cv = estimate_covisibility_and_scale(a, a, m);
  EXPECT_EQ(cv.count_first, 32u * 32u);
  EXPECT_EQ(cv.count_second, 32u * 32u);
  EXPECT_EQ(cv.side_scale_ratio, 1.0);
}

TEST(Covisibility, CenteredHalfCrop) {
  // Image two shows the central half of image one at the same pixel size.
  const Image a = noise(128, 128, 1), b = noise(128, 128, 2);
  // Predictions stay inside image two, so points outside the crop fail
  // the cycle check.
  auto clamp = [](Vec2 p) { return Vec2{std::clamp(p.x, 0.0, 128.0), std::clamp(p.y, 0.0, 128.0)}; };
  const OracleMatcher m(
      a, b, [=](Vec2 p) { return clamp(2.0 * p - Vec2{64, 64}); },
      [](Vec2 p) { return 0.5 * (p + Vec2{64, 64}); });
  InferOptions o;
  o.tau_visible = 1;
  const auto cv = estimate_covisibility_and_scale(a, b, m, o);
  EXPECT_NEAR(cv.fraction_first(), 0.25, 0.01);
  EXPECT_EQ(cv.fraction_second(), 1.0);
  EXPECT_NEAR(cv.side_scale_ratio, 2.0, 0.03);
}

TEST(Covisibility, ConstantMatcherOnNoiseHasNone) {
  const Image a = noise(64, 64, 1), b = noise(64, 64, 2);
  EXPECT_THROW(estimate_covisibility_and_scale(a, b, ConstantMatcher{}), NoCovisibilityError);
}

TEST(Refine, OracleExactAtEveryStep) {
  const Image a = noise(200, 150, 1), b = noise(180, 160, 2);
  const OracleMatcher m = affine_oracle(a, b, 1.1, {-12, 7});
  const auto cv = estimate_covisibility_and_scale(a, b, m);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ux(0, 200), uy(0, 150);
  for (int i = 0; i < 50; ++i) {
    const Vec2 q{ux(rng), uy(rng)};
    const Vec2 gt = 1.1 * q + Vec2{-12, 7};
    const MatchEstimate e = refine_recursive(q, a, b, m, cv);
    ASSERT_EQ(e.per_step.size(), 5u);
    for (Vec2 p : e.per_step) EXPECT_LE((p - gt).norm(), 1e-9);
    EXPECT_LE(e.oscillation, 1e-12);
    if (gt.x >= 0 && gt.y >= 0 && gt.x <= 180 && gt.y <= 160) {
      EXPECT_TRUE(e.accepted);
      EXPECT_EQ(e.reason, Rejection::kNone);
    }
  }
}

TEST(Refine, ErrorShrinksWithCropSide) {
  const Image a = noise(256, 256, 1), b = noise(256, 256, 2);
  const OracleMatcher o = affine_oracle(a, b, 1, {3, -2});
  const FractionMatcher m(o, {0.01, 0});
  const auto cv = estimate_covisibility_and_scale(a, b, m);
  const Vec2 q{128, 128}, gt{131, 126};
  const MatchEstimate e = refine_recursive(q, a, b, m, cv);
  const double e0 = (e.per_step[0] - gt).norm(), e4 = (e.per_step[4] - gt).norm();
  EXPECT_NEAR(e0, 2.56, 1e-9);
  EXPECT_NEAR(e0 / e4, 16.0, 1e-6);
}

TEST(Refine, OscillationRejected) {
  const Image a = noise(256, 256, 1), b = noise(256, 256, 2);
  const OracleMatcher o = affine_oracle(a, b, 1, {0, 0});
  const AlternatingMatcher m(o, 0.05 * 256);
  const auto cv = estimate_covisibility_and_scale(a, b, o);
  const MatchEstimate e = refine_recursive({128, 128}, a, b, m, cv);
  EXPECT_GT(e.oscillation, 0.02);
  EXPECT_FALSE(e.accepted);
  EXPECT_EQ(e.reason, Rejection::kOscillation);
}

TEST(Refine, QueryOutsideImageRejected) {
  const Image a = noise(64, 64, 1);
  const OracleMatcher m = affine_oracle(a, a, 1, {0, 0});
  const auto cv = estimate_covisibility_and_scale(a, a, m);
  EXPECT_THROW(refine_recursive({-1, 3}, a, a, m, cv), std::invalid_argument);
}

TEST(Refine, ZoomCropsContainPreviousEstimate) {
  const Image a = noise(256, 256, 1), b = noise(256, 256, 2);
  const OracleMatcher o = affine_oracle(a, b, 1, {20, 10});
  const FractionMatcher m(o, {0.02, -0.01});
  const auto cv = estimate_covisibility_and_scale(a, b, o);
  const MatchEstimate e = refine_recursive({100, 140}, a, b, m, cv);
  for (std::size_t t = 1; t < e.per_step.size(); ++t) {
    const double side = 256 / std::pow(2.0, double(t));
    const CropWindow w = CropWindow::centered(e.per_step[t - 1], side, 256, 256);
    const Vec2 u = w.to_normalized(e.per_step[t - 1]);
    EXPECT_NEAR(u.x, 0.5, 1e-12);
    EXPECT_NEAR(u.y, 0.5, 1e-12);
  }
}

TEST(Sparse, OrderAndThreadsDoNotChangeResults) {
  const auto pair = generate_scene_pair(random_scene(3), 128);
  const OracleMatcher m = scene_oracle(pair);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 128);
  std::vector<Vec2> q(40);
  for (Vec2& p : q) p = {u(rng), u(rng)};
  InferOptions o;
  const auto one = match_sparse(q, pair.first, pair.second, m, o);
  o.threads = 4;
  const auto four = match_sparse(q, pair.first, pair.second, m, o);
  ASSERT_EQ(one.size(), q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(one[i].query, q[i]);
    EXPECT_EQ(four[i].query, q[i]);
    EXPECT_EQ(one[i].per_step, four[i].per_step);
    EXPECT_EQ(one[i].cycle_error, four[i].cycle_error);
  }
}

TEST(Sparse, AcceptedSatisfyCycleThreshold) {
  const auto pair = generate_scene_pair(random_scene(8), 128);
  const OracleMatcher o = scene_oracle(pair);
  const FractionMatcher m(o, {0.03, 0.01});
  std::vector<Vec2> q;
  for (double y = 4; y < 128; y += 16)
    for (double x = 4; x < 128; x += 16) q.push_back({x, y});
  for (const MatchEstimate& e : match_sparse(q, pair.first, pair.second, m)) {
    if (e.accepted) EXPECT_LE(e.cycle_error, 5.0 * 128 / 256);
    EXPECT_EQ(e.accepted, e.reason == Rejection::kNone);
  }
}

TEST(Sparse, NoCovisibilityRejectsAll) {
  const Image a = noise(64, 64, 1), b = noise(64, 64, 2);
  const std::vector<Vec2> q{{3, 3}, {30, 40}};
  for (const MatchEstimate& e : match_sparse(q, a, b, ConstantMatcher{})) {
    EXPECT_FALSE(e.accepted);
    EXPECT_EQ(e.reason, Rejection::kNoCovisibility);
  }
}

TEST(Sparse, OracleCycleFilterRejectsNothingVisible) {
  const auto pair = generate_scene_pair(random_scene(12), 128);
  const OracleMatcher m = scene_oracle(pair);
  std::mt19937_64 rng(6);
  const auto lq = labeled_queries(pair, 30, 10, rng);
  std::vector<Vec2> q;
  for (const auto& l : lq) q.push_back(l.query);
  const auto est = match_sparse(q, pair.first, pair.second, m);
  for (std::size_t i = 0; i < lq.size(); ++i)
    if (lq[i].visible) EXPECT_TRUE(est[i].accepted) << i;
}

TEST(Tiling, TileCounts) {
  EXPECT_EQ(tile_count(256, 256), 1u);
  EXPECT_EQ(tile_count(512, 256), 2u);
  EXPECT_EQ(tile_count(400, 300), 2u);
  EXPECT_EQ(tile_count(300, 400), 2u);
  const auto tiles = image_tiles(Image(400, 300, 3));
  ASSERT_EQ(tiles.size(), 2u);
  EXPECT_EQ(tiles[0].origin_x, 0);
  EXPECT_EQ(tiles[1].origin_x, 100);
  EXPECT_EQ(tiles[1].side, 300);
}

TEST(Tiling, OverlapResolvedByCycleError) {
  const Image a = noise(400, 300, 1), b = noise(300, 300, 2);
  const OracleMatcher m = affine_oracle(a, b, 0.75, {0, 0});
  std::vector<Vec2> q{{50, 100}, {200, 150}, {390, 20}};
  const auto est = tile_initial_estimates(q, a, b, m);
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_LE((est[i].target - 0.75 * q[i]).norm(), 1e-9);
    EXPECT_LE(est[i].cycle_error, 1e-9);
  }
}

TEST(Delaunay, AffineFlowIsExact) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  auto flow = [](Vec2 p) { return Vec2{0.3 * p.x - 0.2 * p.y + 40.25, 0.1 * p.x + 0.05 * p.y - 17.5}; };
  std::vector<Vec2> q, t;
  for (int i = 0; i < 200; ++i) {
    const Vec2 p{u(rng) * 160, u(rng) * 120};
    q.push_back(p);
    t.push_back(p + flow(p));
  }
  const auto d = interpolate_delaunay(q, t, 160, 120);
  std::size_t valid = 0;
  for (std::size_t y = 0; y < 120; ++y)
    for (std::size_t x = 0; x < 160; ++x) {
      if (!d.is_valid(x, y)) continue;
      ++valid;
      EXPECT_LE((d.at(x, y) - flow({x + 0.5, y + 0.5})).norm(), 1e-6);
    }
  EXPECT_GT(valid, 160u * 120u / 2);
}

TEST(Delaunay, MatchPixelGetsItsDisplacementAndExteriorIsInvalid) {
  const std::vector<Vec2> q{{10.5, 10.5}, {30.5, 12.5}, {20.5, 30.5}, {25.5, 20.5}};
  const std::vector<Vec2> t{{11, 13}, {29, 10}, {22.25, 33}, {30, 20}};
  const auto d = interpolate_delaunay(q, t, 40, 40);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto x = std::size_t(q[i].x), y = std::size_t(q[i].y);
    ASSERT_TRUE(d.is_valid(x, y));
    EXPECT_EQ(d.at(x, y), t[i] - q[i]);
  }
  EXPECT_FALSE(d.is_valid(0, 0));
  EXPECT_FALSE(d.is_valid(39, 39));
  EXPECT_FALSE(d.is_valid(35, 12));
}

TEST(Delaunay, EmptyCircumcircles) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 100);
  std::vector<Vec2> p(80);
  for (Vec2& x : p) x = {u(rng), u(rng)};
  const auto tris = delaunay(p);
  EXPECT_EQ(tris.size() > 0, true);
  for (const Triangle& t : tris) {
    EXPECT_GT(detail::orient(p[t[0]], p[t[1]], p[t[2]]), 0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (k == t[0] || k == t[1] || k == t[2]) continue;
      EXPECT_FALSE(detail::in_circumcircle(p[t[0]], p[t[1]], p[t[2]], p[k]));
    }
  }
}

TEST(Delaunay, DegenerateInputs) {
  EXPECT_THROW(delaunay({{0, 0}, {1, 1}}), DomainError);
  EXPECT_THROW(delaunay({{0, 0}, {1, 1}, {2, 2}, {3, 3}}), DomainError);
  EXPECT_THROW(delaunay({{0, 0}, {0, 0}, {1, 1}}), DomainError);
}

}  // namespace
}  // namespace cotr
