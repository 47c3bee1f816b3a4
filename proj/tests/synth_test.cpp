#include <gtest/gtest.h>

#include "cotr/corpus.hpp"
#include "cotr/synth.hpp"

namespace cotr {
namespace {

SceneSpec single_layer(const Homography& h) {
  SceneSpec s = random_scene(5);
  s.layers.resize(1);
  s.layers[0].motion = h;
  s.photometric = {};
  return s;
}

TEST(Scene, SameSeedSamePixels) {
  const auto a = generate_scene_pair(random_scene(42), 64), b = generate_scene_pair(random_scene(42), 64);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, generate_scene_pair(random_scene(43), 64).first);
}

TEST(Scene, IdentityMotionGivesIdenticalImages) {
  const auto p = generate_scene_pair(single_layer(Homography::identity()), 64);
  EXPECT_EQ(p.first, p.second);
}

TEST(Scene, DegenerateHomographyRejected) {
  SceneSpec s = single_layer(Homography{{1, 2, 0, 2, 4, 0, 0, 0, 1}});
  EXPECT_THROW(generate_scene_pair(s, 64), DomainError);
}

TEST(Scene, TooSmallRejected) { EXPECT_THROW(generate_scene_pair(random_scene(1), 32), std::invalid_argument); }

TEST(Scene, SerializationRoundTrip) {
  SceneOptions o;
  o.layers = 2;
  const SceneSpec s = random_scene(17, o);
  const std::string text = serialize_scene(s);
  const SceneSpec back = parse_scene(text);
  EXPECT_EQ(serialize_scene(back), text);
  EXPECT_EQ(generate_scene_pair(back, 64).second, generate_scene_pair(s, 64).second);
}

TEST(GroundTruth, IdentityIsVisible) {
  const GroundTruthMap m(single_layer(Homography::identity()));
  const auto g = ground_truth_map(m, {0.3, 0.6});
  EXPECT_TRUE(g.visible);
  EXPECT_EQ(g.target, (Vec2{0.3, 0.6}));
}

TEST(GroundTruth, TranslationOutOfFrame) {
  const GroundTruthMap m(single_layer(Homography::translation(0.2, 0)));
  const auto g = ground_truth_map(m, {0.9, 0.5});
  EXPECT_FALSE(g.visible);
  EXPECT_NEAR(g.target.x, 1.1, 1e-15);
  EXPECT_NEAR(g.target.y, 0.5, 1e-15);
  const auto in = ground_truth_map(m, {0.3, 0.5});
  EXPECT_TRUE(in.visible);
  EXPECT_NEAR(in.target.x, 0.5, 1e-15);
}

TEST(GroundTruth, ProjectiveFormula) {
  const Homography h{{2, 0, 0, 0, 2, 0, 0.4, 0.2, 1}};
  const GroundTruthMap m(single_layer(h));
  const auto g = ground_truth_map(m, {0.25, 0.25});
  const double w = 0.4 * 0.25 + 0.2 * 0.25 + 1;
  EXPECT_NEAR(g.target.x, 0.5 / w, 1e-15);
  EXPECT_NEAR(g.target.y, 0.5 / w, 1e-15);
}

TEST(GroundTruth, InverseOnVisiblePoints) {
  SceneOptions o;
  o.layers = 2;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const GroundTruthMap m(random_scene(seed, o));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
      const Vec2 x{u(rng), u(rng)};
      const auto g = ground_truth_map(m, x);
      if (!g.visible) continue;
      EXPECT_LE((m.inverse_map(g.target) - x).norm(), 1e-6);
    }
  }
}

TEST(GroundTruth, OppositeLayersAreDiscontinuous) {
  SceneSpec s = random_scene(3);
  s.layers.resize(1);
  s.layers[0].motion = Homography::translation(0.05, 0);
  Layer fg = s.layers[0];
  fg.motion = Homography::translation(-0.05, 0);
  fg.polygon = {{0.3, 0.3}, {0.7, 0.3}, {0.7, 0.7}, {0.3, 0.7}};
  s.layers.push_back(fg);
  const GroundTruthMap m(s);
  const auto out = ground_truth_map(m, {0.29, 0.5}), in = ground_truth_map(m, {0.31, 0.5});
  EXPECT_NEAR(out.target.x - 0.29, 0.05, 1e-12);
  EXPECT_NEAR(in.target.x - 0.31, -0.05, 1e-12);
}

TEST(Sampler, ZoomLevels) {
  EXPECT_EQ(zoom_level(0), 1.0);
  EXPECT_NEAR(zoom_level(9), 10.0, 1e-12);
  for (int i = 1; i <= 9; ++i) EXPECT_GT(zoom_level(i), zoom_level(i - 1));
}

TEST(Sampler, CorrespondencesAreValid) {
  const auto pair = generate_scene_pair(random_scene(9), 128);
  SamplerOptions o;
  o.input_size = 32;
  for (bool zoom : {false, true}) {
    o.zoom = zoom;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = sample_training_crop(pair, seed, o);
      if (!s) continue;
      ASSERT_EQ(s->queries.size(), 100u);
      for (std::size_t i = 0; i < 100; ++i) {
        const Vec2 pa = s->view_a.to_pixel(s->queries[i]);
        const auto g = ground_truth_map(pair.map, {pa.x / 128, pa.y / 128});
        EXPECT_TRUE(g.visible);
        const Vec2 pb = s->view_b.to_pixel(s->targets[i]);
        EXPECT_NEAR(pb.x, g.target.x * 128, 1e-9);
        EXPECT_NEAR(pb.y, g.target.y * 128, 1e-9);
        EXPECT_GE(s->targets[i].x, 0);
        EXPECT_LE(s->targets[i].x, 1);
      }
    }
  }
}

TEST(Sampler, SkipsPairWithTooFewCovisiblePoints) {
  const auto pair = generate_scene_pair(single_layer(Homography::translation(0.97, 0)), 64);
  EXPECT_FALSE(sample_training_crop(pair, 1, {}).has_value());
}

TEST(Sampler, ZoomCropCenteredOnQuery) {
  // Large enough scene and a zoom level that keeps the crop inside the image.
  const auto pair = generate_scene_pair(single_layer(Homography::identity()), 256);
  SamplerOptions o;
  o.input_size = 32;
  o.zoom = true;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 40 && checked < 5; ++seed) {
    const auto s = sample_training_crop(pair, seed, o);
    if (!s || s->zoom < 2) continue;
    const double side = 256 / s->zoom;
    const Vec2 center{s->view_a.origin_x + side / 2, s->view_a.origin_y + side / 2};
    if (s->view_a.origin_x <= 0 || s->view_a.origin_y <= 0 || s->view_a.origin_x + side >= 256 ||
        s->view_a.origin_y + side >= 256)
      continue;
    EXPECT_NEAR(s->view_a.to_normalized(center).x, 0.5, 1e-12);
    // Identity motion: crop two sits over the same content.
    EXPECT_NEAR(s->view_b.origin_x, s->view_a.origin_x, 1e-9);
    EXPECT_NEAR(s->view_b.origin_y, s->view_a.origin_y, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(Corpus, PackingIsLossless) {
  CorpusOptions o;
  o.count = 2;
  o.size = 64;
  const auto c = SceneCorpus::render(o);
  ASSERT_EQ(c.size(), 2u);
  const auto direct = generate_scene_pair(random_scene(scene_seed(o.seed, 1)), 64);
  EXPECT_EQ(c.pair(1).first, direct.first);
  EXPECT_EQ(c.pair(1).second, direct.second);
}

TEST(Corpus, SamplerIsPureInIndex) {
  CorpusOptions o;
  o.count = 3;
  o.size = 96;
  const auto c = SceneCorpus::render(o);
  SamplerOptions so;
  so.input_size = 32;
  const auto src = corpus_sampler(c, 5, so);
  const auto a = src(7, false), b = src(7, false);
  EXPECT_EQ(a.crop_a, b.crop_a);
  EXPECT_EQ(a.queries, b.queries);
}

}  // namespace
}  // namespace cotr
