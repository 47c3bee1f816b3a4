#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "cotr/infer.hpp"
#include "cotr/synth.hpp"
#include "cotr/train.hpp"

namespace cotr {

/// 8-bit copy of a rendered image. Rendered pixels are already quantized,
/// so packing is lossless.
struct PackedImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  static PackedImage pack(const Image& img) {
    PackedImage p{img.width, img.height, std::vector<std::uint8_t>(img.data.size())};
    for (std::size_t i = 0; i < img.data.size(); ++i) p.pixels[i] = std::uint8_t(std::lround(img.data[i] * 255.f));
    return p;
  }
  Image unpack() const {
    Image img(width, height, 3);
    for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = float(pixels[i]) / 255.f;
    return img;
  }
};

struct CorpusOptions {
  std::uint64_t seed = 1;
  std::size_t count = 2000;
  std::size_t size = 256;
  SceneOptions scene;
};

inline std::uint64_t scene_seed(std::uint64_t corpus_seed, std::size_t index) {
  return seeded_stream(corpus_seed, 1000 + index)();
}

/// Seeded set of rendered scene pairs kept in 8-bit form.
class SceneCorpus {
 public:
  static SceneCorpus render(const CorpusOptions& o) {
    std::vector<SceneSpec> specs;
    for (std::size_t i = 0; i < o.count; ++i) specs.push_back(random_scene(scene_seed(o.seed, i), o.scene));
    return from_specs(std::move(specs), o.size);
  }

  static SceneCorpus from_specs(std::vector<SceneSpec> specs, std::size_t size) {
    SceneCorpus c;
    for (SceneSpec& spec : specs) {
      ScenePair p = generate_scene_pair(spec, size);
      c.specs_.push_back(std::move(spec));
      c.first_.push_back(PackedImage::pack(p.first));
      c.second_.push_back(PackedImage::pack(p.second));
      c.maps_.push_back(std::move(p.map));
    }
    return c;
  }

  std::size_t size() const { return specs_.size(); }
  std::size_t resolution() const { return first_.empty() ? 0 : first_.front().width; }
  const SceneSpec& spec(std::size_t i) const { return specs_.at(i); }
  ScenePair pair(std::size_t i) const { return {first_.at(i).unpack(), second_.at(i).unpack(), maps_.at(i)}; }

 private:
  std::vector<SceneSpec> specs_;
  std::vector<GroundTruthMap> maps_;
  std::vector<PackedImage> first_;
  std::vector<PackedImage> second_;
};

/// Training samples drawn from random corpus pairs; sample `index` is a
/// pure function of (seed, index).
inline SampleSource corpus_sampler(const SceneCorpus& corpus, std::uint64_t seed, SamplerOptions o = {}) {
  if (corpus.size() == 0) throw std::invalid_argument("empty corpus");
  return [&corpus, seed, o](std::uint64_t index, bool zoom) {
    SamplerOptions so = o;
    so.zoom = zoom;
    auto rng = seeded_stream(seed, index);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t i = std::size_t(rng() % corpus.size());
      if (auto s = sample_training_crop(corpus.pair(i), rng(), so)) return std::move(*s);
    }
    throw DomainError("sampler: no pair yields enough correspondences");
  };
}

/// Pixel-space ground truth of a scene pair as a matcher.
inline OracleMatcher scene_oracle(const ScenePair& p) {
  const double wa = double(p.first.width), ha = double(p.first.height);
  const double wb = double(p.second.width), hb = double(p.second.height);
  const GroundTruthMap* map = &p.map;
  return OracleMatcher(
      p.first, p.second,
      [=](Vec2 x) {
        const Vec2 t = map->layers[map->owner_one({x.x / wa, x.y / ha})].motion.apply({x.x / wa, x.y / ha});
        return Vec2{t.x * wb, t.y * hb};
      },
      [=](Vec2 x) {
        const Vec2 t = map->inverse_map({x.x / wb, x.y / hb});
        return Vec2{t.x * wa, t.y * ha};
      });
}

struct LabeledQuery {
  Vec2 query;   // image-one pixels
  Vec2 target;  // image-two pixels (meaningful when visible)
  bool visible = false;
};

/// Random image-one queries with the requested numbers of visible and
/// ground-truth-invisible points. Fewer are returned if the scene runs out.
inline std::vector<LabeledQuery> labeled_queries(const ScenePair& p, std::size_t visible, std::size_t invisible,
                                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const double wa = double(p.first.width), ha = double(p.first.height);
  const double wb = double(p.second.width), hb = double(p.second.height);
  std::vector<LabeledQuery> vis, inv;
  for (std::size_t t = 0; t < 200 * (visible + invisible) && (vis.size() < visible || inv.size() < invisible); ++t) {
    const Vec2 n{u(rng), u(rng)};
    const GroundTruth g = ground_truth_map(p.map, n);
    LabeledQuery q{{n.x * wa, n.y * ha}, {g.target.x * wb, g.target.y * hb}, g.visible};
    if (g.visible && vis.size() < visible) vis.push_back(q);
    else if (!g.visible && inv.size() < invisible) inv.push_back(q);
  }
  vis.insert(vis.end(), inv.begin(), inv.end());
  return vis;
}

/// Per-query end-point errors at every zoom step on held-out pairs, in
/// pixels of the model-input resolution.
struct ZoomStudy {
  std::vector<std::vector<double>> epe;  // [step][query]
  double coarse_aepe() const;
  double median(std::size_t step) const;
};

inline double ZoomStudy::coarse_aepe() const {
  if (epe.empty() || epe[0].empty()) return 0;
  double s = 0;
  for (double e : epe[0]) s += e;
  return s / double(epe[0].size());
}

inline double ZoomStudy::median(std::size_t step) const {
  std::vector<double> v = epe.at(step);
  if (v.empty()) return 0;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(v.size() / 2), v.end());
  return v[v.size() / 2];
}

/// Runs the full inference on `queries_per_pair` visible queries of each
/// held-out pair. With `coarse_only`, only step 0 is evaluated.
inline ZoomStudy zoom_study(const Matcher& m, const SceneCorpus& corpus, std::size_t queries_per_pair,
                            std::uint64_t seed, std::size_t input_size, const InferOptions& o = {},
                            bool coarse_only = false) {
  ZoomStudy st;
  st.epe.resize(coarse_only ? 1 : o.zoom.steps + 1);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const ScenePair p = corpus.pair(i);
    auto rng = seeded_stream(seed, i);
    const std::vector<LabeledQuery> lq = labeled_queries(p, queries_per_pair, 0, rng);
    if (lq.empty()) continue;
    const double unit = double(input_size) / double(p.second.long_edge());
    std::vector<Vec2> q;
    for (const LabeledQuery& l : lq) q.push_back(l.query);
    if (coarse_only) {
      const std::vector<TiledEstimate> c = tile_initial_estimates(q, p.first, p.second, m);
      for (std::size_t k = 0; k < lq.size(); ++k) st.epe[0].push_back((c[k].target - lq[k].target).norm() * unit);
      continue;
    }
    const std::vector<MatchEstimate> est = match_sparse(q, p.first, p.second, m, o);
    for (std::size_t k = 0; k < lq.size(); ++k) {
      if (est[k].reason == Rejection::kNoCovisibility) continue;
      for (std::size_t s = 0; s < st.epe.size(); ++s)
        st.epe[s].push_back((est[k].per_step[s] - lq[k].target).norm() * unit);
    }
  }
  return st;
}

struct FilterRates {
  std::size_t visible = 0;
  std::size_t invisible = 0;
  std::size_t rejected_visible = 0;
  std::size_t rejected_invisible = 0;

  double visible_rejection() const { return visible ? double(rejected_visible) / double(visible) : 0; }
  double invisible_rejection() const { return invisible ? double(rejected_invisible) / double(invisible) : 0; }
};

/// Rejection rates of match_sparse on pairs queried with a fixed share of
/// ground-truth-invisible points.
inline FilterRates filter_study(const Matcher& m, const SceneCorpus& corpus, std::size_t visible,
                                std::size_t invisible, std::uint64_t seed, const InferOptions& o = {}) {
  FilterRates r;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const ScenePair p = corpus.pair(i);
    auto rng = seeded_stream(seed, i);
    const std::vector<LabeledQuery> lq = labeled_queries(p, visible, invisible, rng);
    if (lq.empty()) continue;
    std::vector<Vec2> q;
    for (const LabeledQuery& l : lq) q.push_back(l.query);
    const std::vector<MatchEstimate> est = match_sparse(q, p.first, p.second, m, o);
    for (std::size_t k = 0; k < lq.size(); ++k) {
      if (lq[k].visible) {
        ++r.visible;
        r.rejected_visible += !est[k].accepted;
      } else {
        ++r.invisible;
        r.rejected_invisible += !est[k].accepted;
      }
    }
  }
  return r;
}

/// Staged training of a fresh model on a corpus.
inline Checkpoint train_on_corpus(const ModelConfig& c, std::uint64_t init_seed, const SceneCorpus& corpus,
                                  std::uint64_t sample_seed, const TrainingOptions& o, SamplerOptions so = {}) {
  so.input_size = c.input_size;
  return run_staged_training(fresh_checkpoint(c, init_seed), corpus_sampler(corpus, sample_seed, so), o);
}

/// Dense ground-truth flow of a scene pair at its rendered resolution.
inline FlowField ground_truth_flow(const ScenePair& p) {
  const std::size_t w = p.first.width, h = p.first.height;
  FlowField f(w, h);
  const std::vector<GroundTruth> g = ground_truth_grid(p.map, w, h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const GroundTruth& t = g[r * w + c];
      if (!t.visible) continue;
      f.set(c, r, float(t.target.x * double(p.second.width) - (double(c) + 0.5)),
            float(t.target.y * double(p.second.height) - (double(r) + 0.5)));
    }
  return f;
}

}  // namespace cotr
