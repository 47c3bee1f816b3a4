// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <set>

#include "cotr/cotr.hpp"

using namespace cotr;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig tiny_config(Architecture arch = Architecture::kTransformer) {
  ModelConfig c;
  c.input_size = 32;
  c.d_model = 8;
  c.enc_layers = c.dec_layers = 1;
  c.heads = 2;
  c.head_hidden = c.ffn_hidden = 16;
  c.arch = arch;
  return c;
}

std::string scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cotr_acceptance";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

void gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  bool ok = true;
  for (const GradCheckResult& r : check_all_primitives(7, 10, 1e-4, 1e-4)) {
    worst = std::max(worst, r.max_rel_error);
    ok = ok && r.passed;
  }
  for (Architecture a : {Architecture::kTransformer, Architecture::kMlp}) {
    const double e = check_loss_gradient(tiny_config(a), 11, 1e-4);
    worst = std::max(worst, e);
    ok = ok && e <= 1e-4;
  }
  const double t = seconds_since(t0);
  report(1, ok && t < 120, fmt("max relative error %.3g, %.1f s", worst, t));
}

void query_independence() {
  const ModelConfig c;
  const auto ps = init_params(c, 3);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  auto image = [&] {
    std::vector<float> v(c.input_size * c.input_size * 3);
    for (float& x : v) x = u(rng);
    return Tensor<float>({c.input_size, c.input_size, 3}, std::move(v));
  };
  const auto a = image(), b = image();
  std::vector<Vec2> q(64);
  for (Vec2& p : q) p = {u(rng), u(rng)};
  const auto all = forward_correspondence<float>(q, a, b, ps, c);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto one = forward_correspondence<float>(std::span(&q[i], 1), a, b, ps, c);
    differ += !(one[0].x == all[i].x && one[0].y == all[i].y);
  }
  report(2, differ == 0, fmt("%zu of 64 queries differ from single-query calls", differ));
}

void positional_encoding() {
  struct Example {
    Vec2 p;
    std::size_t n;
    std::size_t offset;
    std::vector<double> want;
  };
  const std::vector<Example> examples{
      {{0, 0}, 8, 0, {0, 0, 1, 1, 0, 0, 1, 1}},
      {{0.5, 1.0}, 4, 0, {1, 0, 0, -1}},
      {{0.25, 0.75}, 8, 4, {1, -1, 0, 0}},
  };
  double worst = 0;
  for (const Example& e : examples) {
    const auto v = positional_encode(e.p, e.n);
    for (std::size_t i = 0; i < e.want.size(); ++i) worst = std::max(worst, std::abs(v[e.offset + i] - e.want[i]));
  }
  bool injective = true;
  for (std::size_t n : {8, 16, 32, 64}) {
    for (std::size_t f : {8, 16}) {
      std::set<std::vector<long long>> seen;
      for (Vec2 p : context_grid(f)) {
        std::vector<long long> key;
        for (double v : positional_encode(p, n)) key.push_back(std::llround(v * 1e9));
        injective = injective && seen.insert(key).second;
      }
    }
  }
  report(3, worst <= 1e-6 && injective,
         fmt("max example error %.3g, injective on grids: %s", worst, injective ? "yes" : "no"));
}

void overfit() {
  const auto t0 = Clock::now();
  const ModelConfig c;
  const ScenePair pair = generate_scene_pair(random_scene(42), 256);
  SamplerOptions so;
  so.correspondences = 100;
  const TrainSample s = *sample_training_crop(pair, 1, so);
  Checkpoint ck = fresh_checkpoint(c, 1);
  AdamHyper hp;
  hp.lr = 1e-4;
  double loss = 0;
  int step = 0;
  for (step = 1; step <= 2000; ++step) {
    loss = train_step({s}, ck.params, ck.opt, c, hp).total;
    if (loss < 1e-4) break;
  }
  const double t = seconds_since(t0);
  report(4, loss < 1e-4 && t < 300, fmt("loss %.3g after %d steps, %.0f s", loss, std::min(step, 2000), t));
}

void densification() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  auto flow = [](Vec2 p) { return Vec2{0.31 * p.x - 0.17 * p.y + 40.25, 0.11 * p.x + 0.05 * p.y - 17.5}; };
  const std::size_t w = 200, h = 150;
  std::vector<Vec2> q, t;
  for (int i = 0; i < 300; ++i) {
    const Vec2 p{u(rng) * double(w), u(rng) * double(h)};
    q.push_back(p);
    t.push_back(p + flow(p));
  }
  const auto d = interpolate_delaunay(q, t, w, h);
  double worst = 0;
  std::size_t interior = 0, wrong_exterior = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 c{double(x) + 0.5, double(y) + 0.5};
      if (d.is_valid(x, y)) {
        ++interior;
        worst = std::max(worst, (d.at(x, y) - flow(c)).norm());
      }
    }
  // A pixel centre is outside the hull when some hull edge has it strictly
  // on the outer side; check every invalid pixel really is outside.
  std::vector<Vec2> hull = q;
  std::sort(hull.begin(), hull.end(), [](Vec2 a, Vec2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Vec2> chain;
  for (int pass = 0; pass < 2; ++pass) {
    const std::size_t base = chain.size();
    for (Vec2 p : hull) {
      while (chain.size() >= base + 2 &&
             detail::orient(chain[chain.size() - 2], chain.back(), p) <= 0)
        chain.pop_back();
      chain.push_back(p);
    }
    chain.pop_back();
    std::reverse(hull.begin(), hull.end());
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 c{double(x) + 0.5, double(y) + 0.5};
      bool inside = true;
      for (std::size_t k = 0; k < chain.size(); ++k)
        inside = inside && detail::orient(chain[k], chain[(k + 1) % chain.size()], c) >= 0;
      wrong_exterior += inside != d.is_valid(x, y);
    }
  report(8, worst <= 1e-6 && wrong_exterior == 0 && interior > 0,
         fmt("max interior error %.3g px over %zu pixels, %zu pixels with wrong validity", worst, interior,
             wrong_exterior));
}

bool same_after_rewrite(const std::string& path, const std::function<void()>& read_and_write_back) {
  const auto before = read_bytes(path);
  read_and_write_back();
  return read_bytes(path) == before;
}

void io_round_trips() {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0, 30);
  FlowField f(9, 7);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 9; ++x) f.set(x, y, n(rng), n(rng), (x * y) % 4 != 1);
  const std::string flo = scratch("f.flo");
  write_flo(f, flo);
  const bool flo_ok = same_after_rewrite(flo, [&] { write_flo(read_flo(flo), flo); }) && read_flo(flo) == f;

  Image rgb(11, 5, 3), gray(4, 6, 1);
  for (float& v : rgb.data) v = float(rng() % 256) / 255.f;
  for (float& v : gray.data) v = float(rng() % 256) / 255.f;
  const std::string ppm = scratch("i.ppm"), pgm = scratch("i.pgm");
  write_image(rgb, ppm);
  write_image(gray, pgm);
  const bool img_ok = same_after_rewrite(ppm, [&] { write_image(read_image(ppm), ppm); }) &&
                      same_after_rewrite(pgm, [&] { write_image(read_image(pgm), pgm); });

  const std::string txt = scratch("c.txt");
  write_correspondences({{{1.5, 2.25}, {100.125, 7}, 0.5}, {{3, 4}, {5, 6}, 0}}, txt);
  const bool txt_ok = same_after_rewrite(txt, [&] { write_correspondences(read_correspondences(txt), txt); });

  const std::string ckpt = scratch("m.ckpt");
  Checkpoint ck = fresh_checkpoint(tiny_config(), 5);
  ck.step = 17;
  save_checkpoint(ck, ckpt);
  const bool ck_ok = same_after_rewrite(ckpt, [&] { save_checkpoint(load_checkpoint(ckpt), ckpt); });

  FlowField one(1, 1);
  one.set(0, 0, 0.25f, -3);
  const std::size_t one_bytes = encode_flo(one).size();
  report(9, flo_ok && img_ok && txt_ok && ck_ok && one_bytes == 20,
         fmt("flo %s, ppm/pgm %s, text %s, checkpoint %s, 1x1 flo %zu bytes", flo_ok ? "ok" : "differs",
             img_ok ? "ok" : "differs", txt_ok ? "ok" : "differs", ck_ok ? "ok" : "differs", one_bytes));
}

void geometry() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-600, 600), s(0.01, 500);
  double crop_worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const CropWindow w = CropWindow::centered({u(rng), u(rng)}, s(rng), 320, 240);
    const Vec2 p{u(rng), u(rng)};
    crop_worst = std::max(crop_worst, (w.to_pixel(w.to_normalized(p)) - p).norm());
  }
  double refine_worst = 0;
  std::size_t visible = 0, rejected = 0;
  CorpusOptions co;
  co.seed = 77;
  co.count = 20;
  const SceneCorpus corpus = SceneCorpus::render(co);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const ScenePair p = corpus.pair(i);
    const OracleMatcher m = scene_oracle(p);
    auto r = seeded_stream(9, i);
    const auto lq = labeled_queries(p, 20, 0, r);
    std::vector<Vec2> q;
    for (const auto& l : lq) q.push_back(l.query);
    const auto est = match_sparse(q, p.first, p.second, m);
    for (std::size_t k = 0; k < lq.size(); ++k) {
      ++visible;
      rejected += !est[k].accepted;
      for (Vec2 e : est[k].per_step) refine_worst = std::max(refine_worst, (e - lq[k].target).norm());
    }
  }
  report(10, crop_worst <= 1e-9 && refine_worst <= 1e-9 && rejected == 0,
         fmt("crop round trip %.3g px, oracle refinement error %.3g px, %zu of %zu visible queries rejected",
             crop_worst, refine_worst, rejected, visible));
}

// Held-out corpora are seeded apart from the training corpora.
constexpr std::uint64_t kTrainSeed = 1;
constexpr std::uint64_t kHeldSeed = 2;
constexpr std::size_t kHeldPairs = 50;
constexpr std::size_t kHeldQueries = 20;

Checkpoint generalization() {
  const auto t0 = Clock::now();
  CorpusOptions co;
  co.seed = kTrainSeed;
  co.count = 2000;
  const SceneCorpus train = SceneCorpus::render(co);
  TrainingOptions o;
  o.log = &std::cerr;
  o.log_every = 1000;
  const ModelConfig c;
  const Checkpoint ck = train_on_corpus(c, 7, train, 11, o);
  const double t = seconds_since(t0);
  CorpusOptions ho = co;
  ho.seed = kHeldSeed;
  ho.count = kHeldPairs;
  const SceneCorpus held = SceneCorpus::render(ho);
  const NetworkMatcher m(Model{ck.config, ck.params});
  const ZoomStudy st = zoom_study(m, held, kHeldQueries, 5, c.input_size);
  const double m0 = st.median(0), m1 = st.median(1), m2 = st.median(2);
  const bool shrinking = m1 < m0 && m2 < m1;
  report(5, st.coarse_aepe() < 8 && shrinking && t < 3600,
         fmt("coarse AEPE %.2f px, median EPE by zoom step %.2f > %.2f > %.2f, training %.0f s", st.coarse_aepe(),
             m0, m1, m2, t));
  return ck;
}

void filtering(const Checkpoint& ck) {
  CorpusOptions ho;
  ho.seed = kHeldSeed + 1;
  ho.count = kHeldPairs;
  const SceneCorpus held = SceneCorpus::render(ho);
  const NetworkMatcher m(Model{ck.config, ck.params});
  const FilterRates r = filter_study(m, held, 14, 6, 9);
  const double share = double(r.invisible) / double(r.visible + r.invisible);
  report(7, r.invisible_rejection() >= 0.9 && r.visible_rejection() <= 0.1,
         fmt("rejected %.1f%% of %zu invisible and %.1f%% of %zu visible queries (invisible share %.2f)",
             100 * r.invisible_rejection(), r.invisible, 100 * r.visible_rejection(), r.visible, share));
}

void ablation() {
  CorpusOptions co;
  co.seed = kTrainSeed + 10;
  co.count = 2000;
  co.scene.layers = 2;
  const SceneCorpus train = SceneCorpus::render(co);
  CorpusOptions ho = co;
  ho.seed = kHeldSeed + 10;
  ho.count = kHeldPairs;
  const SceneCorpus held = SceneCorpus::render(ho);
  TrainingOptions o;
  o.log = &std::cerr;
  o.log_every = 1000;
  double aepe[2] = {0, 0};
  for (Architecture a : {Architecture::kTransformer, Architecture::kMlp}) {
    ModelConfig c;
    c.arch = a;
    const Checkpoint ck = train_on_corpus(c, 7, train, 11, o);
    const NetworkMatcher m(Model{ck.config, ck.params});
    aepe[a == Architecture::kMlp] = zoom_study(m, held, kHeldQueries, 5, c.input_size, {}, true).coarse_aepe();
  }
  report(6, aepe[0] < aepe[1], fmt("coarse AEPE transformer %.2f px, mlp %.2f px", aepe[0], aepe[1]));
}

}  // namespace

int main() {
  gradients();
  query_independence();
  positional_encoding();
  overfit();
  densification();
  io_round_trips();
  geometry();
  const Checkpoint trained = generalization();
  filtering(trained);
  ablation();
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
