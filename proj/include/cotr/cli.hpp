#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cotr/config.hpp"
#include "cotr/corpus.hpp"
#include "cotr/gradcheck.hpp"
#include "cotr/io.hpp"

namespace cotr::cli {

/// Log verbosity from COTR_LOG: 0 quiet, 1 progress (default), 2 debug.
inline int log_level() {
  const char* v = std::getenv("COTR_LOG");
  if (!v || !*v) return 1;
  return std::atoi(v);
}

inline std::ostream& log() {
  static std::ostream null(nullptr);
  return log_level() >= 1 ? std::cerr : null;
}

struct ModelFlags {
  ModelConfig config;
  std::string arch = "transformer";
  std::string pos = "linear";

  void add(CLI::App& app) {
    app.add_option("--input-size", config.input_size, "Model input side S")->capture_default_str();
    app.add_option("--d-model", config.d_model, "Feature width")->capture_default_str();
    app.add_option("--enc-layers", config.enc_layers, "Encoder layers")->capture_default_str();
    app.add_option("--dec-layers", config.dec_layers, "Decoder layers")->capture_default_str();
    app.add_option("--heads", config.heads, "Attention heads")->capture_default_str();
    app.add_option("--head-hidden", config.head_hidden, "Coordinate head width")->capture_default_str();
    app.add_option("--ffn-hidden", config.ffn_hidden, "Feed-forward width")->capture_default_str();
    app.add_option("--arch", arch, "transformer or mlp")
        ->check(CLI::IsMember({"transformer", "mlp"}))
        ->capture_default_str();
    app.add_option("--pos-encoding", pos, "linear or loglinear")
        ->check(CLI::IsMember({"linear", "loglinear"}))
        ->capture_default_str();
  }
  ModelConfig resolve() const {
    ModelConfig c = config;
    c.arch = arch == "mlp" ? Architecture::kMlp : Architecture::kTransformer;
    c.pos_mode = pos == "loglinear" ? PosEncoding::kLogLinear : PosEncoding::kLinear;
    c.validate();
    return c;
  }
};

struct ScheduleFlags {
  StageSchedule schedule;
  std::size_t correspondences = 100;
  std::uint64_t log_every = 50;

  void add(CLI::App& app) {
    app.add_option("--stage1", schedule.stage1, "Stage 1 steps (frozen backbone)")->capture_default_str();
    app.add_option("--stage2", schedule.stage2, "Stage 2 steps (all parameters)")->capture_default_str();
    app.add_option("--stage3", schedule.stage3, "Stage 3 steps (zoom-in crops)")->capture_default_str();
    app.add_option("--lr1", schedule.lr1, "Stage 1 learning rate")->capture_default_str();
    app.add_option("--lr2", schedule.lr2, "Stage 2 learning rate")->capture_default_str();
    app.add_option("--lr3", schedule.lr3, "Stage 3 learning rate")->capture_default_str();
    app.add_option("--batch", schedule.batch, "Pairs per step")->capture_default_str();
    app.add_option("--correspondences", correspondences, "Correspondences per pair")->capture_default_str();
    app.add_option("--log-every", log_every, "Steps per loss log line")->capture_default_str();
  }
};

struct InferFlags {
  InferOptions options;
  std::string scale_rule = "area";

  void add(CLI::App& app) {
    app.add_option("--zoom-factor", options.zoom.factor, "Crop shrink per zoom step")->capture_default_str();
    app.add_option("--zoom-steps", options.zoom.steps, "Zoom steps")->capture_default_str();
    app.add_option("--tau-visible", options.tau_visible, "Covisibility cycle threshold (px at 256)")
        ->capture_default_str();
    app.add_option("--tau-cycle", options.tau_cycle, "Cycle rejection threshold (px at 256)")->capture_default_str();
    app.add_option("--tau-std", options.tau_std, "Oscillation threshold (fraction of long edge)")
        ->capture_default_str();
    app.add_option("--grid", options.grid, "Covisibility grid side")->capture_default_str();
    app.add_option("--scale-rule", scale_rule, "Covisibility ratio read as area or linear")
        ->check(CLI::IsMember({"area", "linear"}))
        ->capture_default_str();
  }
  InferOptions resolve(std::size_t threads) const {
    InferOptions o = options;
    o.scale_rule = scale_rule == "linear" ? ScaleRule::kLinear : ScaleRule::kArea;
    o.threads = threads;
    o.validate();
    return o;
  }
};

inline std::string pair_stem(const std::string& dir, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return (std::filesystem::path(dir) / buf).string();
}

/// Scenes written by gen-data, in file-name order.
inline std::vector<SceneSpec> load_scenes(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".scene") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DomainError("no .scene files in " + dir);
  std::vector<SceneSpec> specs;
  for (const std::string& f : files) {
    const std::vector<std::uint8_t> b = read_bytes(f);
    specs.push_back(parse_scene(std::string(b.begin(), b.end())));
  }
  return specs;
}

inline std::vector<Vec2> read_query_points(const std::string& path) {
  const std::vector<std::uint8_t> b = read_bytes(path);
  std::istringstream in(std::string(b.begin(), b.end()));
  std::vector<Vec2> q;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    std::istringstream ls(line);
    Vec2 p;
    std::string extra;
    if (!(ls >> p.x >> p.y) || (ls >> extra)) throw FormatError(path + ": line " + std::to_string(n) + ": expected 'x y'");
    q.push_back(p);
  }
  return q;
}

inline Model load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  return {ck.config, ck.params};
}

/// Inserts "--key value" pairs from the --config file right after the
/// subcommand so that flags given on the command line (parsed later, last
/// value wins) override them.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args,
                                              const std::vector<std::string>& subcommands) {
  std::vector<std::string> out;
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty() || rest.empty()) return rest;
  const std::vector<std::uint8_t> b = read_bytes(path);
  const KeyValues kv = parse_key_values(std::string(b.begin(), b.end()));
  auto at = std::find_if(rest.begin() + 1, rest.end(), [&](const std::string& a) {
    return std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end();
  });
  if (at != rest.end()) ++at;
  out.insert(out.end(), rest.begin(), at);
  for (const auto& [k, v] : kv.entries()) {
    if (v == "true") {
      out.push_back("--" + k);
    } else if (v != "false") {
      out.push_back("--" + k);
      out.push_back(v);
    }
  }
  out.insert(out.end(), at, rest.end());
  return out;
}

inline int run_gen_data(const std::string& out, const CorpusOptions& co) {
  std::filesystem::create_directories(out);
  for (std::size_t i = 0; i < co.count; ++i) {
    const SceneSpec spec = random_scene(scene_seed(co.seed, i), co.scene);
    const ScenePair p = generate_scene_pair(spec, co.size);
    const std::string stem = pair_stem(out, i);
    const std::string text = serialize_scene(spec);
    write_bytes(stem + ".scene", std::vector<std::uint8_t>(text.begin(), text.end()));
    write_image(p.first, stem + "_a.ppm");
    write_image(p.second, stem + "_b.ppm");
    write_flo(ground_truth_flow(p), stem + "_gt.flo");
  }
  log() << "wrote " << co.count << " pairs to " << out << "\n";
  return 0;
}

inline int run_gradcheck(double h, double tol) {
  bool ok = true;
  for (const GradCheckResult& r : check_all_primitives(7, 10, h, tol)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << r.max_rel_error << "\n";
    ok = ok && r.passed;
  }
  ModelConfig tiny;
  tiny.input_size = 32;
  tiny.d_model = 8;
  tiny.enc_layers = tiny.dec_layers = 1;
  tiny.heads = 2;
  tiny.head_hidden = tiny.ffn_hidden = 16;
  for (Architecture a : {Architecture::kTransformer, Architecture::kMlp}) {
    tiny.arch = a;
    const double e = check_loss_gradient(tiny, 11, h);
    const bool pass = e <= tol;
    std::cout << (pass ? "PASS " : "FAIL ") << (a == Architecture::kMlp ? "loss_mlp" : "loss_transformer")
              << " max_rel_error=" << e << "\n";
    ok = ok && pass;
  }
  return ok ? 0 : 1;
}

inline void print_metrics(const FlowField& pred, const FlowField& gt) {
  std::cout << "aepe=" << aepe(pred, gt) << "\n";
  for (double t : {1.0, 3.0, 5.0}) std::cout << "pck" << t << "=" << pck(pred, gt, t) << "\n";
  std::cout << "fl=" << fl_ratio(pred, gt) << "\n";
}

/// Entry point: 0 success, 1 domain error, 2 usage error.
inline int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(args, {"gen-data", "train", "match", "dense", "eval", "gradcheck", "ablate"});
  } catch (const std::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"Functional correspondence transformer: training, matching and evaluation"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads for per-query inference")->capture_default_str();
  app.add_option("--config", config_path, "Key-value file of flag defaults");

  // gen-data
  CorpusOptions gen;
  std::string gen_out;
  auto* g = app.add_subcommand("gen-data", "Render a seeded synthetic corpus");
  g->add_option("--out", gen_out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of pairs")->capture_default_str();
  g->add_option("--size", gen.size, "Rendered image side")->capture_default_str();
  g->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  g->add_option("--layers", gen.scene.layers, "Independently moving layers")->capture_default_str();

  // train
  ModelFlags tm;
  ScheduleFlags ts;
  std::string train_out, train_data, resume;
  CorpusOptions tc;
  std::uint64_t init_seed = 7, sample_seed = 11;
  auto* t = app.add_subcommand("train", "Staged training to a checkpoint");
  t->add_option("--out", train_out, "Checkpoint path")->required();
  t->add_option("--data", train_data, "Directory from gen-data (otherwise rendered from --data-seed)");
  t->add_option("--data-seed", tc.seed, "Corpus seed")->capture_default_str();
  t->add_option("--count", tc.count, "Corpus pairs")->capture_default_str();
  t->add_option("--size", tc.size, "Rendered image side")->capture_default_str();
  t->add_option("--layers", tc.scene.layers, "Independently moving layers")->capture_default_str();
  t->add_option("--seed", init_seed, "Parameter initialization seed")->capture_default_str();
  t->add_option("--sample-seed", sample_seed, "Training sample seed")->capture_default_str();
  t->add_option("--resume", resume, "Continue from a checkpoint");
  tm.add(*t);
  ts.add(*t);

  // match / dense
  InferFlags mi;
  std::string model_path, image_a, image_b, queries_path, match_out;
  std::size_t num_queries = 100, stride = 8;
  std::uint64_t query_seed = 1;
  bool every_pixel = false;
  auto* m = app.add_subcommand("match", "Sparse correspondences for an image pair");
  auto* d = app.add_subcommand("dense", "Dense flow by Delaunay densification");
  for (CLI::App* s : {m, d}) {
    s->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--image-a", image_a, "Image one (PPM/PGM)")->required()->check(CLI::ExistingFile);
    s->add_option("--image-b", image_b, "Image two (PPM/PGM)")->required()->check(CLI::ExistingFile);
    s->add_option("--out", match_out, "Output path")->required();
    mi.add(*s);
  }
  m->add_option("--queries", queries_path, "Text file of 'x y' pixel queries")->check(CLI::ExistingFile);
  m->add_option("--num-queries", num_queries, "Random queries when --queries is absent")->capture_default_str();
  m->add_option("--query-seed", query_seed, "Seed for random queries")->capture_default_str();
  d->add_option("--stride", stride, "Query grid spacing in pixels")->capture_default_str();
  d->add_flag("--every-pixel", every_pixel, "Query every pixel instead of densifying");

  // eval
  std::string pred_path, gt_path;
  auto* e = app.add_subcommand("eval", "Compare predicted and ground-truth flows");
  e->add_option("--pred", pred_path, "Predicted .flo")->required()->check(CLI::ExistingFile);
  e->add_option("--gt", gt_path, "Ground-truth .flo")->required()->check(CLI::ExistingFile);

  // gradcheck
  double gc_h = 1e-4, gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and the loss");
  gc->add_option("--step", gc_h, "Central-difference step")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();

  // ablate
  ModelFlags am;
  ScheduleFlags as;
  InferFlags ai;
  CorpusOptions ac;
  ac.scene.layers = 2;
  std::size_t held_count = 50, held_queries = 20;
  std::string report;
  auto* ab = app.add_subcommand("ablate", "Transformer vs MLP and zoom-error studies");
  ab->add_option("--out", report, "Report path (markdown table)")->required();
  ab->add_option("--data-seed", ac.seed, "Training corpus seed")->capture_default_str();
  ab->add_option("--count", ac.count, "Training pairs")->capture_default_str();
  ab->add_option("--layers", ac.scene.layers, "Layers per scene")->capture_default_str();
  ab->add_option("--held-out", held_count, "Held-out pairs")->capture_default_str();
  ab->add_option("--held-queries", held_queries, "Queries per held-out pair")->capture_default_str();
  ab->add_option("--seed", init_seed, "Parameter initialization seed")->capture_default_str();
  ab->add_option("--sample-seed", sample_seed, "Training sample seed")->capture_default_str();
  am.add(*ab);
  as.add(*ab);
  ai.add(*ab);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe) == 0 ? 0 : 2;
  }

  try {
    if (*g) return run_gen_data(gen_out, gen);

    if (*gc) return run_gradcheck(gc_h, gc_tol);

    if (*e) {
      print_metrics(read_flo(pred_path), read_flo(gt_path));
      return 0;
    }

    if (*t) {
      Checkpoint start = resume.empty() ? fresh_checkpoint(tm.resolve(), init_seed) : load_checkpoint(resume);
      if (!resume.empty() && !(start.config == tm.resolve()))
        log() << "resuming with the checkpoint's model configuration\n";
      const SceneCorpus corpus =
          train_data.empty() ? SceneCorpus::render(tc) : SceneCorpus::from_specs(load_scenes(train_data), tc.size);
      TrainingOptions o;
      o.schedule = ts.schedule;
      o.log_every = ts.log_every;
      o.log = log_level() >= 1 ? &std::cerr : nullptr;
      SamplerOptions so;
      so.input_size = start.config.input_size;
      so.correspondences = ts.correspondences;
      const Checkpoint ck = run_staged_training(std::move(start), corpus_sampler(corpus, sample_seed, so), o);
      save_checkpoint(ck, train_out);
      return 0;
    }

    if (*m || *d) {
      const InferOptions o = mi.resolve(threads);
      const Model model = load_model(model_path);
      const NetworkMatcher matcher(model);
      const Image a = to_rgb(read_image(image_a)), b = to_rgb(read_image(image_b));
      if (*d) {
        write_flo(match_dense(a, b, matcher, o, stride, every_pixel), match_out);
        return 0;
      }
      std::vector<Vec2> q;
      if (!queries_path.empty()) {
        q = read_query_points(queries_path);
      } else {
        auto rng = seeded_stream(query_seed, 4);
        std::uniform_real_distribution<double> ux(0, double(a.width)), uy(0, double(a.height));
        for (std::size_t i = 0; i < num_queries; ++i) q.push_back({ux(rng), uy(rng)});
      }
      const std::vector<MatchEstimate> est = match_sparse(q, a, b, matcher, o);
      if (!est.empty() && est.front().reason == Rejection::kNoCovisibility) throw NoCovisibilityError("no_covisibility");
      std::vector<Correspondence> out;
      std::size_t rejected[4] = {0, 0, 0, 0};
      for (const MatchEstimate& x : est) {
        ++rejected[int(x.reason)];
        if (x.accepted) out.push_back({x.query, x.estimate(), x.cycle_error});
      }
      write_correspondences(out, match_out);
      std::cout << "accepted=" << out.size() << "\n";
      for (Rejection r : {Rejection::kCycle, Rejection::kOscillation})
        std::cout << "rejected_" << rejection_name(r) << "=" << rejected[int(r)] << "\n";
      return 0;
    }

    if (*ab) {
      const ModelConfig base = am.resolve();
      const InferOptions io = ai.resolve(threads);
      const SceneCorpus train = SceneCorpus::render(ac);
      CorpusOptions hc = ac;
      hc.seed = ac.seed + 1000003;
      hc.count = held_count;
      const SceneCorpus held = SceneCorpus::render(hc);
      TrainingOptions o;
      o.schedule = as.schedule;
      o.log_every = as.log_every;
      o.log = log_level() >= 1 ? &std::cerr : nullptr;
      SamplerOptions so;
      so.correspondences = as.correspondences;
      std::ostringstream md;
      md << "| variant | coarse AEPE (px at S) |";
      for (std::size_t s = 0; s <= io.zoom.steps; ++s) md << " median EPE step " << s << " |";
      md << "\n|---|---|";
      for (std::size_t s = 0; s <= io.zoom.steps; ++s) md << "---|";
      md << "\n";
      for (Architecture arch : {Architecture::kTransformer, Architecture::kMlp}) {
        ModelConfig c = base;
        c.arch = arch;
        log() << "training " << (arch == Architecture::kMlp ? "mlp" : "transformer") << "\n";
        const Checkpoint ck = train_on_corpus(c, init_seed, train, sample_seed, o, so);
        const NetworkMatcher net(Model{ck.config, ck.params});
        const ZoomStudy st = zoom_study(net, held, held_queries, 5, c.input_size, io);
        md << "| " << (arch == Architecture::kMlp ? "mlp" : "transformer") << " | " << st.coarse_aepe() << " |";
        for (std::size_t s = 0; s <= io.zoom.steps; ++s) md << " " << st.median(s) << " |";
        md << "\n";
        std::cout << (arch == Architecture::kMlp ? "mlp" : "transformer") << "_aepe=" << st.coarse_aepe() << "\n";
      }
      const std::string text = md.str();
      write_bytes(report, std::vector<std::uint8_t>(text.begin(), text.end()));
      return 0;
    }
  } catch (const NoCovisibilityError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& x) {
    std::cerr << "usage error: " << x.what() << "\n";
    return 2;
  } catch (const std::exception& x) {
    std::cerr << "error: " << x.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cotr::cli
