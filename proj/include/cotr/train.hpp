#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cotr/errors.hpp"
#include "cotr/gradcheck.hpp"
#include "cotr/io.hpp"
#include "cotr/model.hpp"
#include "cotr/optim.hpp"
#include "cotr/synth.hpp"

namespace cotr {

struct LossTerms {
  double corr = 0;
  double cycle = 0;
  double total = 0;
};

template <class T>
struct LossGraph {
  Tensor<T> corr;
  Tensor<T> cycle;
  Tensor<T> total;

  LossTerms values() const { return {double(corr.item()), double(cycle.item()), double(total.item())}; }
};

/// corr = mean ‖target − F(x | I, I')‖², cycle = mean ‖x − F(F(x | I, I') | I', I)‖².
/// Queries with a false entry in `visible` are left out of both terms.
template <class T>
LossGraph<T> loss_graph(std::span<const Vec2> queries, std::span<const Vec2> targets, const Tensor<T>& image_a,
                        const Tensor<T>& image_b, const ParamSet<T>& ps, const ModelConfig& c,
                        const std::vector<bool>& visible = {}) {
  if (queries.size() != targets.size())
    throw std::invalid_argument("compute_loss: " + std::to_string(queries.size()) + " queries but " +
                                std::to_string(targets.size()) + " targets");
  if (!visible.empty() && visible.size() != queries.size())
    throw std::invalid_argument("compute_loss: visibility mask length mismatch");
  std::vector<Vec2> q, t;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!visible.empty() && !visible[i]) continue;
    q.push_back(queries[i]);
    t.push_back(targets[i]);
  }
  if (q.empty()) throw DomainError("compute_loss: no visible query");
  const Tensor<T> qt = points_tensor<T>(q);
  const Tensor<T> tt = points_tensor<T>(t);
  const Tensor<T> fa = backbone(image_a, ps, c);
  const Tensor<T> fb = backbone(image_b, ps, c);
  const Tensor<T> forward = predict(qt, prepare_direction(fa, fb, ps, c), ps, c);
  const Tensor<T> back = predict(forward, prepare_direction(fb, fa, ps, c), ps, c);
  const T inv = T(1) / T(q.size());
  LossGraph<T> g;
  g.corr = scale(squared_l2(subtract(forward, tt)), inv);
  g.cycle = scale(squared_l2(subtract(back, qt)), inv);
  g.total = add(g.corr, g.cycle);
  return g;
}

template <class T>
LossTerms compute_loss(std::span<const Vec2> queries, std::span<const Vec2> targets, const Tensor<T>& image_a,
                       const Tensor<T>& image_b, const ParamSet<T>& ps, const ModelConfig& c) {
  return loss_graph(queries, targets, image_a, image_b, ps, c).values();
}

using FrozenFn = std::function<bool(const std::string&)>;

namespace detail {

/// Leaves that take part in differentiation; frozen ones are constants.
inline ParamSet<float> trainable_view(const ParamSet<float>& ps, const FrozenFn& frozen) {
  ParamSet<float> out;
  for (const auto& [name, p] : ps) out.emplace(name, p.detach(!(frozen && frozen(name))));
  return out;
}

}  // namespace detail

/// One Adam step on the mean total loss of the batch. Per-sample gradients
/// are summed in batch order, so the result is deterministic.
inline LossTerms train_step(const std::vector<TrainSample>& batch, ParamSet<float>& params,
                            AdamState<float>& opt, const ModelConfig& c, const AdamHyper& hp,
                            const FrozenFn& frozen = {}) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const ParamSet<float> leaves = detail::trainable_view(params, frozen);
  std::map<std::string, std::vector<float>> acc;
  for (const auto& [name, p] : params) acc[name].assign(p.numel(), 0.f);
  LossTerms mean;
  const float w = 1.0f / float(batch.size());
  for (const TrainSample& s : batch) {
    const LossGraph<float> g = loss_graph<float>(s.queries, s.targets, image_tensor<float>(s.crop_a),
                                                 image_tensor<float>(s.crop_b), leaves, c);
    const LossTerms v = g.values();
    if (!std::isfinite(v.total)) throw NumericError("non-finite training loss");
    mean.corr += v.corr / double(batch.size());
    mean.cycle += v.cycle / double(batch.size());
    mean.total += v.total / double(batch.size());
    const Gradients<float> grads = backward(g.total);
    for (const auto& [name, p] : leaves) {
      if (!grads.reached(p)) continue;
      const Tensor<float> gp = grads.of(p);
      auto& dst = acc[name];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * gp[i];
    }
  }
  std::map<std::string, Tensor<float>> grads;
  for (auto& [name, v] : acc) grads.emplace(name, Tensor<float>(params.at(name).shape(), std::move(v)));
  params = adam_update(params, grads, opt, hp, opt.step + 1, frozen);
  return mean;
}

struct StageSchedule {
  std::uint64_t stage1 = 2000;  // backbone frozen
  std::uint64_t stage2 = 10000;
  std::uint64_t stage3 = 2000;  // zoomed crops
  double lr1 = 1e-4;
  double lr2 = 1e-5;
  double lr3 = 1e-5;
  std::size_t batch = 8;

  std::uint64_t total() const { return stage1 + stage2 + stage3; }
  int stage_of(std::uint64_t step) const {
    if (step <= stage1) return 1;
    if (step <= stage1 + stage2) return 2;
    return 3;
  }
};

struct Checkpoint {
  ModelConfig config;
  ParamSet<float> params;
  AdamState<float> opt;
  std::uint64_t step = 0;
};

/// Supplies the sample with a given global index; `zoom` selects the
/// zoomed crop sampler.
using SampleSource = std::function<TrainSample(std::uint64_t index, bool zoom)>;

struct TrainingOptions {
  StageSchedule schedule;
  std::uint64_t log_every = 50;
  std::ostream* log = nullptr;
  std::function<void(const Checkpoint&)> on_stage_end;
  std::function<void(const Checkpoint&)> after_step;
};

inline void log_line(std::ostream& os, std::uint64_t step, const LossTerms& l) {
  os << "step=" << step << " corr=" << l.corr << " cycle=" << l.cycle << " total=" << l.total << "\n";
}

/// Three-stage schedule: frozen backbone, end-to-end, end-to-end on zoomed
/// crops. Resumes from `start.step` when given a partially trained state.
inline Checkpoint run_staged_training(Checkpoint start, const SampleSource& source, const TrainingOptions& o) {
  const StageSchedule& sch = o.schedule;
  if (sch.batch == 0) throw std::invalid_argument("batch size must be positive");
  Checkpoint ck = std::move(start);
  const FrozenFn frozen_backbone = [](const std::string& n) { return is_backbone_param(n); };
  LossTerms window;
  std::uint64_t in_window = 0;
  for (std::uint64_t step = ck.step + 1; step <= sch.total(); ++step) {
    const int stage = sch.stage_of(step);
    std::vector<TrainSample> batch;
    for (std::size_t j = 0; j < sch.batch; ++j) batch.push_back(source((step - 1) * sch.batch + j, stage == 3));
    AdamHyper hp;
    hp.lr = stage == 1 ? sch.lr1 : stage == 2 ? sch.lr2 : sch.lr3;
    const LossTerms l = train_step(batch, ck.params, ck.opt, ck.config, hp, stage == 1 ? frozen_backbone : FrozenFn{});
    ck.step = step;
    window.corr += l.corr;
    window.cycle += l.cycle;
    window.total += l.total;
    ++in_window;
    if (o.log && (step % o.log_every == 0 || step == sch.total())) {
      const double n = double(in_window);
      log_line(*o.log, step, {window.corr / n, window.cycle / n, window.total / n});
      o.log->flush();
      window = {};
      in_window = 0;
    }
    const bool stage_end = step == sch.total() || sch.stage_of(step + 1) != stage;
    if (stage_end && o.on_stage_end) o.on_stage_end(ck);
    if (o.after_step) o.after_step(ck);
  }
  return ck;
}

// Checkpoint file: "COTRCKPT", u32 version, u32 tensor count, tensors
// (u32 name length, name, u32 rank, u32 extents, f32 data), then the
// optimizer moments in the same scheme. Configuration and step counters
// travel as "meta/" tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(std::vector<std::uint8_t>& b, const std::string& name, const Tensor<float>& t) {
  put_u32(b, std::uint32_t(name.size()));
  b.insert(b.end(), name.begin(), name.end());
  put_u32(b, std::uint32_t(t.rank()));
  for (auto e : t.shape()) put_u32(b, std::uint32_t(e));
  for (float v : t.data()) put_f32(b, v);
}

inline std::pair<std::string, Tensor<float>> get_tensor(Reader& r) {
  const std::uint32_t len = r.u32();
  std::string name = r.bytes(len);
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for tensor " + name);
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw FormatError("checkpoint: zero extent in tensor " + name);
    n *= e;
  }
  r.need(n * 4);
  std::vector<float> data(n);
  for (float& v : data) v = r.f32();
  return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
}

inline void put_section(std::vector<std::uint8_t>& b, const std::map<std::string, Tensor<float>>& ts) {
  put_u32(b, std::uint32_t(ts.size()));
  for (const auto& [name, t] : ts) put_tensor(b, name, t);
}

inline std::map<std::string, Tensor<float>> get_section(Reader& r) {
  std::map<std::string, Tensor<float>> out;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = get_tensor(r);
    out.insert_or_assign(std::move(name), std::move(t));
  }
  return out;
}

inline Tensor<float> config_tensor(const ModelConfig& c) {
  return Tensor<float>({9}, {float(c.input_size), float(c.d_model), float(c.enc_layers), float(c.dec_layers),
                             float(c.heads), float(c.head_hidden), float(c.ffn_hidden), float(int(c.pos_mode)),
                             float(int(c.arch))});
}

inline ModelConfig config_from_tensor(const Tensor<float>& t) {
  if (t.numel() != 9) throw FormatError("checkpoint: malformed configuration record");
  ModelConfig c;
  c.input_size = std::size_t(t[0]);
  c.d_model = std::size_t(t[1]);
  c.enc_layers = std::size_t(t[2]);
  c.dec_layers = std::size_t(t[3]);
  c.heads = std::size_t(t[4]);
  c.head_hidden = std::size_t(t[5]);
  c.ffn_hidden = std::size_t(t[6]);
  c.pos_mode = PosEncoding(int(t[7]));
  c.arch = Architecture(int(t[8]));
  return c;
}

// Counters are split into 20-bit halves so each is exact in a float.
inline Tensor<float> counter_tensor(std::uint64_t v) {
  return Tensor<float>({2}, {float(v >> 20), float(v & 0xfffff)});
}
inline std::uint64_t counter_from_tensor(const Tensor<float>& t) {
  if (t.numel() != 2) throw FormatError("checkpoint: malformed counter record");
  return (std::uint64_t(t[0]) << 20) | std::uint64_t(t[1]);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> b{'C', 'O', 'T', 'R', 'C', 'K', 'P', 'T'};
  detail::put_u32(b, kCheckpointVersion);
  std::map<std::string, Tensor<float>> main(ck.params.begin(), ck.params.end());
  main.emplace("meta/config", detail::config_tensor(ck.config));
  main.emplace("meta/step", detail::counter_tensor(ck.step));
  detail::put_section(b, main);
  std::map<std::string, Tensor<float>> opt;
  for (const auto& [n, t] : ck.opt.m) opt.emplace("m/" + n, t);
  for (const auto& [n, t] : ck.opt.v) opt.emplace("v/" + n, t);
  opt.emplace("meta/adam_step", detail::counter_tensor(ck.opt.step));
  detail::put_section(b, opt);
  return b;
}

/// Parses a checkpoint; with `expected`, a different stored configuration
/// raises ConfigMismatchError.
inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& b, const std::string& what,
                                    const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::Reader r(b, what);
  if (b.size() < 8 || std::string(b.begin(), b.begin() + 8) != "COTRCKPT")
    throw BadMagicError(what + ": not a checkpoint (bad magic)");
  r.bytes(8);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionMismatchError(what + ": checkpoint version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  auto main = detail::get_section(r);
  auto opt = detail::get_section(r);
  if (!r.done()) throw FormatError(what + ": trailing bytes after checkpoint");
  Checkpoint ck;
  if (!main.count("meta/config") || !main.count("meta/step")) throw FormatError(what + ": missing meta records");
  ck.config = detail::config_from_tensor(main.at("meta/config"));
  ck.step = detail::counter_from_tensor(main.at("meta/step"));
  if (expected && !(*expected == ck.config)) throw ConfigMismatchError(what + ": checkpoint configuration differs");
  for (auto& [n, t] : main)
    if (n.rfind("meta/", 0) != 0) ck.params.emplace(n, t);
  for (auto& [n, t] : opt) {
    if (n.rfind("m/", 0) == 0) ck.opt.m.emplace(n.substr(2), t);
    else if (n.rfind("v/", 0) == 0) ck.opt.v.emplace(n.substr(2), t);
  }
  if (opt.count("meta/adam_step")) ck.opt.step = detail::counter_from_tensor(opt.at("meta/adam_step"));
  // Parameter set must match the configuration's architecture exactly.
  const ParamSet<float> ref = init_params(ck.config, 0);
  if (ref.size() != ck.params.size()) throw ConfigMismatchError(what + ": parameter set does not match configuration");
  for (const auto& [n, t] : ref) {
    auto it = ck.params.find(n);
    if (it == ck.params.end() || it->second.shape() != t.shape())
      throw ConfigMismatchError(what + ": parameter " + n + " does not match configuration");
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) { write_bytes(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = std::nullopt) {
  return decode_checkpoint(read_bytes(path), path, expected);
}

inline Checkpoint fresh_checkpoint(const ModelConfig& c, std::uint64_t seed) { return {c, init_params(c, seed), {}, 0}; }

/// Finite-difference check of the full loss gradient for every parameter
/// of a model, in double precision. Returns the norm-wise relative error.
inline double check_loss_gradient(const ModelConfig& c, std::uint64_t seed, double h = 1e-4) {
  auto rng = seeded_stream(seed, 3);
  std::uniform_real_distribution<double> u(0, 1);
  const std::size_t s = c.input_size;
  std::vector<double> ia(s * s * 3), ib(s * s * 3);
  for (auto& v : ia) v = u(rng);
  for (auto& v : ib) v = u(rng);
  const Tensor<double> a({s, s, 3}, ia), b({s, s, 3}, ib);
  std::vector<Vec2> q(4), t(4);
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = {u(rng), u(rng)};
    t[i] = {u(rng), u(rng)};
  }
  const ParamSet<double> base = cast_params<double>(init_params(c, seed), false);
  const ParamSet<double> leaves = with_grad(base);
  const Gradients<double> grads = backward(loss_graph<double>(q, t, a, b, leaves, c).total);

  std::vector<double> analytic, numeric;
  for (const auto& [name, p] : base) {
    const Tensor<double> g = grads.of(leaves.at(name));
    analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    auto fn = [&, &name = name](const Tensor<double>& x) {
      ParamSet<double> ps = base;
      ps.insert_or_assign(name, x);
      return loss_graph<double>(q, t, a, b, ps, c).total.item();
    };
    const Tensor<double> fd = finite_difference_gradient(fn, p, h);
    numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
  }
  return relative_error(analytic, numeric);
}

}  // namespace cotr
