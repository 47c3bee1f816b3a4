#pragma once

#include <cmath>
#include <cstdint>
#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cotr/geometry.hpp"
#include "cotr/ops.hpp"
#include "cotr/tensor.hpp"

namespace cotr {

enum class Architecture { kTransformer, kMlp };

/// Architecture hyperparameters. Defaults are the desk-scale configuration;
/// the full-size model uses input 256, width 256, 6+6 layers, 8 heads and a
/// 256-unit coordinate head.
struct ModelConfig {
  std::size_t input_size = 128;
  std::size_t d_model = 64;
  std::size_t enc_layers = 3;
  std::size_t dec_layers = 3;
  std::size_t heads = 4;
  std::size_t head_hidden = 128;
  std::size_t ffn_hidden = 128;
  PosEncoding pos_mode = PosEncoding::kLinear;
  Architecture arch = Architecture::kTransformer;

  /// Side of the backbone feature map (input / 16).
  std::size_t feature_size() const { return input_size / 16; }

  void validate() const {
    if (input_size == 0 || input_size % 16 != 0)
      throw std::invalid_argument("input_size must be a positive multiple of 16");
    if (d_model == 0 || d_model % 4 != 0) throw std::invalid_argument("d_model must be a positive multiple of 4");
    if (heads == 0 || d_model % heads != 0) throw std::invalid_argument("heads must divide d_model");
    if (head_hidden == 0 || ffn_hidden == 0) throw std::invalid_argument("hidden widths must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Backbone channel widths for the four stride-2 blocks.
inline std::array<std::size_t, 4> backbone_channels(const ModelConfig& c) {
  const std::size_t n = c.d_model;
  return {std::max<std::size_t>(n / 4, 1), std::max<std::size_t>(n / 2, 1), n, n};
}

/// Analytic positional encoding of one point (reference form of pos_encode).
inline std::vector<double> positional_encode(Vec2 p, std::size_t channels,
                                             PosEncoding mode = PosEncoding::kLinear) {
  if (channels == 0 || channels % 4 != 0) throw std::invalid_argument("channels must be a positive multiple of 4");
  std::vector<double> out(channels);
  for (std::size_t k = 1; k <= channels / 4; ++k) {
    const double w = encoding_frequency(k, channels, mode);
    out[4 * (k - 1) + 0] = std::sin(w * p.x);
    out[4 * (k - 1) + 1] = std::sin(w * p.y);
    out[4 * (k - 1) + 2] = std::cos(w * p.x);
    out[4 * (k - 1) + 3] = std::cos(w * p.y);
  }
  return out;
}

/// Coordinates of the concatenated context grid, H_f × 2W_f × 2 with cell
/// (i, j) holding (j / W_f, i / H_f).
inline std::vector<Vec2> context_grid(std::size_t feature_size) {
  std::vector<Vec2> g;
  g.reserve(feature_size * feature_size * 2);
  for (std::size_t i = 0; i < feature_size; ++i)
    for (std::size_t j = 0; j < 2 * feature_size; ++j)
      g.push_back({double(j) / double(feature_size), double(i) / double(feature_size)});
  return g;
}

template <class T>
Tensor<T> points_tensor(std::span<const Vec2> pts) {
  std::vector<T> v;
  v.reserve(pts.size() * 2);
  for (const auto& p : pts) {
    v.push_back(T(p.x));
    v.push_back(T(p.y));
  }
  return Tensor<T>({pts.size(), 2}, std::move(v));
}

namespace detail {

inline void add_param(ParamSet<float>& ps, std::mt19937_64& rng, const std::string& name, Shape shape,
                      double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<float> v(numel_of(shape));
  for (auto& x : v) x = stddev > 0 ? float(nd(rng)) : 0.f;
  ps.emplace(name, Tensor<float>(std::move(shape), std::move(v)));
}

inline void add_linear(ParamSet<float>& ps, std::mt19937_64& rng, const std::string& prefix, std::size_t in,
                       std::size_t out, double gain) {
  add_param(ps, rng, prefix + "/w", {in, out}, gain / std::sqrt(double(in)));
  add_param(ps, rng, prefix + "/b", {out}, 0.0);
}

inline void add_norm(ParamSet<float>& ps, const std::string& prefix, std::size_t n) {
  ps.emplace(prefix + "/g", Tensor<float>::full({n}, 1.f));
  ps.emplace(prefix + "/b", Tensor<float>::zeros({n}));
}

inline void add_attention_block(ParamSet<float>& ps, std::mt19937_64& rng, const std::string& prefix,
                                const ModelConfig& c) {
  for (const char* k : {"q", "k", "v", "o"}) add_linear(ps, rng, prefix + "/attn/" + k, c.d_model, c.d_model, 1.0);
  add_norm(ps, prefix + "/ln1", c.d_model);
  add_linear(ps, rng, prefix + "/ffn/0", c.d_model, c.ffn_hidden, std::sqrt(2.0));
  add_linear(ps, rng, prefix + "/ffn/1", c.ffn_hidden, c.d_model, 1.0);
  add_norm(ps, prefix + "/ln2", c.d_model);
}

}  // namespace detail

/// Parameter names under this prefix belong to the convolutional backbone.
inline constexpr std::string_view kBackbonePrefix = "backbone/";

inline bool is_backbone_param(const std::string& name) { return name.rfind(kBackbonePrefix, 0) == 0; }

/// Seeded initialization (He for ReLU-fed layers, 1/sqrt(fan-in) otherwise).
inline ParamSet<float> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ParamSet<float> ps;
  const auto ch = backbone_channels(c);
  std::size_t cin = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string pre = "backbone/conv" + std::to_string(i);
    detail::add_param(ps, rng, pre + "/w", {3, 3, cin, ch[i]}, std::sqrt(2.0 / double(9 * cin)));
    detail::add_param(ps, rng, pre + "/b", {ch[i]}, 0.0);
    cin = ch[i];
  }
  detail::add_param(ps, rng, "backbone/proj/w", {1, 1, cin, c.d_model}, 1.0 / std::sqrt(double(cin)));
  detail::add_param(ps, rng, "backbone/proj/b", {c.d_model}, 0.0);

  if (c.arch == Architecture::kTransformer) {
    for (std::size_t l = 0; l < c.enc_layers; ++l) detail::add_attention_block(ps, rng, "encoder/" + std::to_string(l), c);
    for (std::size_t l = 0; l < c.dec_layers; ++l) detail::add_attention_block(ps, rng, "decoder/" + std::to_string(l), c);
    detail::add_linear(ps, rng, "head/0", c.d_model, c.head_hidden, std::sqrt(2.0));
    detail::add_linear(ps, rng, "head/1", c.head_hidden, c.head_hidden, std::sqrt(2.0));
    detail::add_linear(ps, rng, "head/2", c.head_hidden, 2, 0.1);
  } else {
    detail::add_linear(ps, rng, "mlp/0", 3 * c.d_model, c.head_hidden, std::sqrt(2.0));
    detail::add_linear(ps, rng, "mlp/1", c.head_hidden, c.head_hidden, std::sqrt(2.0));
    detail::add_linear(ps, rng, "mlp/2", c.head_hidden, 2, 0.1);
  }
  // Outputs start near the image center.
  const std::string out_bias = c.arch == Architecture::kTransformer ? "head/2/b" : "mlp/2/b";
  ps[out_bias] = Tensor<float>::full({2}, 0.5f);
  return ps;
}

template <class T>
const Tensor<T>& param(const ParamSet<T>& ps, const std::string& name) {
  auto it = ps.find(name);
  if (it == ps.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix) {
  return add(matmul(x, param(ps, prefix + "/w")), param(ps, prefix + "/b"));
}

/// Shared CNN backbone: S×S×3 image → (S/16)×(S/16)×N feature map.
template <class T>
Tensor<T> backbone(const Tensor<T>& image, const ParamSet<T>& ps, const ModelConfig& c) {
  const std::size_t s = c.input_size;
  if (image.shape() != Shape{s, s, 3}) {
    throw ShapeError("backbone: expected image " + shape_str({s, s, 3}) + ", got " + shape_str(image.shape()));
  }
  Tensor<T> x = add(image, Tensor<T>::scalar(T(-0.5)));
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string pre = "backbone/conv" + std::to_string(i);
    x = relu(add(conv2d(x, param(ps, pre + "/w"), 2), param(ps, pre + "/b")));
  }
  return add(conv2d(x, param(ps, "backbone/proj/w"), 1), param(ps, "backbone/proj/b"));
}

/// P(Ω) over the concatenated grid, H_f × 2W_f × N.
template <class T>
Tensor<T> grid_encoding(const ModelConfig& c) {
  const std::size_t f = c.feature_size();
  const auto grid = context_grid(f);
  return reshape(pos_encode(points_tensor<T>(grid), c.d_model, c.pos_mode), {f, 2 * f, c.d_model});
}

/// c = [E(I), E(I')] + P(Ω) from precomputed backbone maps.
template <class T>
Tensor<T> context_from_features(const Tensor<T>& feat_a, const Tensor<T>& feat_b, const ModelConfig& c) {
  return add(concat(feat_a, feat_b, 1), grid_encoding<T>(c));
}

template <class T>
Tensor<T> build_context(const Tensor<T>& image_a, const Tensor<T>& image_b, const ParamSet<T>& ps,
                        const ModelConfig& c) {
  return context_from_features(backbone(image_a, ps, c), backbone(image_b, ps, c), c);
}

/// Multi-head scaled dot-product attention of `query` rows over `kv` rows.
/// Each query row is processed independently of the other query rows.
template <class T>
Tensor<T> attention(const Tensor<T>& query, const Tensor<T>& kv, const ParamSet<T>& ps, const std::string& prefix,
                    std::size_t heads) {
  const std::size_t lq = query.dim(0), lk = kv.dim(0), n = query.dim(1), dh = n / heads;
  const Tensor<T> q = transpose(reshape(linear(query, ps, prefix + "/q"), {lq, heads, dh}), {1, 0, 2});
  const Tensor<T> kt = transpose(reshape(linear(kv, ps, prefix + "/k"), {lk, heads, dh}), {1, 2, 0});
  const Tensor<T> v = transpose(reshape(linear(kv, ps, prefix + "/v"), {lk, heads, dh}), {1, 0, 2});
  const Tensor<T> w = softmax(scale(matmul(q, kt), T(1.0 / std::sqrt(double(dh)))));
  const Tensor<T> o = reshape(transpose(matmul(w, v), {1, 0, 2}), {lq, n});
  return linear(o, ps, prefix + "/o");
}

template <class T>
Tensor<T> norm_affine(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix) {
  return add(multiply(layer_norm(x), param(ps, prefix + "/g")), param(ps, prefix + "/b"));
}

/// Post-norm attention layer. Encoder layers attend over their own input;
/// decoder layers attend from the queries to the encoded context only.
template <class T>
Tensor<T> attention_layer(const Tensor<T>& x, const Tensor<T>& memory, const ParamSet<T>& ps,
                          const std::string& prefix, std::size_t heads) {
  Tensor<T> h = norm_affine(add(x, attention(x, memory, ps, prefix + "/attn", heads)), ps, prefix + "/ln1");
  const Tensor<T> f = linear(relu(linear(h, ps, prefix + "/ffn/0")), ps, prefix + "/ffn/1");
  return norm_affine(add(h, f), ps, prefix + "/ln2");
}

/// T_E(c): context map flattened to (H_f·2W_f) × N tokens.
template <class T>
Tensor<T> encode_context(const Tensor<T>& context, const ParamSet<T>& ps, const ModelConfig& c) {
  Tensor<T> x = reshape(context, {context.dim(0) * context.dim(1), context.dim(2)});
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    x = attention_layer(x, x, ps, "encoder/" + std::to_string(l), c.heads);
  }
  return x;
}

template <class T>
Tensor<T> coordinate_mlp(const Tensor<T>& x, const ParamSet<T>& ps, const std::string& prefix) {
  Tensor<T> h = relu(linear(x, ps, prefix + "/0"));
  h = relu(linear(h, ps, prefix + "/1"));
  return linear(h, ps, prefix + "/2");
}

/// D(T_D(P(x), memory)) for Q×2 query coordinates → Q×2 estimates.
template <class T>
Tensor<T> decode_queries(const Tensor<T>& queries, const Tensor<T>& memory, const ParamSet<T>& ps,
                         const ModelConfig& c) {
  if (queries.rank() != 2 || queries.dim(1) != 2) throw ShapeError("queries must be Q×2");
  Tensor<T> x = pos_encode(queries, c.d_model, c.pos_mode);
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    x = attention_layer(x, memory, ps, "decoder/" + std::to_string(l), c.heads);
  }
  return coordinate_mlp(x, ps, "head");
}

/// Global-latent regression: max-pooled backbone features of both images
/// concatenated with the query encoding, fed to a 3-layer MLP.
template <class T>
Tensor<T> mlp_from_features(const Tensor<T>& queries, const Tensor<T>& feat_a, const Tensor<T>& feat_b,
                            const ParamSet<T>& ps, const ModelConfig& c) {
  const std::size_t q = queries.dim(0), n = c.d_model;
  const Tensor<T> ones = Tensor<T>::full({q, 1}, T(1));
  const Tensor<T> la = matmul(ones, reshape(global_max_pool(feat_a), {1, n}));
  const Tensor<T> lb = matmul(ones, reshape(global_max_pool(feat_b), {1, n}));
  const Tensor<T> in = concat(concat(pos_encode(queries, n, c.pos_mode), la, 1), lb, 1);
  return coordinate_mlp(in, ps, "mlp");
}

/// Backbone maps of one image pair, reusable for both matching directions.
template <class T>
struct PairFeatures {
  Tensor<T> a;
  Tensor<T> b;
};

/// Per-direction state: encoded context (transformer) or raw maps (MLP).
template <class T>
struct DirectionState {
  Tensor<T> memory;
  Tensor<T> feat_src;
  Tensor<T> feat_dst;
};

template <class T>
DirectionState<T> prepare_direction(const Tensor<T>& feat_src, const Tensor<T>& feat_dst, const ParamSet<T>& ps,
                                    const ModelConfig& c) {
  if (c.arch == Architecture::kMlp) return {{}, feat_src, feat_dst};
  return {encode_context(context_from_features(feat_src, feat_dst, c), ps, c), feat_src, feat_dst};
}

template <class T>
Tensor<T> predict(const Tensor<T>& queries, const DirectionState<T>& dir, const ParamSet<T>& ps,
                  const ModelConfig& c) {
  if (c.arch == Architecture::kMlp) return mlp_from_features(queries, dir.feat_src, dir.feat_dst, ps, c);
  return decode_queries(queries, dir.memory, ps, c);
}

/// F(x | I, I') for a batch of queries in the unit square of I.
template <class T>
Tensor<T> forward_correspondence(const Tensor<T>& queries, const Tensor<T>& image_a, const Tensor<T>& image_b,
                                 const ParamSet<T>& ps, const ModelConfig& c) {
  if (queries.rank() != 2 || queries.dim(1) != 2) throw ShapeError("queries must be Q×2");
  const Tensor<T> fa = backbone(image_a, ps, c);
  const Tensor<T> fb = backbone(image_b, ps, c);
  return predict(queries, prepare_direction(fa, fb, ps, c), ps, c);
}

template <class T>
std::vector<Vec2> forward_correspondence(std::span<const Vec2> queries, const Tensor<T>& image_a,
                                         const Tensor<T>& image_b, const ParamSet<T>& ps, const ModelConfig& c) {
  if (queries.empty()) throw std::invalid_argument("forward_correspondence: empty query list");
  const Tensor<T> out = forward_correspondence(points_tensor<T>(queries), image_a, image_b, ps, c);
  std::vector<Vec2> r(queries.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = {double(out[2 * i]), double(out[2 * i + 1])};
  return r;
}

template <class T>
std::vector<Vec2> forward_mlp_variant(std::span<const Vec2> queries, const Tensor<T>& image_a,
                                      const Tensor<T>& image_b, const ParamSet<T>& ps, const ModelConfig& c) {
  ModelConfig mc = c;
  mc.arch = Architecture::kMlp;
  return forward_correspondence(queries, image_a, image_b, ps, mc);
}

/// Configuration plus trained parameters.
struct Model {
  ModelConfig config;
  ParamSet<float> params;
};

}  // namespace cotr
