#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cotr/ops.hpp"
#include "cotr/tensor.hpp"

namespace cotr {

/// Central-difference estimate of d loss_fn / d x, one element at a time.
inline Tensor<double> finite_difference_gradient(const std::function<double(const Tensor<double>&)>& loss_fn,
                                                 const Tensor<double>& x, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  std::vector<double> probe(x.vec());
  std::vector<double> grad(probe.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = loss_fn(Tensor<double>(x.shape(), probe));
    probe[i] = orig - h;
    const double fm = loss_fn(Tensor<double>(x.shape(), probe));
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor<double>(x.shape(), std::move(grad));
}

/// ‖a − b‖ / max(‖a‖, ‖b‖); zero when both vectors vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  if (denom < 1e-300) return 0.0;
  return std::sqrt(diff) / denom;
}

struct GradCheckResult {
  std::string name;
  int cases = 0;
  double max_rel_error = 0;
  bool passed = false;
};

namespace detail {

using Program = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Worst relative error of backward() against central differences for
/// loss = Σ w ⊙ program(inputs), over every input.
inline double check_program(const Program& program, const std::vector<Tensor<double>>& inputs,
                            std::mt19937_64& rng, double h) {
  std::vector<Tensor<double>> leaves;
  for (const auto& in : inputs) leaves.push_back(in.detach(true));
  const Tensor<double> probe = program(leaves);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> w(probe.numel());
  for (auto& v : w) v = nd(rng);
  const Tensor<double> weights(probe.shape(), w);

  const Gradients<double> grads = backward(sum(multiply(program(leaves), weights)));
  double worst = 0;
  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    auto loss_fn = [&](const Tensor<double>& x) {
      std::vector<Tensor<double>> args = inputs;
      args[idx] = x;
      return sum(multiply(program(args), weights)).item();
    };
    const Tensor<double> fd = finite_difference_gradient(loss_fn, inputs[idx], h);
    const Tensor<double> an = grads.of(leaves[idx]);
    worst = std::max(worst, relative_error(an.data(), fd.data()));
  }
  return worst;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double away_from_zero = 0.0) {
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) {
    do x = ud(rng);
    while (std::abs(x) < away_from_zero);
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace detail

/// Runs every primitive against the finite-difference oracle on `cases`
/// random shapes each (64-bit, central differences with step h).
inline std::vector<GradCheckResult> check_all_primitives(std::uint64_t seed = 7, int cases = 10,
                                                         double h = 1e-4, double tol = 1e-4) {
  std::mt19937_64 rng(seed);
  auto dim = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  using detail::random_tensor;
  using Inputs = std::vector<Tensor<double>>;
  struct Case {
    std::string name;
    std::function<std::pair<detail::Program, Inputs>()> make;
  };
  std::vector<Case> suite = {
      {"add",
       [&] {
         Shape s{dim(1, 4), dim(1, 5)};
         const bool bcast = dim(0, 1) == 1;
         Shape sb = bcast ? Shape{s[1]} : s;
         return std::pair{detail::Program([](const Inputs& in) { return add(in[0], in[1]); }),
                          Inputs{random_tensor(s, rng), random_tensor(sb, rng)}};
       }},
      {"subtract",
       [&] {
         Shape s{dim(1, 4), dim(1, 5)};
         Shape sb = dim(0, 1) ? Shape{1} : s;
         return std::pair{detail::Program([](const Inputs& in) { return subtract(in[0], in[1]); }),
                          Inputs{random_tensor(s, rng), random_tensor(sb, rng)}};
       }},
      {"multiply",
       [&] {
         Shape s{dim(1, 3), dim(1, 4), dim(1, 3)};
         Shape sb = dim(0, 1) ? Shape{s[2]} : s;
         return std::pair{detail::Program([](const Inputs& in) { return multiply(in[0], in[1]); }),
                          Inputs{random_tensor(s, rng), random_tensor(sb, rng)}};
       }},
      {"matmul",
       [&] {
         const std::size_t m = dim(1, 6), k = dim(1, 5), n = dim(1, 6);
         if (dim(0, 1)) {
           const std::size_t b = dim(1, 3);
           return std::pair{detail::Program([](const Inputs& in) { return matmul(in[0], in[1]); }),
                            Inputs{random_tensor({b, m, k}, rng), random_tensor({b, k, n}, rng)}};
         }
         return std::pair{detail::Program([](const Inputs& in) { return matmul(in[0], in[1]); }),
                          Inputs{random_tensor({m, k}, rng), random_tensor({k, n}, rng)}};
       }},
      {"conv2d",
       [&] {
         const std::size_t stride = dim(1, 2);
         const std::size_t ks = dim(0, 1) ? 3 : 1;
         const std::size_t h = 2 * dim(1, 3), w = 2 * dim(1, 3), cin = dim(1, 3), cout = dim(1, 3);
         return std::pair{
             detail::Program([stride](const Inputs& in) { return conv2d(in[0], in[1], stride); }),
             Inputs{random_tensor({h, w, cin}, rng), random_tensor({ks, ks, cin, cout}, rng)}};
       }},
      {"relu",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return relu(in[0]); }),
                          Inputs{random_tensor({dim(1, 5), dim(1, 5)}, rng, 1e-2)}};
       }},
      {"softmax",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return softmax(in[0]); }),
                          Inputs{random_tensor({dim(1, 4), dim(1, 6)}, rng)}};
       }},
      {"layer_norm",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return layer_norm(in[0]); }),
                          Inputs{random_tensor({dim(1, 4), dim(2, 7)}, rng)}};
       }},
      {"concat",
       [&] {
         const std::size_t axis = dim(0, 2);
         Shape a{dim(1, 3), dim(1, 3), dim(1, 3)};
         Shape b = a;
         b[axis] = dim(1, 3);
         return std::pair{detail::Program([axis](const Inputs& in) { return concat(in[0], in[1], axis); }),
                          Inputs{random_tensor(a, rng), random_tensor(b, rng)}};
       }},
      {"slice",
       [&] {
         Shape s{dim(1, 4), dim(2, 5), dim(1, 3)};
         const std::size_t axis = dim(0, 2);
         const std::size_t start = dim(0, s[axis] - 1);
         const std::size_t len = dim(1, s[axis] - start);
         return std::pair{detail::Program([=](const Inputs& in) { return slice(in[0], axis, start, len); }),
                          Inputs{random_tensor(s, rng)}};
       }},
      {"reshape",
       [&] {
         const std::size_t a = dim(1, 4), b = dim(1, 4), c = dim(1, 4);
         return std::pair{detail::Program([=](const Inputs& in) { return reshape(in[0], {a * b, c}); }),
                          Inputs{random_tensor({a, b, c}, rng)}};
       }},
      {"transpose",
       [&] {
         std::vector<std::size_t> perm{0, 1, 2};
         std::shuffle(perm.begin(), perm.end(), rng);
         return std::pair{detail::Program([perm](const Inputs& in) { return transpose(in[0], perm); }),
                          Inputs{random_tensor({dim(1, 4), dim(1, 4), dim(1, 4)}, rng)}};
       }},
      {"mean",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return mean(in[0]); }),
                          Inputs{random_tensor({dim(1, 5), dim(1, 5)}, rng)}};
       }},
      {"sum",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return sum(in[0]); }),
                          Inputs{random_tensor({dim(1, 5), dim(1, 5)}, rng)}};
       }},
      {"squared_l2",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return squared_l2(in[0]); }),
                          Inputs{random_tensor({dim(1, 5), dim(1, 5)}, rng)}};
       }},
      {"max_pool",
       [&] {
         return std::pair{detail::Program([](const Inputs& in) { return global_max_pool(in[0]); }),
                          Inputs{random_tensor({dim(1, 4), dim(1, 4), dim(1, 4)}, rng)}};
       }},
      {"pos_encode",
       [&] {
         const std::size_t ch = 4 * dim(1, 4);
         const auto mode = dim(0, 1) ? PosEncoding::kLinear : PosEncoding::kLogLinear;
         return std::pair{detail::Program([=](const Inputs& in) { return pos_encode(in[0], ch, mode); }),
                          Inputs{random_tensor({dim(1, 5), 2}, rng)}};
       }},
  };

  std::vector<GradCheckResult> results;
  for (const auto& c : suite) {
    GradCheckResult r{c.name, cases, 0.0, true};
    for (int i = 0; i < cases; ++i) {
      auto [program, inputs] = c.make();
      r.max_rel_error = std::max(r.max_rel_error, detail::check_program(program, inputs, rng, h));
    }
    r.passed = r.max_rel_error <= tol;
    results.push_back(r);
  }
  return results;
}

}  // namespace cotr
