#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "cotr/tensor.hpp"

namespace cotr {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates per parameter name.
template <class T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update at iteration `step` (1-based). Parameters
/// for which `frozen` returns true keep their values and moments. Returns the
/// updated parameters as fresh leaves; the inputs are not modified.
template <class T>
ParamSet<T> adam_update(const ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                        AdamState<T>& state, const AdamHyper& hp, std::uint64_t step,
                        const std::function<bool(const std::string&)>& frozen = {}) {
  if (step == 0) throw std::invalid_argument("adam_update: step must be >= 1");
  const double c1 = 1.0 - std::pow(hp.beta1, double(step));
  const double c2 = 1.0 - std::pow(hp.beta2, double(step));
  ParamSet<T> out;
  for (const auto& [name, p] : params) {
    if (frozen && frozen(name)) {
      out.emplace(name, p);
      continue;
    }
    auto git = grads.find(name);
    if (git == grads.end()) throw ShapeError("adam_update: no gradient for parameter " + name);
    const Tensor<T>& g = git->second;
    if (g.shape() != p.shape()) {
      throw ShapeError("adam_update: gradient shape " + shape_str(g.shape()) + " does not match " +
                       name + " " + shape_str(p.shape()));
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (!m.defined()) m = Tensor<T>::zeros(p.shape());
    if (!v.defined()) v = Tensor<T>::zeros(p.shape());
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("adam_update: optimizer state shape mismatch for " + name);
    }
    const std::size_t n = p.numel();
    std::vector<T> pv(p.vec()), mv(m.vec()), vv(v.vec());
    for (std::size_t i = 0; i < n; ++i) {
      const T gi = g[i];
      mv[i] = T(hp.beta1) * mv[i] + T(1.0 - hp.beta1) * gi;
      vv[i] = T(hp.beta2) * vv[i] + T(1.0 - hp.beta2) * gi * gi;
      const T mhat = mv[i] / T(c1);
      const T vhat = vv[i] / T(c2);
      pv[i] -= T(hp.lr) * mhat / (std::sqrt(vhat) + T(hp.eps));
    }
    m = Tensor<T>(p.shape(), std::move(mv));
    v = Tensor<T>(p.shape(), std::move(vv));
    out.emplace(name, Tensor<T>(p.shape(), std::move(pv), p.requires_grad()));
  }
  state.step = step;
  return out;
}

}  // namespace cotr
