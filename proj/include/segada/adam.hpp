#pragma once

// Adam with bias correction, over a list of named parameter tensors.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "segada/tensor.hpp"

namespace segada {

template <class T>
struct AdamState {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  long long t = 0;
  std::vector<std::vector<T>> m, v;  // one slot per parameter, same shape

  void ensure_slots(const std::vector<Tensor<T>>& params) {
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].size(), T(0));
        v[i].assign(params[i].size(), T(0));
      }
    }
    if (m.size() != params.size())
      throw std::invalid_argument("adam state does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i)
      if (m[i].size() != params[i].size())
        throw std::invalid_argument("adam moment shape does not match parameter");
  }
};

// One optimizer step: p <- p - lr * m_hat / (sqrt(v_hat) + eps).
// grads[i] == nullptr is treated as an all-zero gradient.
template <class T>
void adam_step(std::vector<Tensor<T>>& params,
               const std::vector<std::string>& names,
               const std::vector<const std::vector<T>*>& grads,
               AdamState<T>& state, T lr) {
  if (params.size() != grads.size() || params.size() != names.size())
    throw std::invalid_argument("adam_step: params/names/grads size mismatch");
  state.ensure_slots(params);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(double(state.beta1), double(state.t));
  const double bc2 = 1.0 - std::pow(double(state.beta2), double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<T>* g = grads[i];
    if (g && g->size() != params[i].size())
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + names[i]);
    if (g && !detail::all_finite(g->data(), g->size()))
      throw std::runtime_error("adam_step: non-finite gradient for parameter " + names[i]);
    T* p = params[i].ptr();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const std::size_t n = params[i].size();
    for (std::size_t j = 0; j < n; ++j) {
      const T gj = g ? (*g)[j] : T(0);
      m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * gj * gj;
      const T mhat = m[j] / T(bc1);
      const T vhat = v[j] / T(bc2);
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace segada
