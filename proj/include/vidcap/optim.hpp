#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "vidcap/autodiff.hpp"
#include "vidcap/error.hpp"

namespace vidcap {

template <typename T>
struct AdamState {
  std::uint64_t step_count = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update using the gradients stored in each Parameter.
/// Moments are allocated on the first call. Non-finite gradients are
/// rejected before anything is modified.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("adam: learning rate must be finite and >= 0");
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->value.rows(), p->value.cols());
      state.second_moment.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, given " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (!same_shape(p->grad, p->value) || !same_shape(state.first_moment[i], p->value)) {
      throw ShapeError("adam: shape mismatch for " + p->name + " " + p->value.shape_str());
    }
    if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient in " + p->name);
  }

  ++state.step_count;
  const double t = double(state.step_count);
  const T b1 = T(state.beta1), b2 = T(state.beta2), eps = T(state.epsilon);
  const T c1 = T(1.0 - std::pow(state.beta1, t));
  const T c2 = T(1.0 - std::pow(state.beta2, t));
  const T step = T(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const T g = p.grad[k];
      m[k] = b1 * m[k] + (T{1} - b1) * g;
      v[k] = b2 * v[k] + (T{1} - b2) * g * g;
      const T mhat = m[k] / c1;
      const T vhat = v[k] / c2;
      p.value[k] -= step * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
double global_grad_norm(std::span<Parameter<T>* const> params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->grad.values()) sq += double(g) * double(g);
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const T s = T(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad.values()) g *= s;
  }
  return norm;
}

template <typename T>
void zero_grads(std::span<Parameter<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace vidcap
