#include "lgm/optim.hpp"

#include <cmath>

#include "lgm/errors.hpp"

namespace lgm {

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state was created for another parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].shape() != params[i]->shape() || (grads[i] && grads[i]->shape() != params[i]->shape())) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i] ? static_cast<double>((*grads[i])[k]) : 0.0;
      const double mk = state.beta1 * m[k] + (1 - state.beta1) * g;
      const double vk = state.beta2 * v[k] + (1 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      p[k] = static_cast<T>(p[k] - state.lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps));
    }
  }
}

template void adam_step(const std::vector<Tensor<float>*>&, const std::vector<const Tensor<float>*>&,
                        AdamState<float>&);
template void adam_step(const std::vector<Tensor<double>*>&, const std::vector<const Tensor<double>*>&,
                        AdamState<double>&);

}  // namespace lgm
