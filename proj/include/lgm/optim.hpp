#pragma once

#include <cstdint>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm {

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // created lazily on the first step
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update. grads[i] may be null for parameters that
// received no gradient; their moments still decay as if g = 0.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state);

}  // namespace lgm
