#pragma once

// Compares tape gradients of a block against central finite differences.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lgm/autograd.hpp"
#include "lgm/params.hpp"

namespace lgm {

// Builds the block output from bound inputs.
using GradCheckFn = std::function<Var<double>(Context<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_rel_err = 0;  // over all checked tensors
  std::string worst;       // name of the tensor with the largest error
  std::size_t checked = 0; // number of scalar entries compared
  // Entries whose difference quotients at h and h/2 disagree beyond rounding,
  // i.e. a kink (relu6 clip) lies inside the stencil and the comparison there
  // says nothing about the analytic gradient.
  std::size_t nonsmooth = 0;
};

// Loss = sum(y * r) with a fixed random r. Every input and every trainable
// parameter is checked against fourth-order central differences. Per tensor
// the error is max|analytic - numeric| / max(max|numeric|, 1e-3 G, 1e-6),
// where G is the largest numeric gradient entry of the whole check, so a
// tensor with an identically zero gradient is judged at the block's scale
// rather than at the rounding noise of the difference quotient. In train_norm mode running statistics go to a
// scratch copy of the parameters.
GradCheckResult grad_check(const GradCheckFn& f, const ParamSet<double>& params,
                           const std::vector<Tensor<double>>& inputs, bool train_norm, std::uint64_t seed,
                           double h = 1e-5);

}  // namespace lgm
