#pragma once

// Parameter-free layout transforms around the token-mixing MLPs.
//
// op1: d x H x W  -> P x d x N   (unfold into patches)
// op2: P x d x N  -> N x d x P   (swap the patch and pixel axes)
// op3: N x d x P  -> d x H x W   (fold back)
//
// Index map (row-major patch grid, row-major pixels inside a patch):
//   n = (y / h) * (W / w) + (x / w),   p = (y % h) * w + (x % w)
//   op1(x)[p, c, n] == x[c, y, x]

#include <cstdint>
#include <memory>
#include <vector>

#include "lgm/autograd.hpp"
#include "lgm/tensor.hpp"

namespace lgm::npt {

struct PatchDims {
  std::int64_t H = 0;  // extents tiled by patches (after any padding)
  std::int64_t W = 0;
  std::int64_t d = 0;
  std::int64_t h = 1;
  std::int64_t w = 1;
  std::int64_t src_H = 0;  // extents of the feature map before padding
  std::int64_t src_W = 0;
  std::int64_t pad_top = 0;
  std::int64_t pad_left = 0;

  // Throws ShapeError when h or w does not divide the extents, unless
  // allow_padding is set; then the map is zero-padded symmetrically (odd
  // remainders go to the bottom/right) and the padding is dropped by op3.
  static PatchDims make(std::int64_t H, std::int64_t W, std::int64_t d, std::int64_t h,
                        std::int64_t w, bool allow_padding = false);

  std::int64_t P() const { return h * w; }
  std::int64_t grid_h() const { return H / h; }
  std::int64_t grid_w() const { return W / w; }
  std::int64_t N() const { return grid_h() * grid_w(); }
  bool padded() const { return H != src_H || W != src_W; }
};

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

// Gather maps for a batch of `batch` feature maps; -1 marks zero padding.
IndexMap op1_index(const PatchDims& dims, std::int64_t batch = 1);
IndexMap op2_index(std::int64_t a, std::int64_t d, std::int64_t b, std::int64_t batch = 1);
IndexMap op3_index(const PatchDims& dims, std::int64_t batch = 1);

// Tensor forms accept d x H x W (resp. P x d x N, N x d x P) or a leading
// batch axis.
template <typename T>
Tensor<T> npt_op1(const Tensor<T>& x, const PatchDims& dims);
template <typename T>
Tensor<T> npt_op2(const Tensor<T>& u);
template <typename T>
Tensor<T> npt_op3(const Tensor<T>& g, const PatchDims& dims);

// Differentiable forms on batched tensors (B, ...).
template <typename T>
Var<T> npt_op1(const Var<T>& x, const PatchDims& dims);
template <typename T>
Var<T> npt_op2(const Var<T>& u);
template <typename T>
Var<T> npt_op3(const Var<T>& g, const PatchDims& dims);

namespace testing {
// Negative-control hook: while enabled, op1 swaps its first two index
// entries so the op1 -> op2 -> op3 chain is no longer the identity.
void set_corrupt_index_map(bool enabled);
bool corrupt_index_map();
}  // namespace testing

}  // namespace lgm::npt
