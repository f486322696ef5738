#pragma once

// Building blocks of the network. Blocks only hold indices into a ParamSet;
// create() allocates their tensors (zero-filled, see init_weights for real
// values), forward() runs on a tape, cost() reports MACs and parameters.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lgm/autograd.hpp"
#include "lgm/npt.hpp"
#include "lgm/params.hpp"

namespace lgm {

// One row of a cost breakdown. MACs are per image (batch 1).
struct LayerCost {
  std::string name;
  std::string kind;  // "conv", "deconv" or "token_mixing"
  std::int64_t macs = 0;
  std::int64_t params = 0;
  Shape output;  // C,H,W
};
using CostLog = std::vector<LayerCost>;

enum class InitKind { fan_in_uniform, ones, zeros };

struct ParamInfo {
  std::size_t index;
  InitKind init;
  std::int64_t fan_in;
};

// Initialization plan shared by all blocks of a model.
using InitPlan = std::vector<ParamInfo>;

// ---- primitive layers ------------------------------------------------------

struct ConvSpec {
  std::int64_t in = 0;
  std::int64_t out = 0;
  std::int64_t kernel = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool bias = false;
};

struct Conv2dLayer {
  std::string name;
  ConvSpec spec;
  std::size_t weight = 0;
  std::optional<std::size_t> bias;

  template <typename T>
  static Conv2dLayer create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, ConvSpec spec);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  Shape cost(const Shape& in, CostLog& log) const;
  std::int64_t param_count() const;
};

struct BatchNormLayer {
  std::string name;
  std::int64_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  std::size_t gamma = 0, beta = 0, running_mean = 0, running_var = 0;

  template <typename T>
  static BatchNormLayer create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                               std::int64_t channels, double eps, double momentum);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

// conv (no bias) -> batch norm -> optional relu6.
struct ConvBnAct {
  Conv2dLayer conv;
  BatchNormLayer bn;
  bool act = true;

  template <typename T>
  static ConvBnAct create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, ConvSpec spec,
                          bool act, double bn_eps, double bn_momentum);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  Shape cost(const Shape& in, CostLog& log) const;
};

struct LinearLayer {
  std::string name;
  std::int64_t in = 0, out = 0;
  std::size_t weight = 0, bias = 0;

  template <typename T>
  static LinearLayer create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                            std::int64_t in, std::int64_t out);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

// ---- token-mixing MLP ------------------------------------------------------

// y = x + fc2(gelu(fc1(layer_norm(x)))) over the last axis of extent L.
// Closed form: 2L (norm) + (L*H + H) + (H*L + L) with H = ratio * L.
struct MlpBlock {
  std::string name;
  std::int64_t dim = 0;
  std::int64_t hidden = 0;
  double ln_eps = 1e-5;
  std::size_t ln_gamma = 0, ln_beta = 0;
  LinearLayer fc1, fc2;

  template <typename T>
  static MlpBlock create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, std::int64_t dim,
                         std::int64_t ratio);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  // MACs for `rows` independent slices.
  std::int64_t macs(std::int64_t rows) const { return rows * 2 * dim * hidden; }
  static std::int64_t closed_form_params(std::int64_t dim, std::int64_t ratio) {
    const std::int64_t h = ratio * dim;
    return 2 * dim + dim * h + h + h * dim + dim;
  }
};

// Global mixing on a d x H x W map: unfold to (P, d, N), mix across patches
// (axis N), swap to (N, d, P), mix inside patches (axis P), fold back.
struct Larm {
  std::string name;
  npt::PatchDims dims;
  MlpBlock inter_patch;  // mixes N
  MlpBlock intra_patch;  // mixes P

  template <typename T>
  static Larm create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                     const npt::PatchDims& dims, std::int64_t ratio);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  void cost(CostLog& log) const;
  static std::int64_t closed_form_params(std::int64_t P, std::int64_t N, std::int64_t ratio) {
    return MlpBlock::closed_form_params(N, ratio) + MlpBlock::closed_form_params(P, ratio);
  }
};

// 3x3 local conv (C->C) -> relu6 -> 1x1 projection (C->d) -> LARM -> 1x1
// back-projection (d->C) -> relu6 -> concat(input, global) -> 3x3 fusion
// conv (2C->C). All convolutions carry a bias and no normalization.
struct MobileVim {
  std::string name;
  std::int64_t channels = 0;
  std::int64_t dim = 0;
  Conv2dLayer local, project, back, fuse;
  Larm larm;

  template <typename T>
  static MobileVim create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                          std::int64_t channels, std::int64_t dim, const npt::PatchDims& dims,
                          std::int64_t ratio);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  Shape cost(const Shape& in, CostLog& log) const;
  // 9C^2+C + Cd+d + LARM + dC+C + 18C^2+C
  static std::int64_t closed_form_params(std::int64_t C, std::int64_t d, std::int64_t P,
                                         std::int64_t N, std::int64_t ratio) {
    return (9 * C * C + C) + (C * d + d) + Larm::closed_form_params(P, N, ratio) + (d * C + C) +
           (9 * 2 * C * C + C);
  }
};

// MobileNetV2 block: [1x1 expand -> BN -> relu6] -> 3x3 depthwise (stride s)
// -> BN -> relu6 -> 1x1 project -> BN, plus identity skip when stride == 1
// and C_in == C_out. The expand stage is omitted for expansion 1.
struct InvertedResidual {
  std::string name;
  std::int64_t in = 0, out = 0, expansion = 1;
  int stride = 1;
  std::optional<ConvBnAct> expand;
  ConvBnAct depthwise;
  ConvBnAct project;
  bool residual = false;

  template <typename T>
  static InvertedResidual create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                 std::int64_t in, std::int64_t out, int stride,
                                 std::int64_t expansion, double bn_eps, double bn_momentum);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  Shape cost(const Shape& in, CostLog& log) const;
  static std::int64_t closed_form_params(std::int64_t in, std::int64_t out, std::int64_t t) {
    const std::int64_t hid = in * t;
    const std::int64_t expand = t == 1 ? 0 : in * hid + 2 * hid;
    return expand + (9 * hid + 2 * hid) + (hid * out + 2 * out);
  }
};

// 4x4 stride-2 pad-1 transposed conv (no bias) -> BN -> relu6.
struct DeconvStage {
  std::string name;
  std::int64_t in = 0, out = 0;
  int kernel = 4, stride = 2, padding = 1;
  std::size_t weight = 0;
  BatchNormLayer bn;

  template <typename T>
  static DeconvStage create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                            std::int64_t in, std::int64_t out, double bn_eps, double bn_momentum);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  Shape cost(const Shape& in_shape, CostLog& log) const;
  static std::int64_t closed_form_params(std::int64_t in, std::int64_t out) {
    return in * out * 16 + 2 * out;
  }
};

// ---- channel shuffle and fusion --------------------------------------------

// View C as (n, C/n), transpose, flatten: output channel j*n+i takes input
// channel i*(C/n)+j.
std::vector<std::int64_t> channel_shuffle_order(std::int64_t channels, std::int64_t groups);

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::int64_t groups);
template <typename T>
Var<T> channel_shuffle(const Var<T>& x, std::int64_t groups);

enum class FusionKind { none, conv3x3, dw_separable, sfusion };

struct FusionMode {
  FusionKind kind = FusionKind::sfusion;
  std::int64_t shuffle_groups = 2;  // n
  std::int64_t conv_groups = 2;     // k
};

const char* to_string(FusionKind kind);
FusionKind fusion_kind_from_string(const std::string& s);

// Fuses a deconvolution output with the same-resolution skip feature.
//   none          up unchanged
//   conv3x3       concat -> dense 3x3 conv
//   dw_separable  concat -> depthwise 3x3 -> 1x1 pointwise with k groups
//   sfusion       concat -> channel_shuffle(n) -> 3x3 conv with k groups
// Convolutions carry a bias except the depthwise stage.
struct Fusion {
  std::string name;
  FusionMode mode;
  std::int64_t up_channels = 0, skip_channels = 0, out_channels = 0;
  std::optional<Conv2dLayer> conv;       // conv3x3 / sfusion
  std::optional<Conv2dLayer> depthwise;  // dw_separable
  std::optional<Conv2dLayer> pointwise;  // dw_separable

  template <typename T>
  static Fusion create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, FusionMode mode,
                       std::int64_t up_channels, std::int64_t skip_channels,
                       std::int64_t out_channels);
  template <typename T>
  Var<T> forward(Context<T>& ctx, const Var<T>& up, const Var<T>& skip) const;
  Shape cost(const Shape& up, CostLog& log) const;
  static std::int64_t closed_form_params(FusionMode mode, std::int64_t up, std::int64_t skip,
                                         std::int64_t out);
};

}  // namespace lgm
