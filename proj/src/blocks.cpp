#include "lgm/blocks.hpp"

#include <numeric>
#include <stdexcept>

#include "lgm/kernels.hpp"

namespace lgm {
namespace {

Shape chw(std::int64_t c, std::int64_t h, std::int64_t w) { return {c, h, w}; }

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

// ---- Conv2dLayer -------------------------------------------------------------

template <typename T>
Conv2dLayer Conv2dLayer::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                ConvSpec spec) {
  require(spec.groups >= 1 && spec.in % spec.groups == 0 && spec.out % spec.groups == 0,
          name + ": channels " + std::to_string(spec.in) + "->" + std::to_string(spec.out) +
              " not divisible by groups " + std::to_string(spec.groups));
  Conv2dLayer l;
  l.name = name;
  l.spec = spec;
  const std::int64_t fan_in = spec.in / spec.groups * spec.kernel * spec.kernel;
  l.weight = ps.add(name + ".weight", Tensor<T>({spec.out, spec.in / spec.groups, spec.kernel, spec.kernel}));
  plan.push_back({l.weight, InitKind::fan_in_uniform, fan_in});
  if (spec.bias) {
    l.bias = ps.add(name + ".bias", Tensor<T>({spec.out}));
    plan.push_back({*l.bias, InitKind::zeros, fan_in});
  }
  return l;
}

template <typename T>
Var<T> Conv2dLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  std::optional<Var<T>> b;
  if (bias) b = ctx.param(*bias);
  return conv2d(x, ctx.param(weight), b, kernels::ConvOptions{spec.stride, spec.padding, spec.groups});
}

Shape Conv2dLayer::cost(const Shape& in, CostLog& log) const {
  require(in.size() == 3 && in[0] == spec.in,
          name + ": expected " + std::to_string(spec.in) + " input channels, got " + shape_str(in));
  const std::int64_t ho = kernels::conv_out_extent(in[1], spec.kernel, spec.stride, spec.padding);
  const std::int64_t wo = kernels::conv_out_extent(in[2], spec.kernel, spec.stride, spec.padding);
  Shape out = chw(spec.out, ho, wo);
  log.push_back({name, "conv", spec.out * (spec.in / spec.groups) * spec.kernel * spec.kernel * ho * wo,
                 param_count(), out});
  return out;
}

std::int64_t Conv2dLayer::param_count() const {
  return spec.out * (spec.in / spec.groups) * spec.kernel * spec.kernel + (spec.bias ? spec.out : 0);
}

// ---- BatchNormLayer ----------------------------------------------------------

template <typename T>
BatchNormLayer BatchNormLayer::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                      std::int64_t channels, double eps, double momentum) {
  BatchNormLayer l;
  l.name = name;
  l.channels = channels;
  l.eps = eps;
  l.momentum = momentum;
  l.gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T{1}));
  l.beta = ps.add(name + ".beta", Tensor<T>({channels}));
  l.running_mean = ps.add(name + ".running_mean", Tensor<T>({channels}), false);
  l.running_var = ps.add(name + ".running_var", Tensor<T>({channels}, T{1}), false);
  plan.push_back({l.gamma, InitKind::ones, 0});
  plan.push_back({l.beta, InitKind::zeros, 0});
  plan.push_back({l.running_mean, InitKind::zeros, 0});
  plan.push_back({l.running_var, InitKind::ones, 0});
  return l;
}

template <typename T>
Var<T> BatchNormLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  if (ctx.mode().train_norm) {
    ParamSet<T>& state = *ctx.state();
    return batch_norm2d(x, ctx.param(gamma), ctx.param(beta), state[running_mean], state[running_var],
                        eps, momentum, true);
  }
  Tensor<T> rm = ctx.params()[running_mean];
  Tensor<T> rv = ctx.params()[running_var];
  return batch_norm2d(x, ctx.param(gamma), ctx.param(beta), rm, rv, eps, momentum, false);
}

// ---- ConvBnAct ---------------------------------------------------------------

template <typename T>
ConvBnAct ConvBnAct::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, ConvSpec spec,
                            bool act, double bn_eps, double bn_momentum) {
  spec.bias = false;
  ConvBnAct l;
  l.conv = Conv2dLayer::create(ps, plan, name + ".conv", spec);
  l.bn = BatchNormLayer::create(ps, plan, name + ".bn", spec.out, bn_eps, bn_momentum);
  l.act = act;
  return l;
}

template <typename T>
Var<T> ConvBnAct::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> y = bn.forward(ctx, conv.forward(ctx, x));
  return act ? activation(y, kernels::Activation::relu6) : y;
}

Shape ConvBnAct::cost(const Shape& in, CostLog& log) const {
  Shape out = conv.cost(in, log);
  log.back().params += 2 * bn.channels;
  return out;
}

// ---- LinearLayer -------------------------------------------------------------

template <typename T>
LinearLayer LinearLayer::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                std::int64_t in, std::int64_t out) {
  LinearLayer l;
  l.name = name;
  l.in = in;
  l.out = out;
  l.weight = ps.add(name + ".weight", Tensor<T>({out, in}));
  l.bias = ps.add(name + ".bias", Tensor<T>({out}));
  plan.push_back({l.weight, InitKind::fan_in_uniform, in});
  plan.push_back({l.bias, InitKind::zeros, in});
  return l;
}

template <typename T>
Var<T> LinearLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  return linear(x, ctx.param(weight), std::optional<Var<T>>(ctx.param(bias)));
}

// ---- MlpBlock ----------------------------------------------------------------

template <typename T>
MlpBlock MlpBlock::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, std::int64_t dim,
                          std::int64_t ratio) {
  if (ratio < 1) throw ShapeError(name + ": expansion ratio must be >= 1");
  MlpBlock b;
  b.name = name;
  b.dim = dim;
  b.hidden = ratio * dim;
  b.ln_gamma = ps.add(name + ".norm.gamma", Tensor<T>({dim}, T{1}));
  b.ln_beta = ps.add(name + ".norm.beta", Tensor<T>({dim}));
  plan.push_back({b.ln_gamma, InitKind::ones, 0});
  plan.push_back({b.ln_beta, InitKind::zeros, 0});
  b.fc1 = LinearLayer::create(ps, plan, name + ".fc1", dim, b.hidden);
  b.fc2 = LinearLayer::create(ps, plan, name + ".fc2", b.hidden, dim);
  return b;
}

template <typename T>
Var<T> MlpBlock::forward(Context<T>& ctx, const Var<T>& x) const {
  require(!x.shape().empty() && x.shape().back() == dim,
          name + ": last axis of " + shape_str(x.shape()) + " must be " + std::to_string(dim));
  Var<T> h = layer_norm(x, ctx.param(ln_gamma), ctx.param(ln_beta), ln_eps);
  h = fc1.forward(ctx, h);
  h = activation(h, kernels::Activation::gelu);
  h = fc2.forward(ctx, h);
  return add(x, h);
}

// ---- Larm --------------------------------------------------------------------

template <typename T>
Larm Larm::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, const npt::PatchDims& dims,
                  std::int64_t ratio) {
  Larm l;
  l.name = name;
  l.dims = dims;
  l.inter_patch = MlpBlock::create(ps, plan, name + ".inter", dims.N(), ratio);
  l.intra_patch = MlpBlock::create(ps, plan, name + ".intra", dims.P(), ratio);
  return l;
}

template <typename T>
Var<T> Larm::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> u = npt::npt_op1(x, dims);        // B,P,d,N
  Var<T> f = inter_patch.forward(ctx, u);  // mixes pixels at the same position across patches
  Var<T> g = npt::npt_op2(f);              // B,N,d,P
  Var<T> p = intra_patch.forward(ctx, g);  // mixes pixels inside each patch
  return npt::npt_op3(p, dims);
}

void Larm::cost(CostLog& log) const {
  const std::int64_t P = dims.P(), N = dims.N(), d = dims.d;
  log.push_back({name + ".inter", "token_mixing", inter_patch.macs(P * d),
                 MlpBlock::closed_form_params(N, inter_patch.hidden / N), Shape{P, d, N}});
  log.push_back({name + ".intra", "token_mixing", intra_patch.macs(N * d),
                 MlpBlock::closed_form_params(P, intra_patch.hidden / P), Shape{N, d, P}});
}

// ---- MobileVim ---------------------------------------------------------------

template <typename T>
MobileVim MobileVim::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                            std::int64_t channels, std::int64_t dim, const npt::PatchDims& dims,
                            std::int64_t ratio) {
  if (dims.d != dim) throw ShapeError(name + ": patch dims channel count differs from projection dim");
  MobileVim m;
  m.name = name;
  m.channels = channels;
  m.dim = dim;
  m.local = Conv2dLayer::create(ps, plan, name + ".local", {channels, channels, 3, 1, 1, 1, true});
  m.project = Conv2dLayer::create(ps, plan, name + ".project", {channels, dim, 1, 1, 0, 1, true});
  m.larm = Larm::create(ps, plan, name + ".larm", dims, ratio);
  m.back = Conv2dLayer::create(ps, plan, name + ".back", {dim, channels, 1, 1, 0, 1, true});
  m.fuse = Conv2dLayer::create(ps, plan, name + ".fuse", {2 * channels, channels, 3, 1, 1, 1, true});
  return m;
}

template <typename T>
Var<T> MobileVim::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> h = activation(local.forward(ctx, x), kernels::Activation::relu6);
  h = project.forward(ctx, h);
  h = larm.forward(ctx, h);
  h = activation(back.forward(ctx, h), kernels::Activation::relu6);
  return fuse.forward(ctx, concat_channels(x, h));
}

Shape MobileVim::cost(const Shape& in, CostLog& log) const {
  Shape s = local.cost(in, log);
  s = project.cost(s, log);
  require(s[1] == larm.dims.src_H && s[2] == larm.dims.src_W,
          name + ": feature map " + shape_str(s) + " does not match the LARM patch layout");
  larm.cost(log);
  s = back.cost(s, log);
  return fuse.cost(chw(2 * channels, s[1], s[2]), log);
}

// ---- InvertedResidual --------------------------------------------------------

template <typename T>
InvertedResidual InvertedResidual::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                          std::int64_t in, std::int64_t out, int stride,
                                          std::int64_t expansion, double bn_eps, double bn_momentum) {
  if (stride != 1 && stride != 2) {
    throw ShapeError(name + ": inverted residual stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (expansion < 1) throw ShapeError(name + ": expansion must be >= 1");
  InvertedResidual b;
  b.name = name;
  b.in = in;
  b.out = out;
  b.expansion = expansion;
  b.stride = stride;
  const std::int64_t hid = in * expansion;
  if (expansion != 1) {
    b.expand = ConvBnAct::create(ps, plan, name + ".expand", {in, hid, 1}, true, bn_eps, bn_momentum);
  }
  b.depthwise = ConvBnAct::create(ps, plan, name + ".dw",
                                  {hid, hid, 3, stride, 1, static_cast<int>(hid)}, true, bn_eps,
                                  bn_momentum);
  b.project = ConvBnAct::create(ps, plan, name + ".project", {hid, out, 1}, false, bn_eps, bn_momentum);
  b.residual = stride == 1 && in == out;
  return b;
}

template <typename T>
Var<T> InvertedResidual::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> h = expand ? expand->forward(ctx, x) : x;
  h = depthwise.forward(ctx, h);
  h = project.forward(ctx, h);
  return residual ? add(x, h) : h;
}

Shape InvertedResidual::cost(const Shape& in_shape, CostLog& log) const {
  Shape s = expand ? expand->cost(in_shape, log) : in_shape;
  s = depthwise.cost(s, log);
  return project.cost(s, log);
}

// ---- DeconvStage -------------------------------------------------------------

template <typename T>
DeconvStage DeconvStage::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name,
                                std::int64_t in, std::int64_t out, double bn_eps, double bn_momentum) {
  DeconvStage d;
  d.name = name;
  d.in = in;
  d.out = out;
  d.weight = ps.add(name + ".deconv.weight", Tensor<T>({in, out, d.kernel, d.kernel}));
  plan.push_back({d.weight, InitKind::fan_in_uniform, out * d.kernel * d.kernel});
  d.bn = BatchNormLayer::create(ps, plan, name + ".bn", out, bn_eps, bn_momentum);
  return d;
}

template <typename T>
Var<T> DeconvStage::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> y = conv_transpose2d(x, ctx.param(weight), std::optional<Var<T>>(), stride, padding);
  return activation(bn.forward(ctx, y), kernels::Activation::relu6);
}

Shape DeconvStage::cost(const Shape& in_shape, CostLog& log) const {
  require(in_shape.size() == 3 && in_shape[0] == in,
          name + ": expected " + std::to_string(in) + " input channels, got " + shape_str(in_shape));
  Shape out_shape = chw(out, kernels::deconv_out_extent(in_shape[1], kernel, stride, padding),
                        kernels::deconv_out_extent(in_shape[2], kernel, stride, padding));
  log.push_back({name, "deconv", in * out * kernel * kernel * in_shape[1] * in_shape[2],
                 closed_form_params(in, out), out_shape});
  return out_shape;
}

// ---- channel shuffle ---------------------------------------------------------

std::vector<std::int64_t> channel_shuffle_order(std::int64_t channels, std::int64_t groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(channels) + " channels");
  }
  const std::int64_t per = channels / groups;
  std::vector<std::int64_t> order(static_cast<std::size_t>(channels));
  for (std::int64_t i = 0; i < groups; ++i) {
    for (std::int64_t j = 0; j < per; ++j) order[static_cast<std::size_t>(j * groups + i)] = i * per + j;
  }
  return order;
}

namespace {

std::shared_ptr<const std::vector<std::int64_t>> shuffle_index(const Shape& s, std::int64_t groups) {
  require(s.size() == 4, "channel_shuffle expects N,C,H,W, got " + shape_str(s));
  const auto order = channel_shuffle_order(s[1], groups);
  const std::int64_t plane = s[2] * s[3];
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(shape_numel(s)));
  for (std::int64_t n = 0; n < s[0]; ++n) {
    for (std::int64_t c = 0; c < s[1]; ++c) {
      for (std::int64_t i = 0; i < plane; ++i) {
        (*map)[static_cast<std::size_t>((n * s[1] + c) * plane + i)] =
            (n * s[1] + order[static_cast<std::size_t>(c)]) * plane + i;
      }
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::int64_t groups) {
  if (x.ndim() == 3) {
    const Shape s4{1, x.dim(0), x.dim(1), x.dim(2)};
    return kernels::gather(x, *shuffle_index(s4, groups), x.shape());
  }
  return kernels::gather(x, *shuffle_index(x.shape(), groups), x.shape());
}

template <typename T>
Var<T> channel_shuffle(const Var<T>& x, std::int64_t groups) {
  return gather(x, shuffle_index(x.shape(), groups), x.shape());
}

// ---- Fusion ------------------------------------------------------------------

const char* to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::none:
      return "none";
    case FusionKind::conv3x3:
      return "conv3x3";
    case FusionKind::dw_separable:
      return "dw_separable";
    case FusionKind::sfusion:
      return "sfusion";
  }
  return "?";
}

FusionKind fusion_kind_from_string(const std::string& s) {
  if (s == "none") return FusionKind::none;
  if (s == "conv3x3") return FusionKind::conv3x3;
  if (s == "dw_separable") return FusionKind::dw_separable;
  if (s == "sfusion") return FusionKind::sfusion;
  throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

std::int64_t Fusion::closed_form_params(FusionMode mode, std::int64_t up, std::int64_t skip,
                                        std::int64_t out) {
  const std::int64_t cat = up + skip;
  switch (mode.kind) {
    case FusionKind::none:
      return 0;
    case FusionKind::conv3x3:
      return 9 * cat * out + out;
    case FusionKind::dw_separable:
      return 9 * cat + (cat / mode.conv_groups) * out + out;
    case FusionKind::sfusion:
      return 9 * (cat / mode.conv_groups) * out + out;
  }
  return 0;
}

template <typename T>
Fusion Fusion::create(ParamSet<T>& ps, InitPlan& plan, const std::string& name, FusionMode mode,
                      std::int64_t up_channels, std::int64_t skip_channels, std::int64_t out_channels) {
  const std::int64_t cat = up_channels + skip_channels;
  if (mode.shuffle_groups < 1 || mode.conv_groups < 1) {
    throw ShapeError(name + ": shuffle and conv groups must be >= 1");
  }
  Fusion f;
  f.name = name;
  f.mode = mode;
  f.up_channels = up_channels;
  f.skip_channels = skip_channels;
  f.out_channels = out_channels;
  switch (mode.kind) {
    case FusionKind::none:
      require(out_channels == up_channels,
              name + ": fusion mode none passes the upsampled map through, so output channels (" +
                  std::to_string(out_channels) + ") must equal its channels (" +
                  std::to_string(up_channels) + ")");
      break;
    case FusionKind::conv3x3:
      f.conv = Conv2dLayer::create(ps, plan, name + ".conv", {cat, out_channels, 3, 1, 1, 1, true});
      break;
    case FusionKind::dw_separable:
      require(cat % mode.conv_groups == 0 && out_channels % mode.conv_groups == 0,
              name + ": conv groups " + std::to_string(mode.conv_groups) + " must divide " +
                  std::to_string(cat) + " and " + std::to_string(out_channels));
      f.depthwise = Conv2dLayer::create(ps, plan, name + ".dw",
                                        {cat, cat, 3, 1, 1, static_cast<int>(cat), false});
      f.pointwise = Conv2dLayer::create(
          ps, plan, name + ".pw", {cat, out_channels, 1, 1, 0, static_cast<int>(mode.conv_groups), true});
      break;
    case FusionKind::sfusion:
      require(cat % mode.conv_groups == 0 && out_channels % mode.conv_groups == 0,
              name + ": conv groups " + std::to_string(mode.conv_groups) + " must divide " +
                  std::to_string(cat) + " and " + std::to_string(out_channels));
      require(cat % mode.shuffle_groups == 0, name + ": shuffle groups " +
                                                  std::to_string(mode.shuffle_groups) +
                                                  " must divide " + std::to_string(cat));
      f.conv = Conv2dLayer::create(
          ps, plan, name + ".conv",
          {cat, out_channels, 3, 1, 1, static_cast<int>(mode.conv_groups), true});
      break;
  }
  return f;
}

template <typename T>
Var<T> Fusion::forward(Context<T>& ctx, const Var<T>& up, const Var<T>& skip) const {
  const Shape& a = up.shape();
  const Shape& b = skip.shape();
  require(a.size() == 4 && b.size() == 4 && a[0] == b[0] && a[2] == b[2] && a[3] == b[3],
          name + ": upsampled " + shape_str(a) + " and skip " + shape_str(b) +
              " do not share spatial dimensions");
  if (mode.kind == FusionKind::none) return up;
  Var<T> cat = concat_channels(up, skip);
  switch (mode.kind) {
    case FusionKind::conv3x3:
      return conv->forward(ctx, cat);
    case FusionKind::dw_separable:
      return pointwise->forward(ctx, depthwise->forward(ctx, cat));
    case FusionKind::sfusion:
      return conv->forward(ctx, channel_shuffle(cat, mode.shuffle_groups));
    case FusionKind::none:
      break;
  }
  return up;
}

Shape Fusion::cost(const Shape& up, CostLog& log) const {
  const Shape cat = chw(up_channels + skip_channels, up[1], up[2]);
  switch (mode.kind) {
    case FusionKind::none:
      return up;
    case FusionKind::conv3x3:
    case FusionKind::sfusion:
      return conv->cost(cat, log);
    case FusionKind::dw_separable:
      return pointwise->cost(depthwise->cost(cat, log), log);
  }
  return up;
}

// ---- instantiations ----------------------------------------------------------

#define LGM_INSTANTIATE_BLOCKS(T)                                                                   \
  template Conv2dLayer Conv2dLayer::create(ParamSet<T>&, InitPlan&, const std::string&, ConvSpec);  \
  template Var<T> Conv2dLayer::forward(Context<T>&, const Var<T>&) const;                           \
  template BatchNormLayer BatchNormLayer::create(ParamSet<T>&, InitPlan&, const std::string&,       \
                                                 std::int64_t, double, double);                     \
  template Var<T> BatchNormLayer::forward(Context<T>&, const Var<T>&) const;                        \
  template ConvBnAct ConvBnAct::create(ParamSet<T>&, InitPlan&, const std::string&, ConvSpec, bool, \
                                       double, double);                                             \
  template Var<T> ConvBnAct::forward(Context<T>&, const Var<T>&) const;                             \
  template LinearLayer LinearLayer::create(ParamSet<T>&, InitPlan&, const std::string&,             \
                                           std::int64_t, std::int64_t);                             \
  template Var<T> LinearLayer::forward(Context<T>&, const Var<T>&) const;                           \
  template MlpBlock MlpBlock::create(ParamSet<T>&, InitPlan&, const std::string&, std::int64_t,     \
                                     std::int64_t);                                                 \
  template Var<T> MlpBlock::forward(Context<T>&, const Var<T>&) const;                              \
  template Larm Larm::create(ParamSet<T>&, InitPlan&, const std::string&, const npt::PatchDims&,    \
                             std::int64_t);                                                         \
  template Var<T> Larm::forward(Context<T>&, const Var<T>&) const;                                  \
  template MobileVim MobileVim::create(ParamSet<T>&, InitPlan&, const std::string&, std::int64_t,   \
                                       std::int64_t, const npt::PatchDims&, std::int64_t);          \
  template Var<T> MobileVim::forward(Context<T>&, const Var<T>&) const;                             \
  template InvertedResidual InvertedResidual::create(ParamSet<T>&, InitPlan&, const std::string&,   \
                                                     std::int64_t, std::int64_t, int,               \
                                                     std::int64_t, double, double);                 \
  template Var<T> InvertedResidual::forward(Context<T>&, const Var<T>&) const;                      \
  template DeconvStage DeconvStage::create(ParamSet<T>&, InitPlan&, const std::string&,             \
                                           std::int64_t, std::int64_t, double, double);             \
  template Var<T> DeconvStage::forward(Context<T>&, const Var<T>&) const;                           \
  template Tensor<T> channel_shuffle(const Tensor<T>&, std::int64_t);                               \
  template Var<T> channel_shuffle(const Var<T>&, std::int64_t);                                     \
  template Fusion Fusion::create(ParamSet<T>&, InitPlan&, const std::string&, FusionMode,           \
                                 std::int64_t, std::int64_t, std::int64_t);                         \
  template Var<T> Fusion::forward(Context<T>&, const Var<T>&, const Var<T>&) const;

LGM_INSTANTIATE_BLOCKS(float)
LGM_INSTANTIATE_BLOCKS(double)

}  // namespace lgm
