#include "lgm/autograd.hpp"

#include <algorithm>

namespace lgm {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [&](std::size_t p) { return nodes_.at(p).requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, Tensor<T> g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                     shape_str(n.value.shape()));
  }
  if (!n.has_grad) {
    n.grad = std::move(g);
    n.has_grad = true;
    return;
  }
  for (std::size_t i = 0; i < g.numel(); ++i) {
    n.grad[i] = static_cast<T>(static_cast<double>(n.grad[i]) + static_cast<double>(g[i]));
  }
}

template <typename T>
GradResult<T> Tape<T>::backward(const Var<T>& loss) {
  GradResult<T> result;
  const Node& ln = nodes_.at(loss.id());
  if (ln.value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(ln.value.shape()));
  }
  if (!record_ || !ln.requires_grad) {
    result.diagnostic = record_ ? "loss does not depend on any tensor that requires gradients"
                                : "tape was created with recording disabled";
    return result;
  }
  for (auto& n : nodes_) {
    n.grad = Tensor<T>();
    n.has_grad = false;
  }
  nodes_[loss.id()].grad = Tensor<T>(ln.value.shape(), T{1});
  nodes_[loss.id()].has_grad = true;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || !n.backward || !n.has_grad) continue;
    Tensor<T> g = std::move(n.grad);
    n.grad = Tensor<T>();
    n.has_grad = false;
    n.backward(*this, g);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.is_leaf || !n.requires_grad) continue;
    result.grads.emplace(i, n.has_grad ? n.grad : Tensor<T>(n.value.shape()));
  }
  return result;
}

template <typename T>
const Tensor<T>* Tape<T>::grad(const Var<T>& v) const {
  const Node& n = nodes_.at(v.id());
  if (!n.has_grad || !n.requires_grad) return nullptr;
  return &n.grad;
}

// ---- operations ------------------------------------------------------------

namespace {

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
  if (!v.tape()) throw std::invalid_argument("operation on an unbound Var");
  return *v.tape();
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias,
              kernels::ConvOptions opt) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, w);
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (bias) {
    same_tape(x, *bias);
    parents.push_back(bias->id());
  }
  Tensor<T> y = kernels::conv2d(x.value(), w.value(), bias ? &bias->value() : nullptr, opt);
  const std::size_t xi = x.id(), wi = w.id();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->id()) : std::nullopt;
  return tape.push(std::move(y), parents, [xi, wi, bi, opt](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& wv = t.value(wi);
    if (t.requires_grad(xi)) t.accumulate(xi, kernels::conv2d_backward_input(g, wv, xv.shape(), opt));
    if (t.requires_grad(wi)) t.accumulate(wi, kernels::conv2d_backward_weight(xv, g, wv.shape(), opt));
    if (bi && t.requires_grad(*bi)) t.accumulate(*bi, kernels::channel_bias_grad(g));
  });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias,
                        int stride, int padding) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, w);
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (bias) parents.push_back(bias->id());
  Tensor<T> y =
      kernels::conv_transpose2d(x.value(), w.value(), bias ? &bias->value() : nullptr, stride, padding);
  const std::size_t xi = x.id(), wi = w.id();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->id()) : std::nullopt;
  const kernels::ConvOptions opt{stride, padding, 1};
  return tape.push(std::move(y), parents, [xi, wi, bi, opt](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(xi);
    const Tensor<T>& wv = t.value(wi);
    // The transposed convolution is the input-adjoint of conv2d(g, w).
    if (t.requires_grad(xi)) t.accumulate(xi, kernels::conv2d(g, wv, static_cast<const Tensor<T>*>(nullptr), opt));
    if (t.requires_grad(wi)) t.accumulate(wi, kernels::conv2d_backward_weight(g, xv, wv.shape(), opt));
    if (bi && t.requires_grad(*bi)) t.accumulate(*bi, kernels::channel_bias_grad(g));
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias) {
  Tape<T>& tape = tape_of(x);
  same_tape(x, w);
  std::vector<std::size_t> parents{x.id(), w.id()};
  if (bias) parents.push_back(bias->id());
  Tensor<T> y = kernels::linear(x.value(), w.value(), bias ? &bias->value() : nullptr);
  const std::size_t xi = x.id(), wi = w.id();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->id()) : std::nullopt;
  return tape.push(std::move(y), parents, [xi, wi, bi](Tape<T>& t, const Tensor<T>& g) {
    auto grads = kernels::linear_backward(t.value(xi), t.value(wi), g);
    t.accumulate(xi, std::move(grads.input));
    t.accumulate(wi, std::move(grads.weight));
    if (bi) t.accumulate(*bi, std::move(grads.bias));
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  Tape<T>& tape = tape_of(x);
  auto r = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  auto stats = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(
      std::move(r.mean), std::move(r.rstd));
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return tape.push(std::move(r.output), {xi, gi, bi}, [xi, gi, bi, stats](Tape<T>& t, const Tensor<T>& g) {
    auto grads = kernels::layer_norm_backward(t.value(xi), t.value(gi), stats->first, stats->second, g);
    t.accumulate(xi, std::move(grads.input));
    t.accumulate(gi, std::move(grads.gamma));
    t.accumulate(bi, std::move(grads.beta));
  });
}

template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, double eps, double momentum,
                    bool training) {
  Tape<T>& tape = tape_of(x);
  auto r = kernels::batch_norm2d(x.value(), gamma.value(), beta.value(), running_mean, running_var,
                                 eps, momentum, training);
  auto stats = std::make_shared<std::pair<std::vector<double>, std::vector<double>>>(
      std::move(r.mean), std::move(r.rstd));
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return tape.push(std::move(r.output), {xi, gi, bi},
                   [xi, gi, bi, stats, training](Tape<T>& t, const Tensor<T>& g) {
                     auto grads = kernels::batch_norm2d_backward(t.value(xi), t.value(gi), stats->first,
                                                                 stats->second, g, training);
                     t.accumulate(xi, std::move(grads.input));
                     t.accumulate(gi, std::move(grads.gamma));
                     t.accumulate(bi, std::move(grads.beta));
                   });
}

template <typename T>
Var<T> activation(const Var<T>& x, kernels::Activation kind) {
  Tape<T>& tape = tape_of(x);
  const std::size_t xi = x.id();
  return tape.push(kernels::activation(x.value(), kind), {xi}, [xi, kind](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(xi, kernels::activation_backward(t.value(xi), g, kind));
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a);
  same_tape(a, b);
  const std::size_t ai = a.id(), bi = b.id();
  const std::int64_t ca = a.shape().at(1);
  return tape.push(kernels::concat_channels(a.value(), b.value()), {ai, bi},
                   [ai, bi, ca](Tape<T>& t, const Tensor<T>& g) {
                     auto parts = kernels::split_channels(g, ca);
                     t.accumulate(ai, std::move(parts.first));
                     t.accumulate(bi, std::move(parts.second));
                   });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a);
  same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.push(std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ai, g);
    t.accumulate(bi, g);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(a);
  same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.push(std::move(y), {ai, bi}, [ai, bi](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(ai);
    const Tensor<T>& bv = t.value(bi);
    Tensor<T> ga(av.shape()), gb(bv.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * bv[i];
      gb[i] = g[i] * av[i];
    }
    t.accumulate(ai, std::move(ga));
    t.accumulate(bi, std::move(gb));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
  Tape<T>& tape = tape_of(a);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    y[i] = static_cast<T>(static_cast<double>(a.value()[i]) * factor);
  }
  const std::size_t ai = a.id();
  return tape.push(std::move(y), {ai}, [ai, factor](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] = static_cast<T>(static_cast<double>(g[i]) * factor);
    }
    t.accumulate(ai, std::move(ga));
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = tape_of(a);
  double acc = 0.0;
  for (T v : a.value().data()) acc += static_cast<double>(v);
  const std::size_t ai = a.id();
  return tape.push(Tensor<T>({1}, T(acc)), {ai}, [ai](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ai, Tensor<T>(t.value(ai).shape(), g[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = static_cast<double>(std::max<std::size_t>(a.value().numel(), 1));
  return scale(sum(a), 1.0 / n);
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tape<T>& tape = tape_of(a);
  const std::size_t ai = a.id();
  return tape.push(a.value().reshaped(std::move(shape)), {ai}, [ai](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(ai, g.reshaped(t.value(ai).shape()));
  });
}

template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index,
              Shape out_shape) {
  Tape<T>& tape = tape_of(x);
  const std::size_t xi = x.id();
  Tensor<T> y = kernels::gather(x.value(), *index, std::move(out_shape));
  return tape.push(std::move(y), {xi}, [xi, index](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(xi, kernels::gather_backward(g, *index, t.value(xi).shape()));
  });
}

template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  Tape<T>& tape = tape_of(pred);
  if (pred.shape() != target.shape() || pred.shape() != mask.shape()) {
    throw ShapeError("masked_mse: prediction " + shape_str(pred.shape()) + ", target " +
                     shape_str(target.shape()) + ", mask " + shape_str(mask.shape()));
  }
  double num = 0.0, den = 0.0;
  const Tensor<T>& p = pred.value();
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double m = static_cast<double>(mask[i]);
    const double d = static_cast<double>(p[i]) - static_cast<double>(target[i]);
    num += m * d * d;
    den += m;
  }
  den = std::max(den, 1.0);
  const std::size_t pi = pred.id();
  auto saved = std::make_shared<std::pair<Tensor<T>, Tensor<T>>>(target, mask);
  return tape.push(Tensor<T>({1}, static_cast<T>(num / den)), {pi},
                   [pi, saved, den](Tape<T>& t, const Tensor<T>& g) {
                     const Tensor<T>& pv = t.value(pi);
                     Tensor<T> gp(pv.shape());
                     const double scale_factor = 2.0 * static_cast<double>(g[0]) / den;
                     for (std::size_t i = 0; i < pv.numel(); ++i) {
                       const double d = static_cast<double>(pv[i]) -
                                        static_cast<double>(saved->first[i]);
                       gp[i] = static_cast<T>(scale_factor * static_cast<double>(saved->second[i]) * d);
                     }
                     t.accumulate(pi, std::move(gp));
                   });
}

#define LGM_INSTANTIATE_AUTOGRAD(T)                                                                 \
  template class Tape<T>;                                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,                \
                         kernels::ConvOptions);                                                     \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, int, \
                                   int);                                                            \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);               \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                  \
  template Var<T> batch_norm2d(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, \
                               double, double, bool);                                               \
  template Var<T> activation(const Var<T>&, kernels::Activation);                                   \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> scale(const Var<T>&, double);                                                     \
  template Var<T> sum(const Var<T>&);                                                               \
  template Var<T> mean(const Var<T>&);                                                              \
  template Var<T> reshape(const Var<T>&, Shape);                                                    \
  template Var<T> gather(const Var<T>&, std::shared_ptr<const std::vector<std::int64_t>>, Shape);   \
  template Var<T> masked_mse(const Var<T>&, const Tensor<T>&, const Tensor<T>&);

LGM_INSTANTIATE_AUTOGRAD(float)
LGM_INSTANTIATE_AUTOGRAD(double)

}  // namespace lgm
