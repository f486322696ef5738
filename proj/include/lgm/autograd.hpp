#pragma once

// Reverse-mode differentiation over a linear tape. Every differentiable
// operation below records its output value together with a closure that maps
// the output gradient to input gradients.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lgm/kernels.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  explicit operator bool() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
struct GradResult {
  // Gradients of every leaf created with requires_grad, keyed by tape id.
  std::unordered_map<std::size_t, Tensor<T>> grads;
  // Non-empty when no gradient could be produced.
  std::string diagnostic;

  const Tensor<T>* find(const Var<T>& v) const {
    auto it = grads.find(v.id());
    return it == grads.end() ? nullptr : &it->second;
  }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  // With record=false no backward closures are kept; values still are.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  Var<T> push(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Adds g into the gradient slot of node id (no-op when it needs no gradient).
  void accumulate(std::size_t id, Tensor<T> g);

  // Replays the tape backwards from a scalar loss. Leaves keep their
  // gradients (see grad()); intermediate gradients are released as soon as
  // they have been propagated.
  GradResult<T> backward(const Var<T>& loss);

  const Tensor<T>* grad(const Var<T>& v) const;

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// ---- differentiable operations -------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias,
              kernels::ConvOptions opt);

// w has the layout C_in,C_out,kh,kw.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias,
                        int stride, int padding);

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& bias);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps);

// Running statistics are updated in place when training is true.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, double eps, double momentum,
                    bool training);

template <typename T>
Var<T> activation(const Var<T>& x, kernels::Activation kind);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, double factor);

template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> mean(const Var<T>& a);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);

// out[i] = index[i] < 0 ? 0 : x[index[i]]. Covers permutations, crops and
// zero padding.
template <typename T>
Var<T> gather(const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index,
              Shape out_shape);

// sum(mask * (pred - target)^2) / sum(mask); mask holds 0/1 weights.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask);

}  // namespace lgm
