#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lgm/autograd.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

// Ordered, uniquely named tensors: trainable parameters and persistent
// buffers (normalization running statistics).
template <typename T>
class ParamSet {
 public:
  std::size_t add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    by_name_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(value), trainable});
    return entries_.size() - 1;
  }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index(const std::string& name) const {
    auto idx = find(name);
    if (!idx) throw std::out_of_range("no parameter named " + name);
    return *idx;
  }

  Tensor<T>& at(const std::string& name) { return entries_[index(name)].value; }
  const Tensor<T>& at(const std::string& name) const { return entries_[index(name)].value; }
  Tensor<T>& operator[](std::size_t i) { return entries_.at(i).value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_.at(i).value; }

  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  bool trainable(std::size_t i) const { return entries_.at(i).trainable; }
  std::size_t size() const { return entries_.size(); }

  // Number of trainable scalars.
  std::int64_t trainable_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += static_cast<std::int64_t>(e.value.numel());
    }
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

struct ForwardMode {
  bool train_norm = false;   // batch statistics (and running-stat updates) in batch_norm2d
  bool param_grads = false;  // bind parameters as gradient-requiring leaves
};

// Per-call state of a forward pass: the tape, and parameters bound to it on
// first use.
template <typename T>
class Context {
 public:
  // `state` receives running-statistic updates; it must be non-null when
  // mode.train_norm is set.
  Context(Tape<T>& tape, const ParamSet<T>& params, ForwardMode mode, ParamSet<T>* state = nullptr)
      : tape_(tape), params_(params), state_(state), mode_(mode), bound_(params.size()) {
    if (mode.train_norm && !state) {
      throw std::invalid_argument("training-mode normalization needs mutable parameter state");
    }
  }

  Var<T> param(std::size_t idx) {
    auto& slot = bound_.at(idx);
    if (!slot) slot = tape_.leaf(params_[idx], mode_.param_grads && params_.trainable(idx));
    return slot;
  }

  // Leaf already bound for idx, if any.
  std::optional<Var<T>> bound(std::size_t idx) const {
    if (!bound_.at(idx)) return std::nullopt;
    return bound_[idx];
  }

  Tape<T>& tape() { return tape_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>* state() { return state_; }
  const ForwardMode& mode() const { return mode_; }

 private:
  Tape<T>& tape_;
  const ParamSet<T>& params_;
  ParamSet<T>* state_;
  ForwardMode mode_;
  std::vector<Var<T>> bound_;
};

}  // namespace lgm
