#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "lgm/tensor.hpp"

namespace lgm {

// Central-difference gradient of a scalar function, element by element:
// (f(x + h e_i) - f(x - h e_i)) / 2h. Never touches a tape.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Tensor<T> probe = x;
  Tensor<T> grad(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(static_cast<double>(orig) + h);
    const double up = f(probe);
    probe[i] = static_cast<T>(static_cast<double>(orig) - h);
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return grad;
}

}  // namespace lgm

namespace lgm {

template <typename T>
struct SmoothDiff {
  Tensor<T> grad;  // fourth-order estimate at step h/2
  Tensor<T> gap;   // |estimate at h - estimate at h/2|; rounding-sized unless f has a kink within 2h
};

// Fourth-order central differences
// (8(f(x+s) - f(x-s)) - (f(x+2s) - f(x-2s))) / 12s at s = h and s = h/2.
template <typename T>
SmoothDiff<T> smooth_diff_grad(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("smooth_diff_grad: step must be positive");
  Tensor<T> probe = x;
  SmoothDiff<T> out{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    auto at = [&](double s) {
      probe[i] = static_cast<T>(static_cast<double>(orig) + s);
      return f(probe);
    };
    const double p2 = at(2 * h), p1 = at(h), ph = at(h / 2), mh = at(-h / 2), m1 = at(-h), m2 = at(-2 * h);
    probe[i] = orig;
    const double coarse = (8 * (p1 - m1) - (p2 - m2)) / (12 * h);
    const double fine = (8 * (ph - mh) - (p1 - m1)) / (6 * h);
    out.grad[i] = static_cast<T>(fine);
    out.gap[i] = static_cast<T>(std::abs(coarse - fine));
  }
  return out;
}

}  // namespace lgm
