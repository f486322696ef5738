#include "lgm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "lgm/parallel.hpp"

namespace lgm::kernels {
namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  require(s.size() == rank, std::string(what) + " must be rank " + std::to_string(rank) +
                                ", got " + shape_str(s));
}

// Range of output positions o with 0 <= o*stride + offset < in.
struct Span1 {
  std::int64_t lo;
  std::int64_t hi;  // exclusive
};

Span1 valid_range(std::int64_t in, std::int64_t out, int stride, std::int64_t offset) {
  std::int64_t lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  std::int64_t top = in - 1 - offset;
  std::int64_t hi = top < 0 ? 0 : std::min(out, top / stride + 1);
  return {lo, std::max(lo, hi)};
}

struct ConvGeom {
  std::int64_t n, c_in, h, w;
  std::int64_t c_out, c_in_g, kh, kw;
  std::int64_t ho, wo;
  std::int64_t groups, c_out_g;
};

ConvGeom conv_geom(const Shape& x, const Shape& w, ConvOptions opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  require(opt.stride >= 1, "conv2d stride must be >= 1");
  require(opt.padding >= 0, "conv2d padding must be >= 0");
  require(opt.groups >= 1, "conv2d groups must be >= 1");
  ConvGeom g{};
  g.n = x[0];
  g.c_in = x[1];
  g.h = x[2];
  g.w = x[3];
  g.c_out = w[0];
  g.c_in_g = w[1];
  g.kh = w[2];
  g.kw = w[3];
  g.groups = opt.groups;
  require(g.c_in % g.groups == 0, "conv2d: input channels " + std::to_string(g.c_in) +
                                      " not divisible by groups " + std::to_string(g.groups));
  require(g.c_out % g.groups == 0, "conv2d: output channels " + std::to_string(g.c_out) +
                                       " not divisible by groups " + std::to_string(g.groups));
  require(g.c_in_g * g.groups == g.c_in,
          "conv2d: input has " + std::to_string(g.c_in) + " channels but kernel " + shape_str(w) +
              " with groups=" + std::to_string(g.groups) + " expects " +
              std::to_string(g.c_in_g * g.groups));
  g.c_out_g = g.c_out / g.groups;
  g.ho = conv_out_extent(g.h, g.kh, opt.stride, opt.padding);
  g.wo = conv_out_extent(g.w, g.kw, opt.stride, opt.padding);
  require(g.ho >= 1 && g.wo >= 1, "conv2d: kernel " + shape_str(w) + " larger than padded input " +
                                      shape_str(x));
  return g;
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding) {
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

std::int64_t deconv_out_extent(std::int64_t in, std::int64_t kernel, int stride, int padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvOptions opt) {
  const ConvGeom g = conv_geom(x.shape(), w.shape(), opt);
  if (bias) {
    require(bias->numel() == static_cast<std::size_t>(g.c_out),
            "conv2d: bias length " + std::to_string(bias->numel()) + " vs out channels " +
                std::to_string(g.c_out));
  }
  Tensor<T> y({g.n, g.c_out, g.ho, g.wo});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* yp = y.data().data();
  const std::int64_t plane_in = g.h * g.w;
  const std::int64_t plane_out = g.ho * g.wo;

  parallel_for(static_cast<std::size_t>(g.n * g.c_out), [&](std::size_t b, std::size_t e) {
    std::vector<double> acc(static_cast<std::size_t>(plane_out));
    for (std::size_t job = b; job < e; ++job) {
      const std::int64_t n = static_cast<std::int64_t>(job) / g.c_out;
      const std::int64_t oc = static_cast<std::int64_t>(job) % g.c_out;
      const std::int64_t grp = oc / g.c_out_g;
      std::fill(acc.begin(), acc.end(), bias ? static_cast<double>((*bias)[oc]) : 0.0);
      for (std::int64_t icg = 0; icg < g.c_in_g; ++icg) {
        const std::int64_t ic = grp * g.c_in_g + icg;
        const T* plane = xp + (n * g.c_in + ic) * plane_in;
        const T* kern = wp + (oc * g.c_in_g + icg) * g.kh * g.kw;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const Span1 rows = valid_range(g.h, g.ho, opt.stride, ky - opt.padding);
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const double wv = static_cast<double>(kern[ky * g.kw + kx]);
            const Span1 cols = valid_range(g.w, g.wo, opt.stride, kx - opt.padding);
            for (std::int64_t oy = rows.lo; oy < rows.hi; ++oy) {
              const std::int64_t iy = oy * opt.stride + ky - opt.padding;
              const std::int64_t base = iy * g.w + kx - opt.padding;
              double* dst = acc.data() + oy * g.wo;
              if (opt.stride == 1) {
                const T* src = plane + base + cols.lo;
                for (std::int64_t ox = cols.lo; ox < cols.hi; ++ox) {
                  dst[ox] += wv * static_cast<double>(src[ox - cols.lo]);
                }
              } else {
                for (std::int64_t ox = cols.lo; ox < cols.hi; ++ox) {
                  dst[ox] += wv * static_cast<double>(plane[base + ox * opt.stride]);
                }
              }
            }
          }
        }
      }
      T* out = yp + (n * g.c_out + oc) * plane_out;
      for (std::int64_t i = 0; i < plane_out; ++i) out[i] = static_cast<T>(acc[i]);
    }
  });
  return y;
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& w,
                                const Shape& input_shape, ConvOptions opt) {
  const ConvGeom g = conv_geom(input_shape, w.shape(), opt);
  require(grad_out.shape() == Shape({g.n, g.c_out, g.ho, g.wo}),
          "conv2d backward: grad_out " + shape_str(grad_out.shape()) + " inconsistent with input " +
              shape_str(input_shape) + " and kernel " + shape_str(w.shape()));
  Tensor<T> gx(input_shape);
  const T* gp = grad_out.data().data();
  const T* wp = w.data().data();
  T* xp = gx.data().data();
  const std::int64_t plane_in = g.h * g.w;
  const std::int64_t plane_out = g.ho * g.wo;

  parallel_for(static_cast<std::size_t>(g.n * g.c_in), [&](std::size_t b, std::size_t e) {
    std::vector<double> acc(static_cast<std::size_t>(plane_in));
    for (std::size_t job = b; job < e; ++job) {
      const std::int64_t n = static_cast<std::int64_t>(job) / g.c_in;
      const std::int64_t ic = static_cast<std::int64_t>(job) % g.c_in;
      const std::int64_t grp = ic / g.c_in_g;
      const std::int64_t icg = ic % g.c_in_g;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::int64_t ocg = 0; ocg < g.c_out_g; ++ocg) {
        const std::int64_t oc = grp * g.c_out_g + ocg;
        const T* gplane = gp + (n * g.c_out + oc) * plane_out;
        const T* kern = wp + (oc * g.c_in_g + icg) * g.kh * g.kw;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const Span1 rows = valid_range(g.h, g.ho, opt.stride, ky - opt.padding);
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const double wv = static_cast<double>(kern[ky * g.kw + kx]);
            const Span1 cols = valid_range(g.w, g.wo, opt.stride, kx - opt.padding);
            for (std::int64_t oy = rows.lo; oy < rows.hi; ++oy) {
              const std::int64_t iy = oy * opt.stride + ky - opt.padding;
              const std::int64_t base = iy * g.w + kx - opt.padding;
              const T* src = gplane + oy * g.wo;
              for (std::int64_t ox = cols.lo; ox < cols.hi; ++ox) {
                acc[static_cast<std::size_t>(base + ox * opt.stride)] +=
                    wv * static_cast<double>(src[ox]);
              }
            }
          }
        }
      }
      T* out = xp + (n * g.c_in + ic) * plane_in;
      for (std::int64_t i = 0; i < plane_in; ++i) out[i] = static_cast<T>(acc[i]);
    }
  });
  return gx;
}

template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& x, const Tensor<T>& grad_out,
                                 const Shape& weight_shape, ConvOptions opt) {
  const ConvGeom g = conv_geom(x.shape(), weight_shape, opt);
  require(grad_out.shape() == Shape({g.n, g.c_out, g.ho, g.wo}),
          "conv2d backward: grad_out " + shape_str(grad_out.shape()) + " inconsistent with input " +
              shape_str(x.shape()));
  Tensor<T> gw(weight_shape);
  const T* gp = grad_out.data().data();
  const T* xp = x.data().data();
  T* wp = gw.data().data();
  const std::int64_t plane_in = g.h * g.w;
  const std::int64_t plane_out = g.ho * g.wo;

  parallel_for(static_cast<std::size_t>(g.c_out), [&](std::size_t b, std::size_t e) {
    for (std::size_t ocu = b; ocu < e; ++ocu) {
      const std::int64_t oc = static_cast<std::int64_t>(ocu);
      const std::int64_t grp = oc / g.c_out_g;
      for (std::int64_t icg = 0; icg < g.c_in_g; ++icg) {
        const std::int64_t ic = grp * g.c_in_g + icg;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const Span1 rows = valid_range(g.h, g.ho, opt.stride, ky - opt.padding);
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const Span1 cols = valid_range(g.w, g.wo, opt.stride, kx - opt.padding);
            double acc = 0.0;
            for (std::int64_t n = 0; n < g.n; ++n) {
              const T* gplane = gp + (n * g.c_out + oc) * plane_out;
              const T* plane = xp + (n * g.c_in + ic) * plane_in;
              for (std::int64_t oy = rows.lo; oy < rows.hi; ++oy) {
                const std::int64_t iy = oy * opt.stride + ky - opt.padding;
                const std::int64_t base = iy * g.w + kx - opt.padding;
                const T* gr = gplane + oy * g.wo;
                for (std::int64_t ox = cols.lo; ox < cols.hi; ++ox) {
                  acc += static_cast<double>(gr[ox]) *
                         static_cast<double>(plane[base + ox * opt.stride]);
                }
              }
            }
            wp[((oc * g.c_in_g + icg) * g.kh + ky) * g.kw + kx] = static_cast<T>(acc);
          }
        }
      }
    }
  });
  return gw;
}

template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& grad_out) {
  require_rank(grad_out.shape(), 4, "bias gradient input");
  const std::int64_t n = grad_out.dim(0), c = grad_out.dim(1);
  const std::int64_t plane = grad_out.dim(2) * grad_out.dim(3);
  Tensor<T> gb({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* p = grad_out.data().data() + (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
    }
    gb[ch] = static_cast<T>(acc);
  }
  return gb;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                           int stride, int padding) {
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(w.shape(), 4, "conv_transpose2d kernel");
  require(stride >= 1, "conv_transpose2d stride must be >= 1");
  require(padding >= 0, "conv_transpose2d padding must be >= 0");
  require(x.dim(1) == w.dim(0), "conv_transpose2d: input has " + std::to_string(x.dim(1)) +
                                    " channels but kernel " + shape_str(w.shape()) + " expects " +
                                    std::to_string(w.dim(0)));
  const std::int64_t ho = deconv_out_extent(x.dim(2), w.dim(2), stride, padding);
  const std::int64_t wo = deconv_out_extent(x.dim(3), w.dim(3), stride, padding);
  require(ho >= 1 && wo >= 1, "conv_transpose2d: empty output for input " + shape_str(x.shape()));
  Tensor<T> y = conv2d_backward_input(x, w, {x.dim(0), w.dim(1), ho, wo},
                                      ConvOptions{stride, padding, 1});
  if (bias) {
    require(bias->numel() == static_cast<std::size_t>(w.dim(1)),
            "conv_transpose2d: bias length mismatch");
    const std::int64_t plane = ho * wo;
    for (std::int64_t b = 0; b < y.dim(0); ++b) {
      for (std::int64_t c = 0; c < y.dim(1); ++c) {
        T* p = y.data().data() + (b * y.dim(1) + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          p[i] = static_cast<T>(static_cast<double>(p[i]) + static_cast<double>((*bias)[c]));
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  require(x.ndim() >= 1, "linear: input must have at least one axis");
  require_rank(w.shape(), 2, "linear weight");
  const std::int64_t f_in = x.shape().back();
  const std::int64_t f_out = w.dim(0);
  require(w.dim(1) == f_in, "linear: input last axis " + std::to_string(f_in) + " vs weight " +
                                shape_str(w.shape()));
  if (bias) {
    require(bias->numel() == static_cast<std::size_t>(f_out), "linear: bias length " +
                                                                 std::to_string(bias->numel()) +
                                                                 " vs " + std::to_string(f_out));
  }
  Shape out_shape = x.shape();
  out_shape.back() = f_out;
  Tensor<T> y(out_shape);
  const std::int64_t rows = f_in == 0 ? 0 : static_cast<std::int64_t>(x.numel()) / f_in;
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  T* yp = y.data().data();
  parallel_for(static_cast<std::size_t>(rows), [&](std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      const T* xr = xp + r * f_in;
      for (std::int64_t o = 0; o < f_out; ++o) {
        const T* wr = wp + o * f_in;
        double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
        for (std::int64_t i = 0; i < f_in; ++i) {
          acc += static_cast<double>(xr[i]) * static_cast<double>(wr[i]);
        }
        yp[r * f_out + o] = static_cast<T>(acc);
      }
    }
  });
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out) {
  const std::int64_t f_in = w.dim(1);
  const std::int64_t f_out = w.dim(0);
  const std::int64_t rows = static_cast<std::int64_t>(grad_out.numel()) / std::max<std::int64_t>(f_out, 1);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({f_out})};
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  const T* gp = grad_out.data().data();

  parallel_for(static_cast<std::size_t>(rows), [&](std::size_t b, std::size_t e) {
    std::vector<double> acc(static_cast<std::size_t>(f_in));
    for (std::size_t r = b; r < e; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::int64_t o = 0; o < f_out; ++o) {
        const double gv = static_cast<double>(gp[r * f_out + o]);
        const T* wr = wp + o * f_in;
        for (std::int64_t i = 0; i < f_in; ++i) acc[i] += gv * static_cast<double>(wr[i]);
      }
      T* out = g.input.data().data() + r * f_in;
      for (std::int64_t i = 0; i < f_in; ++i) out[i] = static_cast<T>(acc[i]);
    }
  });
  parallel_for(static_cast<std::size_t>(f_out), [&](std::size_t b, std::size_t e) {
    std::vector<double> acc(static_cast<std::size_t>(f_in));
    for (std::size_t o = b; o < e; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double bacc = 0.0;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double gv = static_cast<double>(gp[r * f_out + o]);
        bacc += gv;
        const T* xr = xp + r * f_in;
        for (std::int64_t i = 0; i < f_in; ++i) acc[i] += gv * static_cast<double>(xr[i]);
      }
      T* out = g.weight.data().data() + o * f_in;
      for (std::int64_t i = 0; i < f_in; ++i) out[i] = static_cast<T>(acc[i]);
      g.bias[o] = static_cast<T>(bacc);
    }
  });
  return g;
}

template <typename T>
LayerNormResult<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              double eps) {
  require(x.ndim() >= 1, "layer_norm: input must have at least one axis");
  const std::int64_t len = x.shape().back();
  require(gamma.numel() == static_cast<std::size_t>(len) &&
              beta.numel() == static_cast<std::size_t>(len),
          "layer_norm: gamma/beta length " + std::to_string(gamma.numel()) + "/" +
              std::to_string(beta.numel()) + " vs normalized axis " + std::to_string(len));
  const std::int64_t slices = len == 0 ? 0 : static_cast<std::int64_t>(x.numel()) / len;
  LayerNormResult<T> r{Tensor<T>(x.shape()), std::vector<double>(slices),
                       std::vector<double>(slices)};
  const T* xp = x.data().data();
  T* yp = r.output.data().data();
  parallel_for(static_cast<std::size_t>(slices), [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; ++s) {
      const T* xs = xp + s * len;
      double sum = 0.0;
      for (std::int64_t i = 0; i < len; ++i) sum += static_cast<double>(xs[i]);
      const double mean = sum / static_cast<double>(len);
      double sq = 0.0;
      for (std::int64_t i = 0; i < len; ++i) {
        const double d = static_cast<double>(xs[i]) - mean;
        sq += d * d;
      }
      const double rstd = 1.0 / std::sqrt(sq / static_cast<double>(len) + eps);
      r.mean[s] = mean;
      r.rstd[s] = rstd;
      for (std::int64_t i = 0; i < len; ++i) {
        const double xhat = (static_cast<double>(xs[i]) - mean) * rstd;
        yp[s * len + i] = static_cast<T>(static_cast<double>(gamma[i]) * xhat +
                                         static_cast<double>(beta[i]));
      }
    }
  });
  return r;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      std::span<const double> mean, std::span<const double> rstd,
                                      const Tensor<T>& grad_out) {
  const std::int64_t len = x.shape().back();
  const std::int64_t slices = static_cast<std::int64_t>(mean.size());
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({len}), Tensor<T>({len})};
  const T* xp = x.data().data();
  const T* gp = grad_out.data().data();
  parallel_for(static_cast<std::size_t>(slices), [&](std::size_t b, std::size_t e) {
    std::vector<double> dxhat(static_cast<std::size_t>(len));
    for (std::size_t s = b; s < e; ++s) {
      double m1 = 0.0, m2 = 0.0;
      for (std::int64_t i = 0; i < len; ++i) {
        const double xhat = (static_cast<double>(xp[s * len + i]) - mean[s]) * rstd[s];
        dxhat[i] = static_cast<double>(gp[s * len + i]) * static_cast<double>(gamma[i]);
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat;
      }
      m1 /= static_cast<double>(len);
      m2 /= static_cast<double>(len);
      for (std::int64_t i = 0; i < len; ++i) {
        const double xhat = (static_cast<double>(xp[s * len + i]) - mean[s]) * rstd[s];
        g.input[s * len + i] = static_cast<T>(rstd[s] * (dxhat[i] - m1 - xhat * m2));
      }
    }
  });
  for (std::int64_t i = 0; i < len; ++i) {
    double ga = 0.0, gb = 0.0;
    for (std::int64_t s = 0; s < slices; ++s) {
      const double xhat = (static_cast<double>(xp[s * len + i]) - mean[s]) * rstd[s];
      const double gv = static_cast<double>(gp[s * len + i]);
      ga += gv * xhat;
      gb += gv;
    }
    g.gamma[i] = static_cast<T>(ga);
    g.beta[i] = static_cast<T>(gb);
  }
  return g;
}

template <typename T>
BatchNormResult<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                Tensor<T>& running_mean, Tensor<T>& running_var, double eps,
                                double momentum, bool training) {
  require_rank(x.shape(), 4, "batch_norm2d input");
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto cu = static_cast<std::size_t>(c);
  require(gamma.numel() == cu && beta.numel() == cu && running_mean.numel() == cu &&
              running_var.numel() == cu,
          "batch_norm2d: per-channel parameters must have length " + std::to_string(c));
  BatchNormResult<T> r{Tensor<T>(x.shape()), std::vector<double>(cu), std::vector<double>(cu)};
  const T* xp = x.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    if (training) {
      const double count = static_cast<double>(n * plane);
      double sum = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xp + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
      }
      mean = sum / count;
      double sq = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* p = xp + (b * c + ch) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(p[i]) - mean;
          sq += d * d;
        }
      }
      var = sq / count;
      running_mean[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[ch]) +
                                        momentum * mean);
      running_var[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[ch]) +
                                       momentum * var);
    } else {
      mean = static_cast<double>(running_mean[ch]);
      var = static_cast<double>(running_var[ch]);
    }
    const double rstd = 1.0 / std::sqrt(var + eps);
    r.mean[ch] = mean;
    r.rstd[ch] = rstd;
    const double scale = static_cast<double>(gamma[ch]) * rstd;
    const double shift = static_cast<double>(beta[ch]);
    for (std::int64_t b = 0; b < n; ++b) {
      const T* p = xp + (b * c + ch) * plane;
      T* q = r.output.data().data() + (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        q[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * scale + shift);
      }
    }
  }
  return r;
}

template <typename T>
BatchNormGrads<T> batch_norm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                        std::span<const double> mean, std::span<const double> rstd,
                                        const Tensor<T>& grad_out, bool training) {
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  BatchNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  const T* xp = x.data().data();
  const T* gp = grad_out.data().data();
  const double count = static_cast<double>(n * plane);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t base = (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double xhat = (static_cast<double>(xp[base + i]) - mean[ch]) * rstd[ch];
        const double gv = static_cast<double>(gp[base + i]);
        sum_g += gv;
        sum_gx += gv * xhat;
      }
    }
    g.gamma[ch] = static_cast<T>(sum_gx);
    g.beta[ch] = static_cast<T>(sum_g);
    const double gam = static_cast<double>(gamma[ch]);
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t base = (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double gv = static_cast<double>(gp[base + i]);
        double dx = gv * gam * rstd[ch];
        if (training) {
          const double xhat = (static_cast<double>(xp[base + i]) - mean[ch]) * rstd[ch];
          dx = gam * rstd[ch] * (gv - sum_g / count - xhat * sum_gx / count);
        }
        g.input[base + i] = static_cast<T>(dx);
      }
    }
  }
  return g;
}

namespace {
constexpr double kGeluCoef = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoef * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoef * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double relu6(double x) { return std::min(std::max(x, 0.0), 6.0); }

double relu6_grad(double x) { return (x > 0.0 && x < 6.0) ? 1.0 : 0.0; }

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  const T* xp = x.data().data();
  T* yp = y.data().data();
  const std::size_t n = x.numel();
  if (kind == Activation::gelu) {
    for (std::size_t i = 0; i < n; ++i) yp[i] = static_cast<T>(gelu(static_cast<double>(xp[i])));
  } else {
    for (std::size_t i = 0; i < n; ++i) yp[i] = std::min(std::max(xp[i], T{0}), T{6});
  }
  return y;
}

template <typename T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& grad_out, Activation kind) {
  Tensor<T> g(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double xv = static_cast<double>(x[i]);
    const double d = kind == Activation::gelu ? gelu_grad(xv) : relu6_grad(xv);
    g[i] = static_cast<T>(d * static_cast<double>(grad_out[i]));
  }
  return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 4, "concat_channels first input");
  require_rank(b.shape(), 4, "concat_channels second input");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
              " disagree on N, H or W");
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t plane = a.dim(2) * a.dim(3);
  Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * plane, ca * plane,
                y.data().data() + i * (ca + cb) * plane);
    std::copy_n(b.data().data() + i * cb * plane, cb * plane,
                y.data().data() + (i * (ca + cb) + ca) * plane);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::int64_t at) {
  require_rank(x.shape(), 4, "split_channels input");
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(at >= 0 && at <= c, "split_channels: split point " + std::to_string(at) +
                                  " outside [0, " + std::to_string(c) + "]");
  Tensor<T> a({n, at, x.dim(2), x.dim(3)});
  Tensor<T> b({n, c - at, x.dim(2), x.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x.data().data() + i * c * plane, at * plane, a.data().data() + i * at * plane);
    std::copy_n(x.data().data() + (i * c + at) * plane, (c - at) * plane,
                b.data().data() + i * (c - at) * plane);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::int64_t> index, Shape out_shape) {
  require(static_cast<std::int64_t>(index.size()) == shape_numel(out_shape),
          "gather: index length " + std::to_string(index.size()) + " vs output shape " +
              shape_str(out_shape));
  Tensor<T> y(std::move(out_shape));
  const std::int64_t limit = static_cast<std::int64_t>(x.numel());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t src = index[i];
    if (src >= limit) throw ShapeError("gather: index out of range");
    y[i] = src < 0 ? T{0} : x[static_cast<std::size_t>(src)];
  }
  return y;
}

template <typename T>
Tensor<T> gather_backward(const Tensor<T>& grad_out, std::span<const std::int64_t> index,
                          const Shape& input_shape) {
  // Accumulate in double so repeated indices sum in a fixed order.
  std::vector<double> acc(static_cast<std::size_t>(shape_numel(input_shape)), 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= 0) acc[static_cast<std::size_t>(index[i])] += static_cast<double>(grad_out[i]);
  }
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < acc.size(); ++i) g[i] = static_cast<T>(acc[i]);
  return g;
}

#define LGM_INSTANTIATE_KERNELS(T)                                                                \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, ConvOptions);   \
  template Tensor<T> conv2d_backward_input(const Tensor<T>&, const Tensor<T>&, const Shape&,      \
                                           ConvOptions);                                          \
  template Tensor<T> conv2d_backward_weight(const Tensor<T>&, const Tensor<T>&, const Shape&,     \
                                            ConvOptions);                                         \
  template Tensor<T> channel_bias_grad(const Tensor<T>&);                                         \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int,  \
                                      int);                                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template LayerNormResult<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                         double);                                                 \
  template LayerNormGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&,              \
                                                 std::span<const double>,                        \
                                                 std::span<const double>, const Tensor<T>&);     \
  template BatchNormResult<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                           Tensor<T>&, Tensor<T>&, double, double, bool);         \
  template BatchNormGrads<T> batch_norm2d_backward(const Tensor<T>&, const Tensor<T>&,            \
                                                   std::span<const double>,                      \
                                                   std::span<const double>, const Tensor<T>&,    \
                                                   bool);                                         \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                    \
  template Tensor<T> activation_backward(const Tensor<T>&, const Tensor<T>&, Activation);         \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, std::int64_t);        \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::int64_t>, Shape);              \
  template Tensor<T> gather_backward(const Tensor<T>&, std::span<const std::int64_t>, const Shape&);

LGM_INSTANTIATE_KERNELS(float)
LGM_INSTANTIATE_KERNELS(double)

}  // namespace lgm::kernels
