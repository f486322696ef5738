#include "lgm/npt.hpp"

#include <atomic>
#include <string>
#include <utility>

#include "lgm/kernels.hpp"

namespace lgm::npt {
namespace {

std::atomic<bool> g_corrupt{false};

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

void check_dims(const PatchDims& dims) {
  if (dims.h < 1 || dims.w < 1 || dims.d < 0 || dims.H % dims.h != 0 || dims.W % dims.w != 0 ||
      dims.H < dims.src_H || dims.W < dims.src_W) {
    throw ShapeError("inconsistent patch dimensions");
  }
}

// Splits an optional leading batch axis off a rank-3 layout.
std::int64_t batch_of(const Shape& s, const char* what) {
  if (s.size() == 3) return 1;
  if (s.size() == 4) return s[0];
  throw ShapeError(std::string(what) + " expects a rank-3 or rank-4 tensor, got " + shape_str(s));
}

Shape with_batch(const Shape& in, Shape core) {
  if (in.size() == 4) core.insert(core.begin(), in[0]);
  return core;
}

Shape core_of(const Shape& s) { return s.size() == 4 ? Shape(s.begin() + 1, s.end()) : s; }

}  // namespace

PatchDims PatchDims::make(std::int64_t H, std::int64_t W, std::int64_t d, std::int64_t h,
                          std::int64_t w, bool allow_padding) {
  if (h < 1 || w < 1) throw ShapeError("patch extents must be >= 1");
  if (H < 1 || W < 1 || d < 1) {
    throw ShapeError("feature map " + shape_str({d, H, W}) + " must be non-empty");
  }
  PatchDims dims;
  dims.d = d;
  dims.h = h;
  dims.w = w;
  dims.src_H = H;
  dims.src_W = W;
  if (H % h != 0 || W % w != 0) {
    if (!allow_padding) {
      throw ShapeError("feature map " + std::to_string(H) + "x" + std::to_string(W) +
                       " is not divisible into " + std::to_string(h) + "x" + std::to_string(w) +
                       " patches (padding disabled)");
    }
  }
  dims.H = round_up(H, h);
  dims.W = round_up(W, w);
  dims.pad_top = (dims.H - H) / 2;
  dims.pad_left = (dims.W - W) / 2;
  return dims;
}

IndexMap op1_index(const PatchDims& dims, std::int64_t batch) {
  check_dims(dims);
  const std::int64_t P = dims.P(), N = dims.N(), d = dims.d;
  const std::int64_t src_plane = dims.src_H * dims.src_W;
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(batch * P * d * N), -1);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < d; ++c) {
      for (std::int64_t y = 0; y < dims.H; ++y) {
        const std::int64_t sy = y - dims.pad_top;
        for (std::int64_t x = 0; x < dims.W; ++x) {
          const std::int64_t sx = x - dims.pad_left;
          const std::int64_t n = (y / dims.h) * dims.grid_w() + x / dims.w;
          const std::int64_t p = (y % dims.h) * dims.w + x % dims.w;
          const std::int64_t out = ((b * P + p) * d + c) * N + n;
          const bool inside = sy >= 0 && sy < dims.src_H && sx >= 0 && sx < dims.src_W;
          (*map)[static_cast<std::size_t>(out)] =
              inside ? (b * d + c) * src_plane + sy * dims.src_W + sx : -1;
        }
      }
    }
  }
  if (g_corrupt.load() && map->size() >= 2) std::swap((*map)[0], (*map)[1]);
  return map;
}

IndexMap op2_index(std::int64_t a, std::int64_t d, std::int64_t b_ext, std::int64_t batch) {
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(batch * a * d * b_ext));
  // output[b, j, c, i] = input[b, i, c, j] with input extents (a, d, b_ext).
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t j = 0; j < b_ext; ++j) {
      for (std::int64_t c = 0; c < d; ++c) {
        for (std::int64_t i = 0; i < a; ++i) {
          const std::int64_t out = ((b * b_ext + j) * d + c) * a + i;
          (*map)[static_cast<std::size_t>(out)] = ((b * a + i) * d + c) * b_ext + j;
        }
      }
    }
  }
  return map;
}

IndexMap op3_index(const PatchDims& dims, std::int64_t batch) {
  check_dims(dims);
  const std::int64_t P = dims.P(), N = dims.N(), d = dims.d;
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(batch * d * dims.src_H * dims.src_W));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < d; ++c) {
      for (std::int64_t sy = 0; sy < dims.src_H; ++sy) {
        const std::int64_t y = sy + dims.pad_top;
        for (std::int64_t sx = 0; sx < dims.src_W; ++sx) {
          const std::int64_t x = sx + dims.pad_left;
          const std::int64_t n = (y / dims.h) * dims.grid_w() + x / dims.w;
          const std::int64_t p = (y % dims.h) * dims.w + x % dims.w;
          const std::int64_t out = ((b * d + c) * dims.src_H + sy) * dims.src_W + sx;
          (*map)[static_cast<std::size_t>(out)] = ((b * N + n) * d + c) * P + p;
        }
      }
    }
  }
  return map;
}

template <typename T>
Tensor<T> npt_op1(const Tensor<T>& x, const PatchDims& dims) {
  const std::int64_t batch = batch_of(x.shape(), "npt_op1");
  if (core_of(x.shape()) != Shape{dims.d, dims.src_H, dims.src_W}) {
    throw ShapeError("npt_op1: input " + shape_str(x.shape()) + " does not match patch dims " +
                     shape_str({dims.d, dims.src_H, dims.src_W}));
  }
  return kernels::gather(x, *op1_index(dims, batch),
                         with_batch(x.shape(), {dims.P(), dims.d, dims.N()}));
}

template <typename T>
Tensor<T> npt_op2(const Tensor<T>& u) {
  const std::int64_t batch = batch_of(u.shape(), "npt_op2");
  const Shape c = core_of(u.shape());
  return kernels::gather(u, *op2_index(c[0], c[1], c[2], batch), with_batch(u.shape(), {c[2], c[1], c[0]}));
}

template <typename T>
Tensor<T> npt_op3(const Tensor<T>& g, const PatchDims& dims) {
  const std::int64_t batch = batch_of(g.shape(), "npt_op3");
  if (core_of(g.shape()) != Shape{dims.N(), dims.d, dims.P()}) {
    throw ShapeError("npt_op3: input " + shape_str(g.shape()) + " does not match patch dims (N, d, P) = " +
                     shape_str({dims.N(), dims.d, dims.P()}));
  }
  return kernels::gather(g, *op3_index(dims, batch),
                         with_batch(g.shape(), {dims.d, dims.src_H, dims.src_W}));
}

template <typename T>
Var<T> npt_op1(const Var<T>& x, const PatchDims& dims) {
  const Shape& s = x.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != Shape{dims.d, dims.src_H, dims.src_W}) {
    throw ShapeError("npt_op1: input " + shape_str(s) + " does not match patch dims");
  }
  return gather(x, op1_index(dims, s[0]), {s[0], dims.P(), dims.d, dims.N()});
}

template <typename T>
Var<T> npt_op2(const Var<T>& u) {
  const Shape& s = u.shape();
  if (s.size() != 4) throw ShapeError("npt_op2 expects (B, A, d, B'), got " + shape_str(s));
  return gather(u, op2_index(s[1], s[2], s[3], s[0]), {s[0], s[3], s[2], s[1]});
}

template <typename T>
Var<T> npt_op3(const Var<T>& g, const PatchDims& dims) {
  const Shape& s = g.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != Shape{dims.N(), dims.d, dims.P()}) {
    throw ShapeError("npt_op3: input " + shape_str(s) + " does not match patch dims");
  }
  return gather(g, op3_index(dims, s[0]), {s[0], dims.d, dims.src_H, dims.src_W});
}

namespace testing {
void set_corrupt_index_map(bool enabled) { g_corrupt.store(enabled); }
bool corrupt_index_map() { return g_corrupt.load(); }
}  // namespace testing

template Tensor<float> npt_op1(const Tensor<float>&, const PatchDims&);
template Tensor<double> npt_op1(const Tensor<double>&, const PatchDims&);
template Tensor<float> npt_op2(const Tensor<float>&);
template Tensor<double> npt_op2(const Tensor<double>&);
template Tensor<float> npt_op3(const Tensor<float>&, const PatchDims&);
template Tensor<double> npt_op3(const Tensor<double>&, const PatchDims&);
template Var<float> npt_op1(const Var<float>&, const PatchDims&);
template Var<double> npt_op1(const Var<double>&, const PatchDims&);
template Var<float> npt_op2(const Var<float>&);
template Var<double> npt_op2(const Var<double>&);
template Var<float> npt_op3(const Var<float>&, const PatchDims&);
template Var<double> npt_op3(const Var<double>&, const PatchDims&);

}  // namespace lgm::npt
