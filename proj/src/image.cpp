#include "lgm/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lgm/errors.hpp"

namespace lgm {
namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to " + path.string() + " failed");
}

// Header token of a netpbm file; skips whitespace and # comments.
long ppm_int(const std::string& buf, std::size_t& pos, const std::string& name) {
  for (;;) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos || pos - start > 9) throw IoError(name + ": malformed PPM header");
  return std::stol(buf.substr(start, pos - start));
}

}  // namespace

Tensor<float> read_ppm(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  const std::string name = path.string();
  if (buf.size() < 2 || buf.compare(0, 2, "P6") != 0) throw IoError(name + ": not a binary PPM (P6) image");
  std::size_t pos = 2;
  const long w = ppm_int(buf, pos, name);
  const long h = ppm_int(buf, pos, name);
  const long maxval = ppm_int(buf, pos, name);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw IoError(name + ": unsupported PPM dimensions");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IoError(name + ": malformed PPM header");
  }
  ++pos;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3 * bps;
  if (buf.size() - pos < need) throw IoError(name + ": truncated PPM payload");
  Tensor<float> out({3, h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (long c = 0; c < 3; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y * w + x) * 3 + static_cast<std::size_t>(c)) * bps;
        const unsigned v = bps == 2 ? (p[i] << 8 | p[i + 1]) : p[i];
        out[static_cast<std::size_t>((c * h + y) * w + x)] = static_cast<float>(v) / static_cast<float>(maxval);
      }
    }
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3) throw ShapeError("write_ppm expects 3,H,W, got " + shape_str(chw.shape()));
  const std::int64_t h = chw.dim(1), w = chw.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        const float v = chw[static_cast<std::size_t>((c * h + y) * w + x)];
        out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
      }
    }
  }
  spill(path, out);
}

Tensor<float> read_raw_tensor(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  const std::string name = path.string();
  if (buf.size() < 5 || buf.compare(0, 4, "LGMT") != 0) throw IoError(name + ": not an LGMT tensor file");
  const auto ndim = static_cast<unsigned char>(buf[4]);
  std::size_t pos = 5;
  if (buf.size() < pos + 4u * ndim) throw IoError(name + ": truncated tensor header");
  Shape shape;
  for (unsigned i = 0; i < ndim; ++i, pos += 4) {
    std::uint32_t d = 0;
    for (int b = 0; b < 4; ++b) d |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
    shape.push_back(d);
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (buf.size() - pos != n * 4) throw IoError(name + ": payload size does not match " + shape_str(shape));
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + b])) << (8 * b);
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor<float>(shape, std::move(data));
}

void write_raw_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  if (t.ndim() > 255) throw ShapeError("tensor rank too large for LGMT");
  std::string out = "LGMT";
  out.push_back(static_cast<char>(t.ndim()));
  auto put = [&out](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  };
  for (auto d : t.shape()) put(static_cast<std::uint32_t>(d));
  for (float v : t.storage()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put(bits);
  }
  spill(path, out);
}

Tensor<float> resize_bilinear(const Tensor<float>& chw, std::int64_t out_h, std::int64_t out_w) {
  if (chw.ndim() != 3) throw ShapeError("resize_bilinear expects C,H,W, got " + shape_str(chw.shape()));
  const std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (H == out_h && W == out_w) return chw;
  Tensor<float> out({C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::int64_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < C; ++c) {
        const float* p = chw.data().data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[static_cast<std::size_t>((c * out_h + y) * out_w + x)] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Tensor<float> normalize_channels(const Tensor<float>& chw, const std::vector<double>& mean,
                                 const std::vector<double>& stdev) {
  if (chw.ndim() != 3 || static_cast<std::size_t>(chw.dim(0)) != mean.size() || mean.size() != stdev.size()) {
    throw ShapeError("normalize_channels: " + std::to_string(mean.size()) + " statistics for input " +
                     shape_str(chw.shape()));
  }
  Tensor<float> out = chw;
  const std::int64_t plane = chw.dim(1) * chw.dim(2);
  for (std::int64_t c = 0; c < chw.dim(0); ++c) {
    for (std::int64_t i = 0; i < plane; ++i) {
      auto& v = out[static_cast<std::size_t>(c * plane + i)];
      v = static_cast<float>((v - mean[static_cast<std::size_t>(c)]) / stdev[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

}  // namespace lgm
