#include "lgm/infer.hpp"

#include <fstream>

#include "lgm/image.hpp"

namespace lgm {

Tensor<float> load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() >= 2 && magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
  if (in.gcount() == 4 && std::string(magic, 4) == "LGMT") {
    Tensor<float> t = read_raw_tensor(path);
    if (t.ndim() != 3) throw IoError(path.string() + ": raw image tensors must be C,H,W, got " + shape_str(t.shape()));
    return t;
  }
  throw IoError(path.string() + ": unsupported image format (expected binary PPM or LGMT tensor)");
}

InferResult infer(const Model<float>& model, const Tensor<float>& image) {
  const ModelConfig& cfg = model.config;
  if (image.ndim() != 3 || image.dim(0) != cfg.in_channels) {
    throw ShapeError("image " + shape_str(image.shape()) + " does not have " + std::to_string(cfg.in_channels) +
                     " channels");
  }
  InferResult r;
  r.image_h = image.dim(1);
  r.image_w = image.dim(2);
  const Tensor<float> x =
      normalize_channels(resize_bilinear(image, cfg.input_h, cfg.input_w), cfg.mean, cfg.std);
  r.heatmaps = model.forward(x);
  r.heatmap_kps = decode_heatmaps(r.heatmaps);
  const double sx = static_cast<double>(cfg.heatmap_stride) * static_cast<double>(r.image_w) / static_cast<double>(cfg.input_w);
  const double sy = static_cast<double>(cfg.heatmap_stride) * static_cast<double>(r.image_h) / static_cast<double>(cfg.input_h);
  r.image_kps = r.heatmap_kps;
  for (auto& k : r.image_kps.points) {
    k.x *= sx;
    k.y *= sy;
  }
  return r;
}

}  // namespace lgm
