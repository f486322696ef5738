#pragma once

#include <filesystem>

#include "lgm/heatmap.hpp"
#include "lgm/model.hpp"

namespace lgm {

struct InferResult {
  Tensor<float> heatmaps;   // C_key,H/stride,W/stride
  KeypointSet heatmap_kps;  // heatmap cells
  KeypointSet image_kps;    // pixels of the original image
  std::int64_t image_h = 0, image_w = 0;
};

// PPM (P6) or LGMT raw tensor, chosen by the file's magic bytes. Both yield
// 3,H,W values in [0, 1] pixel units.
Tensor<float> load_image(const std::filesystem::path& path);

// Resize to the model input (skipped when sizes agree), normalize, forward,
// decode, and map coordinates back: heatmap cell * stride * resize factor.
InferResult infer(const Model<float>& model, const Tensor<float>& image);

}  // namespace lgm
