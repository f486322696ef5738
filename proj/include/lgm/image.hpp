#pragma once

// Image input for inference: binary PPM (P6) and raw tensor files.

#include <filesystem>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm {

// 3,H,W with values byte/255.
Tensor<float> read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& chw);

// Raw tensor file: "LGMT" | ndim u8 | dims u32 LE each | f32 LE payload.
Tensor<float> read_raw_tensor(const std::filesystem::path& path);
void write_raw_tensor(const std::filesystem::path& path, const Tensor<float>& t);

// Align-corners=false bilinear resampling of a C,H,W tensor.
Tensor<float> resize_bilinear(const Tensor<float>& chw, std::int64_t out_h, std::int64_t out_w);

// (x - mean[c]) / std[c] per channel.
Tensor<float> normalize_channels(const Tensor<float>& chw, const std::vector<double>& mean,
                                 const std::vector<double>& stdev);

}  // namespace lgm
