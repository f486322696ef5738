#pragma once

// Procedural keypoint data and a small end-to-end training loop.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgm/heatmap.hpp"
#include "lgm/model.hpp"

namespace lgm {

struct ToySample {
  Tensor<float> image;     // 3,H,W in [0, 1]
  KeypointSet keypoints;   // heatmap cells
};

// Noise background with one coloured Gaussian blob per keypoint; keypoint j
// always gets the same colour.
std::vector<ToySample> make_toy_dataset(const ModelConfig& cfg, std::size_t count, std::uint64_t seed);

// The reference topology at 64x48 with four keypoints.
ModelConfig toy_config();

struct TrainOptions {
  int steps = 200;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double sigma = 1.0;
};

struct TrainResult {
  std::vector<double> losses;  // training-mode loss before each update
  double initial_loss = 0;
  double final_loss = 0;       // eval-mode loss after training
  double pckh = 0;             // head size 2 cells, alpha 0.5: error <= 1 cell
  double within_2_cells = 0;   // fraction of visible keypoints decoded within 2 cells
  std::vector<KeypointSet> predictions;
  nlohmann::json to_json() const;
};

// Full-batch Adam on masked MSE. Learning rate drops x0.1 at 75% and 90% of
// the steps. After the last step normalization statistics are re-estimated on
// the training batch so that eval-mode outputs match training-mode ones.
// Throws TrainingError naming the first stage with non-finite activations if
// the loss stops being finite.
TrainResult train_toy(const ModelConfig& cfg, const std::vector<ToySample>& data, const TrainOptions& opt,
                      Model<float>* trained = nullptr);

// Stacks normalized images into N,C,H,W.
Tensor<float> toy_batch(const ModelConfig& cfg, const std::vector<ToySample>& data);

}  // namespace lgm
