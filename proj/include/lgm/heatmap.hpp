#pragma once

// Heatmap targets, argmax decoding, and keypoint metrics.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lgm/tensor.hpp"

namespace lgm {

struct Keypoint {
  double x = 0, y = 0;  // heatmap cells
  double score = 0;
  bool visible = true;
};

struct KeypointSet {
  std::vector<Keypoint> points;

  std::size_t size() const { return points.size(); }
  Keypoint& operator[](std::size_t i) { return points[i]; }
  const Keypoint& operator[](std::size_t i) const { return points[i]; }
};

// Cell index of the target peak for coordinate v.
inline std::int64_t round_cell(double v) { return static_cast<std::int64_t>(std::floor(v + 0.5)); }

// One channel per keypoint: exp(-((x-x0)^2+(y-y0)^2)/(2 sigma^2)) around the
// rounded keypoint (x0, y0), truncated to the square window of radius floor(3 sigma). Invisible or
// out-of-map keypoints give an all-zero channel.
template <typename T>
Tensor<T> gaussian_targets(const KeypointSet& kps, std::int64_t heat_h, std::int64_t heat_w, double sigma);

// 1 over every cell of a visible keypoint's channel, 0 elsewhere.
template <typename T>
Tensor<T> keypoint_mask(const KeypointSet& kps, std::int64_t heat_h, std::int64_t heat_w);

// Per channel: first argmax in row-major order, then a 0.25-cell step toward
// the strictly larger horizontal / vertical neighbour (interior cells only).
// Score is the peak value clamped to [0, 1].
template <typename T>
KeypointSet decode_heatmaps(const Tensor<T>& hm);

// Fraction of gt-visible keypoints with error <= alpha * head_size;
// nullopt when no keypoint is visible.
std::optional<double> pckh(const KeypointSet& pred, const KeypointSet& gt, double head_size, double alpha = 0.5);

// Mean over gt-visible keypoints of exp(-d^2 / (2 area k^2)); nullopt when no
// keypoint is visible.
std::optional<double> oks(const KeypointSet& pred, const KeypointSet& gt, double area,
                          const std::vector<double>& k_consts);

// One scored detection per ground-truth instance.
struct ScoredOks {
  double score;
  double oks;
};

// Average precision over OKS thresholds 0.50:0.05:0.95, 101-point
// interpolated precision per threshold, one detection per instance.
double oks_ap(const std::vector<ScoredOks>& detections);

// ---- I/O ---------------------------------------------------------------------

struct GtRecord {
  std::string image;
  KeypointSet keypoints;
  std::optional<double> head_size;
  std::optional<double> area;
};

// Records are {image, keypoints: [[x, y, vis], ...], head_size?, area?}.
GtRecord gt_from_json(const nlohmann::json& j);
nlohmann::json gt_to_json(const GtRecord& r);
std::vector<GtRecord> load_ground_truth(const std::filesystem::path& path);

nlohmann::json keypoints_to_json(const KeypointSet& kps);

// JSON array of positive floats.
std::vector<double> load_k_constants(const std::filesystem::path& path);

}  // namespace lgm
