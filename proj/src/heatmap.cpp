#include "lgm/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lgm/errors.hpp"

namespace lgm {
namespace {

bool on_map(const Keypoint& k, std::int64_t h, std::int64_t w) {
  const std::int64_t cx = round_cell(k.x), cy = round_cell(k.y);
  return k.visible && std::isfinite(k.x) && std::isfinite(k.y) && cx >= 0 && cx < w && cy >= 0 && cy < h;
}

void check_pair(const KeypointSet& pred, const KeypointSet& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("keypoint count mismatch: " + std::to_string(pred.size()) + " predicted vs " +
                     std::to_string(gt.size()) + " ground truth");
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace

template <typename T>
Tensor<T> gaussian_targets(const KeypointSet& kps, std::int64_t heat_h, std::int64_t heat_w, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_targets: sigma must be positive");
  const auto C = static_cast<std::int64_t>(kps.size());
  Tensor<T> out({C, heat_h, heat_w});
  const auto radius = static_cast<std::int64_t>(std::floor(3 * sigma));
  for (std::int64_t c = 0; c < C; ++c) {
    const Keypoint& k = kps[static_cast<std::size_t>(c)];
    if (!on_map(k, heat_h, heat_w)) continue;
    const std::int64_t cx = round_cell(k.x), cy = round_cell(k.y);
    T* plane = out.data().data() + c * heat_h * heat_w;
    for (std::int64_t y = std::max<std::int64_t>(0, cy - radius); y <= std::min(heat_h - 1, cy + radius); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(0, cx - radius); x <= std::min(heat_w - 1, cx + radius); ++x) {
        const double d2 = static_cast<double>((x - cx) * (x - cx) + (y - cy) * (y - cy));
        plane[y * heat_w + x] = static_cast<T>(std::exp(-d2 / (2 * sigma * sigma)));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> keypoint_mask(const KeypointSet& kps, std::int64_t heat_h, std::int64_t heat_w) {
  const auto C = static_cast<std::int64_t>(kps.size());
  Tensor<T> out({C, heat_h, heat_w});
  for (std::int64_t c = 0; c < C; ++c) {
    if (!on_map(kps[static_cast<std::size_t>(c)], heat_h, heat_w)) continue;
    std::fill_n(out.data().data() + c * heat_h * heat_w, heat_h * heat_w, T{1});
  }
  return out;
}

template <typename T>
KeypointSet decode_heatmaps(const Tensor<T>& hm) {
  if (hm.ndim() != 3) throw ShapeError("decode_heatmaps expects C,H,W, got " + shape_str(hm.shape()));
  const std::int64_t C = hm.dim(0), H = hm.dim(1), W = hm.dim(2);
  KeypointSet out;
  for (std::int64_t c = 0; c < C; ++c) {
    const T* p = hm.data().data() + c * H * W;
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < H * W; ++i) {
      if (p[i] > p[best]) best = i;
    }
    const std::int64_t by = best / W, bx = best % W;
    Keypoint k;
    k.x = static_cast<double>(bx);
    k.y = static_cast<double>(by);
    if (bx > 0 && bx < W - 1) {
      if (p[best + 1] > p[best - 1]) k.x += 0.25;
      if (p[best - 1] > p[best + 1]) k.x -= 0.25;
    }
    if (by > 0 && by < H - 1) {
      if (p[best + W] > p[best - W]) k.y += 0.25;
      if (p[best - W] > p[best + W]) k.y -= 0.25;
    }
    k.score = H * W > 0 ? std::clamp(static_cast<double>(p[best]), 0.0, 1.0) : 0.0;
    out.points.push_back(k);
  }
  return out;
}

std::optional<double> pckh(const KeypointSet& pred, const KeypointSet& gt, double head_size, double alpha) {
  check_pair(pred, gt);
  if (!(head_size > 0)) throw std::invalid_argument("pckh: head_size must be positive");
  const double thr = alpha * head_size;
  std::size_t visible = 0, hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i].visible) continue;
    ++visible;
    if (std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y) <= thr) ++hit;
  }
  if (visible == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(visible);
}

std::optional<double> oks(const KeypointSet& pred, const KeypointSet& gt, double area,
                          const std::vector<double>& k_consts) {
  check_pair(pred, gt);
  if (k_consts.size() != gt.size()) {
    throw ShapeError("oks: " + std::to_string(k_consts.size()) + " constants for " + std::to_string(gt.size()) +
                     " keypoints");
  }
  if (!(area > 0)) throw std::invalid_argument("oks: area must be positive");
  double total = 0;
  std::size_t visible = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt[i].visible) continue;
    if (!(k_consts[i] > 0)) throw std::invalid_argument("oks: k constants must be positive");
    const double dx = pred[i].x - gt[i].x, dy = pred[i].y - gt[i].y;
    total += std::exp(-(dx * dx + dy * dy) / (2 * area * k_consts[i] * k_consts[i]));
    ++visible;
  }
  if (visible == 0) return std::nullopt;
  return total / static_cast<double>(visible);
}

double oks_ap(const std::vector<ScoredOks>& detections) {
  if (detections.empty()) return 0.0;
  std::vector<ScoredOks> sorted = detections;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ScoredOks& a, const ScoredOks& b) { return a.score > b.score; });
  const auto n = static_cast<double>(sorted.size());
  double ap_sum = 0;
  int thresholds = 0;
  for (int t = 0; t < 10; ++t, ++thresholds) {
    const double thr = 0.5 + 0.05 * t;
    std::vector<double> precision, recall;
    double tp = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i].oks >= thr) tp += 1;
      precision.push_back(tp / static_cast<double>(i + 1));
      recall.push_back(tp / n);
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
      if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    ap_sum += sum / 101.0;
  }
  return ap_sum / thresholds;
}

GtRecord gt_from_json(const nlohmann::json& j) {
  GtRecord r;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      if (key != "image" && key != "keypoints" && key != "head_size" && key != "area") {
        throw IoError("ground-truth record has unknown key '" + key + "'");
      }
    }
    r.image = j.value("image", "");
    for (const auto& kp : j.at("keypoints")) {
      if (!kp.is_array() || kp.size() != 3) throw IoError("keypoint entries must be [x, y, vis]");
      Keypoint k;
      k.x = kp[0].get<double>();
      k.y = kp[1].get<double>();
      k.visible = kp[2].get<double>() > 0;
      k.score = k.visible ? 1.0 : 0.0;
      r.keypoints.points.push_back(k);
    }
    if (j.contains("head_size")) r.head_size = j.at("head_size").get<double>();
    if (j.contains("area")) r.area = j.at("area").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed ground-truth record: ") + e.what());
  }
  return r;
}

nlohmann::json gt_to_json(const GtRecord& r) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& k : r.keypoints.points) kps.push_back({k.x, k.y, k.visible ? 2 : 0});
  nlohmann::json j{{"image", r.image}, {"keypoints", kps}};
  if (r.head_size) j["head_size"] = *r.head_size;
  if (r.area) j["area"] = *r.area;
  return j;
}

std::vector<GtRecord> load_ground_truth(const std::filesystem::path& path) {
  const nlohmann::json j = read_json(path);
  std::vector<GtRecord> out;
  if (j.is_array()) {
    for (const auto& rec : j) out.push_back(gt_from_json(rec));
  } else {
    out.push_back(gt_from_json(j));
  }
  return out;
}

nlohmann::json keypoints_to_json(const KeypointSet& kps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& k : kps.points) arr.push_back({{"x", k.x}, {"y", k.y}, {"score", k.score}});
  return arr;
}

std::vector<double> load_k_constants(const std::filesystem::path& path) {
  const nlohmann::json j = read_json(path);
  std::vector<double> k;
  try {
    k = j.get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": expected an array of numbers (" + e.what() + ")");
  }
  for (double v : k) {
    if (!(v > 0)) throw IoError(path.string() + ": k constants must be positive");
  }
  return k;
}

template Tensor<float> gaussian_targets(const KeypointSet&, std::int64_t, std::int64_t, double);
template Tensor<double> gaussian_targets(const KeypointSet&, std::int64_t, std::int64_t, double);
template Tensor<float> keypoint_mask(const KeypointSet&, std::int64_t, std::int64_t);
template Tensor<double> keypoint_mask(const KeypointSet&, std::int64_t, std::int64_t);
template KeypointSet decode_heatmaps(const Tensor<float>&);
template KeypointSet decode_heatmaps(const Tensor<double>&);

}  // namespace lgm
