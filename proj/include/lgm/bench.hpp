#pragma once

// Forward-pass latency measurement.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lgm/model.hpp"

namespace lgm {

struct BenchReport {
  std::string config_digest;
  std::int64_t input_h = 0, input_w = 0;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
  std::vector<double> times_ms;  // forward only, one per timed iteration
  double mean_ms = 0, p50_ms = 0, p95_ms = 0, fps = 0;
  double decode_mean_ms = 0;
  std::string output_digest;  // FNV-1a over the output bytes of the last iteration

  nlohmann::json to_json() const;
  static BenchReport from_json(const nlohmann::json& j);
  std::string table() const;
  // True when mean, percentiles and FPS follow from times_ms.
  bool consistent() const;
};

// Linear interpolation between closest ranks, q in [0, 1].
double percentile(std::vector<double> values, double q);

// "WxH" -> (H, W); throws std::invalid_argument on malformed input.
std::pair<std::int64_t, std::int64_t> parse_size(const std::string& wxh);

BenchReport bench_run(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w, int warmup, int iters,
                      int threads, std::uint64_t seed = 0);

}  // namespace lgm
