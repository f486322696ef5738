#include "lgm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include "lgm/heatmap.hpp"
#include "lgm/parallel.hpp"

namespace lgm {
namespace {

template <typename T>
std::string fnv_hex(const Tensor<T>& t) {
  std::uint64_t h = 14695981039346656037ull;
  for (T v : t.storage()) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& wxh) {
  static const std::regex re(R"(^\s*(\d{1,6})\s*[xX]\s*(\d{1,6})\s*$)");
  std::smatch m;
  if (!std::regex_match(wxh, m, re)) throw std::invalid_argument("size must look like WxH, got '" + wxh + "'");
  const std::int64_t w = std::stoll(m[1]), h = std::stoll(m[2]);
  if (w < 1 || h < 1) throw std::invalid_argument("size extents must be positive: '" + wxh + "'");
  return {h, w};
}

nlohmann::json BenchReport::to_json() const {
  return {{"config_digest", config_digest},
          {"input_size", {{"width", input_w}, {"height", input_h}}},
          {"warmup", warmup},
          {"iters", iters},
          {"threads", threads},
          {"times_ms", times_ms},
          {"mean_ms", mean_ms},
          {"p50_ms", p50_ms},
          {"p95_ms", p95_ms},
          {"fps", fps},
          {"decode_mean_ms", decode_mean_ms},
          {"output_digest", output_digest}};
}

BenchReport BenchReport::from_json(const nlohmann::json& j) {
  BenchReport r;
  r.config_digest = j.at("config_digest").get<std::string>();
  r.input_w = j.at("input_size").at("width").get<std::int64_t>();
  r.input_h = j.at("input_size").at("height").get<std::int64_t>();
  r.warmup = j.at("warmup").get<int>();
  r.iters = j.at("iters").get<int>();
  r.threads = j.at("threads").get<int>();
  r.times_ms = j.at("times_ms").get<std::vector<double>>();
  r.mean_ms = j.at("mean_ms").get<double>();
  r.p50_ms = j.at("p50_ms").get<double>();
  r.p95_ms = j.at("p95_ms").get<double>();
  r.fps = j.at("fps").get<double>();
  r.decode_mean_ms = j.at("decode_mean_ms").get<double>();
  r.output_digest = j.at("output_digest").get<std::string>();
  return r;
}

std::string BenchReport::table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "config   %s\ninput    %lldx%lld (WxH)\nthreads  %d\nwarmup   %d\niters    %d\n",
                config_digest.c_str(), static_cast<long long>(input_w), static_cast<long long>(input_h), threads,
                warmup, iters);
  os << line;
  std::snprintf(line, sizeof line, "mean     %10.3f ms\np50      %10.3f ms\np95      %10.3f ms\nfps      %10.2f\ndecode   %10.3f ms\n",
                mean_ms, p50_ms, p95_ms, fps, decode_mean_ms);
  os << line;
  return os.str();
}

bool BenchReport::consistent() const {
  if (iters < 1 || static_cast<int>(times_ms.size()) != iters) return false;
  auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-9 * std::max(1.0, std::fabs(b)); };
  const double m = mean_of(times_ms);
  return close(mean_ms, m) && close(p50_ms, percentile(times_ms, 0.5)) && close(p95_ms, percentile(times_ms, 0.95)) &&
         close(fps, 1000.0 / m);
}

BenchReport bench_run(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w, int warmup, int iters,
                      int threads, std::uint64_t seed) {
  if (iters < 1) throw std::invalid_argument("bench: iters must be >= 1");
  if (warmup < 0) throw std::invalid_argument("bench: warmup must be >= 0");
  if (threads < 1) throw std::invalid_argument("bench: threads must be >= 1");
  ModelConfig c = cfg;
  c.input_h = input_h;
  c.input_w = input_w;
  Model<float> model = build_model<float>(c);
  init_weights(model, seed);

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor<float> x(model.input_shape());
  for (auto& v : x.storage()) v = static_cast<float>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0);

  const int saved = num_threads();
  set_num_threads(threads);
  BenchReport r;
  r.config_digest = c.digest();
  r.input_h = input_h;
  r.input_w = input_w;
  r.warmup = warmup;
  r.iters = iters;
  r.threads = threads;
  using clock = std::chrono::steady_clock;
  std::vector<double> decode_ms;
  Tensor<float> y;
  for (int i = 0; i < warmup + iters; ++i) {
    const auto t0 = clock::now();
    y = model.forward(x);
    const auto t1 = clock::now();
    const KeypointSet k = decode_heatmaps(y);
    const auto t2 = clock::now();
    (void)k;
    if (i >= warmup) {
      r.times_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      decode_ms.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
  }
  set_num_threads(saved);
  r.mean_ms = mean_of(r.times_ms);
  r.p50_ms = percentile(r.times_ms, 0.5);
  r.p95_ms = percentile(r.times_ms, 0.95);
  r.fps = 1000.0 / r.mean_ms;
  r.decode_mean_ms = mean_of(decode_ms);
  r.output_digest = fnv_hex(y);
  return r;
}

}  // namespace lgm
