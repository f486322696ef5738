// lgm-pose: benchmark, cost report, inference, toy training and self-test.
//
// Exit codes: 0 success, 1 test/assert failure, 2 usage error, 3 I/O or
// format error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lgm/bench.hpp"
#include "lgm/image.hpp"
#include "lgm/infer.hpp"
#include "lgm/model.hpp"
#include "lgm/npt.hpp"
#include "lgm/parallel.hpp"
#include "lgm/selftest.hpp"
#include "lgm/toy.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw lgm::IoError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw lgm::IoError("write to " + path + " failed");
}

int resolve_threads(int flag) {
  const char* env = std::getenv("LGM_THREADS");
  if (!env || !*env) return flag;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) throw UsageError(std::string("LGM_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(v);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LGM-Pose kernels, model assembly and benchmarking"};
  app.require_subcommand(1);

  std::string config_path, out_path, size_str, weights_path, image_path, dump_path;
  int warmup = 5, iters = 20, threads = 1, steps = 200, samples = 8;
  std::uint64_t seed = 0;
  bool per_layer = false, corrupt_npt = false;

  auto* bench = app.add_subcommand("bench", "Time the forward pass");
  bench->add_option("--config", config_path, "Model config JSON")->required();
  bench->add_option("--input-size", size_str, "Input size WxH (default: from config)");
  bench->add_option("--warmup", warmup, "Untimed iterations")->check(CLI::NonNegativeNumber);
  bench->add_option("--iters", iters, "Timed iterations")->check(CLI::PositiveNumber);
  bench->add_option("--threads", threads, "Worker threads (LGM_THREADS overrides)")->check(CLI::PositiveNumber);
  bench->add_option("--seed", seed, "Weight and input seed");
  bench->add_option("--out", out_path, "Report JSON path");

  auto* count = app.add_subcommand("count", "Parameter and MAC counts");
  count->add_option("--config", config_path, "Model config JSON")->required();
  count->add_option("--input-size", size_str, "Input size WxH (default: from config)");
  count->add_flag("--per-layer", per_layer, "Include the per-layer breakdown");
  count->add_option("--out", out_path, "Report JSON path");

  auto* init = app.add_subcommand("init", "Write freshly initialized weights");
  init->add_option("--config", config_path, "Model config JSON")->required();
  init->add_option("--seed", seed, "Initialization seed");
  init->add_option("--out", out_path, "Weight file")->required();

  auto* inf = app.add_subcommand("infer", "Run one image through the model");
  inf->add_option("--config", config_path, "Model config JSON")->required();
  inf->add_option("--weights", weights_path, "Weight file")->required();
  inf->add_option("--image", image_path, "Binary PPM (P6) or LGMT tensor")->required();
  inf->add_option("--dump-heatmaps", dump_path, "Write heatmaps as an LGMT tensor");
  inf->add_option("--out", out_path, "Keypoint JSON path (default: stdout)");

  auto* train = app.add_subcommand("train-toy", "Train on procedural blob images");
  train->add_option("--config", config_path, "Model config JSON")->required();
  train->add_option("--steps", steps, "Adam steps")->check(CLI::PositiveNumber);
  train->add_option("--seed", seed, "Data and initialization seed");
  train->add_option("--samples", samples, "Training images")->check(CLI::PositiveNumber);
  train->add_option("--out", out_path, "Loss trace JSON path");
  train->add_option("--save-weights", weights_path, "Write the trained weights");

  auto* self = app.add_subcommand("selftest", "Run the built-in verification suites");
  self->add_option("--seed", seed, "Seed for randomized instances");
  self->add_flag("--corrupt-npt-index-map", corrupt_npt, "Test hook: break the NPT unfold map")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    threads = resolve_threads(threads);
    lgm::set_num_threads(threads);
    auto load_config = [&] {
      lgm::ModelConfig cfg = lgm::ModelConfig::load(config_path);
      if (!size_str.empty()) {
        try {
          const auto [h, w] = lgm::parse_size(size_str);
          cfg.input_h = h;
          cfg.input_w = w;
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      return cfg;
    };

    if (*bench) {
      const lgm::ModelConfig cfg = load_config();
      const auto report = lgm::bench_run(cfg, cfg.input_h, cfg.input_w, warmup, iters, threads, seed);
      std::cout << report.table();
      if (!out_path.empty()) write_json(out_path, report.to_json());
      return kOk;
    }
    if (*count) {
      const lgm::ModelConfig cfg = load_config();
      const auto model = lgm::build_model<float>(cfg);
      const auto report = lgm::count_flops(model);
      if (per_layer) {
        std::printf("%-28s %-13s %14s %10s  %s\n", "layer", "kind", "MACs", "params", "output");
        for (const auto& l : report.layers) {
          std::printf("%-28s %-13s %14lld %10lld  %s\n", l.name.c_str(), l.kind.c_str(), static_cast<long long>(l.macs),
                      static_cast<long long>(l.params), lgm::shape_str(l.output).c_str());
        }
      }
      std::printf("input          %lldx%lld (WxH)\nparams         %lld\nMACs           %lld (%.3f G)\n2xMACs         %lld\n"
                  "conv MACs      %lld\nmixing MACs    %lld\n",
                  static_cast<long long>(cfg.input_w), static_cast<long long>(cfg.input_h),
                  static_cast<long long>(lgm::count_params(model)), static_cast<long long>(report.macs),
                  static_cast<double>(report.macs) / 1e9, static_cast<long long>(report.flops_2x()),
                  static_cast<long long>(report.conv_macs), static_cast<long long>(report.token_mixing_macs));
      if (!out_path.empty()) write_json(out_path, report.to_json(per_layer));
      return kOk;
    }
    if (*init) {
      auto model = lgm::build_model<float>(load_config());
      lgm::init_weights(model, seed);
      lgm::save_weights(model.params, out_path);
      return kOk;
    }
    if (*inf) {
      auto model = lgm::build_model<float>(load_config());
      lgm::load_weights(model.params, weights_path);
      const auto r = lgm::infer(model, lgm::load_image(image_path));
      if (!dump_path.empty()) lgm::write_raw_tensor(dump_path, r.heatmaps);
      const nlohmann::json j{{"image", image_path},
                             {"width", r.image_w},
                             {"height", r.image_h},
                             {"keypoints", lgm::keypoints_to_json(r.image_kps)},
                             {"heatmap_keypoints", lgm::keypoints_to_json(r.heatmap_kps)}};
      if (out_path.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_json(out_path, j);
      }
      return kOk;
    }
    if (*train) {
      const lgm::ModelConfig cfg = load_config();
      const auto data = lgm::make_toy_dataset(cfg, static_cast<std::size_t>(samples), seed);
      lgm::TrainOptions opt;
      opt.steps = steps;
      opt.seed = seed;
      lgm::Model<float> trained;
      const auto r = lgm::train_toy(cfg, data, opt, &trained);
      std::printf("initial loss %.6e\nfinal loss   %.6e (%.4f%% of initial)\nwithin 2 cells %.4f\npckh %.4f\n", r.initial_loss,
                  r.final_loss, 100.0 * r.final_loss / r.initial_loss, r.within_2_cells, r.pckh);
      if (!out_path.empty()) write_json(out_path, r.to_json());
      if (!weights_path.empty()) lgm::save_weights(trained.params, weights_path);
      return kOk;
    }
    if (*self) {
      lgm::npt::testing::set_corrupt_index_map(corrupt_npt);
      const auto r = lgm::run_selftest(seed);
      std::cout << r.summary();
      return r.ok() ? kOk : kFailure;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const lgm::TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kFailure;
  } catch (const lgm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const lgm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kIo;
  } catch (const lgm::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
