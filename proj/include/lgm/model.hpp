#pragma once

// Declarative network assembly: a JSON configuration lists stages in
// execution order; build_model resolves shapes, skip pairings and patch
// layouts, and allocates parameters.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lgm/blocks.hpp"
#include "lgm/errors.hpp"

namespace lgm {

enum class StageKind { stem, mnv2, mobilevim, deconv, sfusion, head };

const char* to_string(StageKind kind);

struct StageConfig {
  std::string name;
  StageKind kind = StageKind::mnv2;
  std::int64_t out = 0;        // output channels (stem, mnv2, deconv, sfusion)
  int stride = 1;              // stem, mnv2
  std::int64_t expansion = 6;  // mnv2
  std::int64_t dim = 0;        // mobilevim projection width d
  std::int64_t patch_h = 2, patch_w = 2;
  std::string skip;                  // sfusion: name of the stage whose output is fused
  std::optional<FusionMode> fusion;  // sfusion: overrides the model-wide mode
};

struct ModelConfig {
  std::int64_t input_h = 256, input_w = 192;
  std::int64_t in_channels = 3;
  std::int64_t keypoints = 17;
  std::int64_t heatmap_stride = 4;
  std::int64_t mlp_ratio = 2;
  bool pad_patches = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> std{0.5, 0.5, 0.5};
  FusionMode fusion;
  std::vector<StageConfig> stages;

  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // FNV-1a over the canonical JSON dump.
  std::string digest() const;

  // The documented reference topology with its default widths.
  static ModelConfig reference(std::int64_t input_h = 256, std::int64_t input_w = 192,
                               std::int64_t keypoints = 17);
};

struct StemBlock {
  ConvBnAct conv;
};
struct HeadBlock {
  Conv2dLayer conv;
};

struct Stage {
  StageConfig cfg;
  std::variant<StemBlock, InvertedResidual, MobileVim, DeconvStage, Fusion, HeadBlock> block;
  Shape in_shape;   // C,H,W
  Shape out_shape;  // C,H,W
  std::optional<std::size_t> skip;  // index of the fused stage
  bool crop_up = false;             // deconv output one row/column larger than the skip
};

// Called after every stage; lets callers inspect intermediate activations.
template <typename T>
using StageObserver = std::function<void(const Stage&, const Var<T>&)>;

template <typename T>
struct Model {
  ModelConfig config;
  std::vector<Stage> stages;
  InitPlan plan;
  ParamSet<T> params;

  Shape input_shape() const { return {config.in_channels, config.input_h, config.input_w}; }
  Shape output_shape() const { return stages.back().out_shape; }

  // Tape-level forward on a batched N,C,H,W input.
  Var<T> forward(Context<T>& ctx, const Var<T>& x, const StageObserver<T>& observer = {}) const;
  // Eval-mode forward of a C,H,W or N,C,H,W input.
  Tensor<T> forward(const Tensor<T>& x) const;

  template <typename U>
  Model<U> cast() const {
    return Model<U>{config, stages, plan, params.template cast<U>()};
  }
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg);

// Trainable scalars, including biases and normalization affine terms.
template <typename T>
std::int64_t count_params(const Model<T>& model) {
  return model.params.trainable_count();
}

struct CostReport {
  CostLog layers;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t conv_macs = 0;          // conv + deconv layers
  std::int64_t token_mixing_macs = 0;  // LARM MLPs
  std::int64_t flops() const { return macs; }
  std::int64_t flops_2x() const { return 2 * macs; }
  nlohmann::json to_json(bool per_layer) const;
};

// MACs for one image at the model's configured input size.
template <typename T>
CostReport count_flops(const Model<T>& model);

// Rebuilds the structure at another input size (LARM widths follow the size).
CostReport count_flops(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w);

std::int64_t conv_macs(const ConvSpec& spec, std::int64_t out_h, std::int64_t out_w);
std::int64_t linear_macs(std::int64_t rows, std::int64_t in, std::int64_t out);

template <typename T>
void init_weights(Model<T>& model, std::uint64_t seed);

// ---- weight files ----------------------------------------------------------

class WeightError : public IoError {
 public:
  enum class Kind { bad_magic, bad_version, truncated, conflict };
  WeightError(Kind kind, const std::string& msg, std::vector<std::string> offenders = {})
      : IoError(msg), kind_(kind), offenders_(std::move(offenders)) {}
  Kind kind() const { return kind_; }
  const std::vector<std::string>& offenders() const { return offenders_; }

 private:
  Kind kind_;
  std::vector<std::string> offenders_;
};

inline constexpr std::uint32_t kWeightFormatVersion = 1;

template <typename T>
void save_weights(const ParamSet<T>& params, const std::filesystem::path& path);
// All-or-nothing: on any error the parameter set is left untouched.
template <typename T>
void load_weights(ParamSet<T>& params, const std::filesystem::path& path);

}  // namespace lgm
