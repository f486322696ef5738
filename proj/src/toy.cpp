#include "lgm/toy.hpp"

#include <cmath>
#include <random>

#include "lgm/image.hpp"
#include "lgm/optim.hpp"

namespace lgm {
namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Evenly spaced hues at full saturation.
std::array<double, 3> palette(std::size_t j, std::size_t n) {
  const double h = 6.0 * static_cast<double>(j) / static_cast<double>(std::max<std::size_t>(n, 1));
  const double x = 1 - std::fabs(std::fmod(h, 2.0) - 1);
  switch (static_cast<int>(h)) {
    case 0:
      return {1, x, 0};
    case 1:
      return {x, 1, 0};
    case 2:
      return {0, 1, x};
    case 3:
      return {0, x, 1};
    case 4:
      return {x, 0, 1};
    default:
      return {1, 0, x};
  }
}

std::string first_bad_stage(const std::vector<std::string>& order, const std::vector<bool>& finite) {
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!finite[i]) return order[i];
  }
  return {};
}

}  // namespace

std::vector<ToySample> make_toy_dataset(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
  if (cfg.in_channels != 3) throw ConfigError("toy images are RGB; config has " + std::to_string(cfg.in_channels) + " input channels");
  std::mt19937_64 rng(seed);
  const std::int64_t H = cfg.input_h, W = cfg.input_w, s = cfg.heatmap_stride;
  const std::int64_t hh = H / s, hw = W / s;
  const auto K = static_cast<std::size_t>(cfg.keypoints);
  const double blob = 0.75 * static_cast<double>(s);
  std::vector<ToySample> out;
  for (std::size_t n = 0; n < count; ++n) {
    ToySample smp;
    smp.image = Tensor<float>({3, H, W});
    auto img = smp.image.data();
    for (auto& v : img) v = static_cast<float>(0.35 * unit(rng));
    for (std::size_t j = 0; j < K; ++j) {
      Keypoint k;
      k.x = 1 + unit(rng) * static_cast<double>(hw - 3);
      k.y = 1 + unit(rng) * static_cast<double>(hh - 3);
      k.score = 1;
      smp.keypoints.points.push_back(k);
      const auto color = palette(j, K);
      const double cx = k.x * static_cast<double>(s), cy = k.y * static_cast<double>(s);
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double a = std::exp(-d2 / (2 * blob * blob));
          if (a < 1e-4) continue;
          for (std::int64_t c = 0; c < 3; ++c) {
            float& v = img[static_cast<std::size_t>((c * H + y) * W + x)];
            v = static_cast<float>(v * (1 - a) + color[static_cast<std::size_t>(c)] * a);
          }
        }
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

ModelConfig toy_config() { return ModelConfig::reference(64, 48, 4); }

Tensor<float> toy_batch(const ModelConfig& cfg, const std::vector<ToySample>& data) {
  const std::int64_t C = cfg.in_channels, H = cfg.input_h, W = cfg.input_w;
  Tensor<float> batch({static_cast<std::int64_t>(data.size()), C, H, W});
  for (std::size_t n = 0; n < data.size(); ++n) {
    if (data[n].image.shape() != Shape{C, H, W}) {
      throw ShapeError("toy sample " + std::to_string(n) + " has shape " + shape_str(data[n].image.shape()));
    }
    const Tensor<float> x = normalize_channels(data[n].image, cfg.mean, cfg.std);
    std::copy(x.storage().begin(), x.storage().end(), batch.storage().begin() + static_cast<std::ptrdiff_t>(n * x.numel()));
  }
  return batch;
}

nlohmann::json TrainResult::to_json() const {
  return {{"losses", losses},
          {"initial_loss", initial_loss},
          {"final_loss", final_loss},
          {"pckh", pckh},
          {"within_2_cells", within_2_cells}};
}

TrainResult train_toy(const ModelConfig& cfg, const std::vector<ToySample>& data, const TrainOptions& opt,
                      Model<float>* trained) {
  if (data.empty()) throw std::invalid_argument("train_toy: empty dataset");
  if (opt.steps < 1) throw std::invalid_argument("train_toy: steps must be >= 1");
  Model<float> model = build_model<float>(cfg);
  init_weights(model, opt.seed);

  const Shape out = model.output_shape();
  const auto N = static_cast<std::int64_t>(data.size());
  const Tensor<float> x = toy_batch(cfg, data);
  Tensor<float> target({N, out[0], out[1], out[2]});
  Tensor<float> mask({N, out[0], out[1], out[2]});
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto t = gaussian_targets<float>(data[n].keypoints, out[1], out[2], opt.sigma);
    const auto m = keypoint_mask<float>(data[n].keypoints, out[1], out[2]);
    std::copy(t.storage().begin(), t.storage().end(), target.storage().begin() + static_cast<std::ptrdiff_t>(n * t.numel()));
    std::copy(m.storage().begin(), m.storage().end(), mask.storage().begin() + static_cast<std::ptrdiff_t>(n * m.numel()));
  }

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (model.params.trainable(i)) trainable.push_back(i);
  }
  AdamState<float> adam;
  adam.lr = opt.lr;
  const int drop1 = static_cast<int>(std::lround(0.75 * opt.steps));
  const int drop2 = static_cast<int>(std::lround(0.90 * opt.steps));

  TrainResult r;
  for (int step = 0; step < opt.steps; ++step) {
    adam.lr = opt.lr * (step >= drop1 ? 0.1 : 1.0) * (step >= drop2 ? 0.1 : 1.0);
    Tape<float> tape;
    Context<float> ctx(tape, model.params, ForwardMode{true, true}, &model.params);
    std::vector<std::string> order;
    std::vector<bool> finite;
    Var<float> pred = model.forward(ctx, tape.leaf(x), [&](const Stage& st, const Var<float>& v) {
      order.push_back(st.cfg.name);
      finite.push_back(all_finite(v.value()));
    });
    Var<float> loss = masked_mse(pred, target, mask);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) {
      const std::string bad = first_bad_stage(order, finite);
      throw TrainingError("non-finite loss at step " + std::to_string(step) +
                          (bad.empty() ? std::string(" (all stage outputs finite)") : "; first non-finite stage: " + bad));
    }
    r.losses.push_back(l);
    GradResult<float> grads = tape.backward(loss);
    std::vector<Tensor<float>*> ps;
    std::vector<const Tensor<float>*> gs;
    for (std::size_t idx : trainable) {
      ps.push_back(&model.params[idx]);
      const auto bound = ctx.bound(idx);
      gs.push_back(bound ? grads.find(*bound) : nullptr);
    }
    adam_step(ps, gs, adam);
  }
  r.initial_loss = r.losses.front();

  // Re-estimate normalization statistics on the training batch; momentum 1
  // replaces the running statistics with the batch statistics.
  {
    ModelConfig mc = cfg;
    mc.bn_momentum = 1.0;
    Model<float> calib = build_model<float>(mc);
    calib.params = model.params;
    Tape<float> tape(false);
    Context<float> ctx(tape, calib.params, ForwardMode{true, false}, &model.params);
    calib.forward(ctx, tape.leaf(x));
  }

  const Tensor<float> hm = model.forward(x);
  {
    Tape<float> tape(false);
    Var<float> p = tape.leaf(hm);
    r.final_loss = masked_mse(p, target, mask).value()[0];
  }
  std::size_t visible = 0, hit2 = 0;
  double pck_hits = 0;
  const std::int64_t plane = out[0] * out[1] * out[2];
  for (std::int64_t n = 0; n < N; ++n) {
    Tensor<float> one(out, std::vector<float>(hm.storage().begin() + n * plane, hm.storage().begin() + (n + 1) * plane));
    const KeypointSet pred = decode_heatmaps(one);
    const KeypointSet& gt = data[static_cast<std::size_t>(n)].keypoints;
    std::size_t vis = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (!gt[j].visible) continue;
      ++vis;
      if (std::hypot(pred[j].x - gt[j].x, pred[j].y - gt[j].y) <= 2.0) ++hit2;
    }
    if (auto p = pckh(pred, gt, 2.0)) pck_hits += *p * static_cast<double>(vis);
    visible += vis;
    r.predictions.push_back(pred);
  }
  if (visible > 0) {
    r.within_2_cells = static_cast<double>(hit2) / static_cast<double>(visible);
    r.pckh = pck_hits / static_cast<double>(visible);
  }
  if (trained) *trained = std::move(model);
  return r;
}

}  // namespace lgm
