#include "lgm/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace lgm {
namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& msg) { throw ConfigError(msg); }

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) config_error(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename V>
V get_or(const json& j, const char* key, V fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    config_error(where + "." + key + ": " + e.what());
  }
}

std::int64_t positive(const json& j, const char* key, std::int64_t fallback, const std::string& where) {
  const auto v = get_or<std::int64_t>(j, key, fallback, where);
  if (v < 1) config_error(where + "." + key + " must be >= 1, got " + std::to_string(v));
  return v;
}

FusionMode parse_fusion(const json& j, FusionMode base, const std::string& where) {
  reject_unknown(j, {"mode", "shuffle_groups", "conv_groups"}, where);
  FusionMode m = base;
  if (j.contains("mode")) {
    try {
      m.kind = fusion_kind_from_string(j.at("mode").get<std::string>());
    } catch (const std::exception& e) {
      config_error(where + ".mode: " + e.what());
    }
  }
  m.shuffle_groups = positive(j, "shuffle_groups", m.shuffle_groups, where);
  m.conv_groups = positive(j, "conv_groups", m.conv_groups, where);
  return m;
}

json fusion_json(const FusionMode& m) {
  return {{"mode", to_string(m.kind)}, {"shuffle_groups", m.shuffle_groups}, {"conv_groups", m.conv_groups}};
}

StageKind stage_kind_from_string(const std::string& s, const std::string& where) {
  if (s == "stem") return StageKind::stem;
  if (s == "mnv2") return StageKind::mnv2;
  if (s == "mobilevim") return StageKind::mobilevim;
  if (s == "deconv") return StageKind::deconv;
  if (s == "sfusion") return StageKind::sfusion;
  if (s == "head") return StageKind::head;
  config_error(where + ": unknown stage kind '" + s + "'");
}

StageConfig parse_stage(const json& j, std::size_t i, const FusionMode& fusion) {
  std::string where = "stages[" + std::to_string(i) + "]";
  if (!j.is_object() || !j.contains("kind")) config_error(where + ": stage needs a 'kind'");
  StageConfig s;
  s.kind = stage_kind_from_string(get_or<std::string>(j, "kind", "", where), where);
  s.name = get_or<std::string>(j, "name", std::string(to_string(s.kind)) + std::to_string(i), where);
  where += " (" + s.name + ")";
  switch (s.kind) {
    case StageKind::stem:
      reject_unknown(j, {"name", "kind", "out", "stride"}, where);
      s.out = positive(j, "out", 0, where);
      s.stride = static_cast<int>(positive(j, "stride", 2, where));
      break;
    case StageKind::mnv2:
      reject_unknown(j, {"name", "kind", "out", "stride", "expansion"}, where);
      s.out = positive(j, "out", 0, where);
      s.stride = static_cast<int>(positive(j, "stride", 1, where));
      s.expansion = positive(j, "expansion", 6, where);
      break;
    case StageKind::mobilevim: {
      reject_unknown(j, {"name", "kind", "dim", "patch"}, where);
      s.dim = positive(j, "dim", 0, where);
      const auto patch = get_or<std::vector<std::int64_t>>(j, "patch", {2, 2}, where);
      if (patch.size() != 2 || patch[0] < 1 || patch[1] < 1) {
        config_error(where + ".patch must be [h, w] with positive entries");
      }
      s.patch_h = patch[0];
      s.patch_w = patch[1];
      break;
    }
    case StageKind::deconv:
      reject_unknown(j, {"name", "kind", "out"}, where);
      s.out = positive(j, "out", 0, where);
      break;
    case StageKind::sfusion:
      reject_unknown(j, {"name", "kind", "out", "skip", "fusion"}, where);
      s.skip = get_or<std::string>(j, "skip", "", where);
      if (s.skip.empty()) config_error(where + ": sfusion stage needs a 'skip' stage name");
      s.out = j.contains("out") ? positive(j, "out", 0, where) : 0;
      if (j.contains("fusion")) s.fusion = parse_fusion(j.at("fusion"), fusion, where + ".fusion");
      break;
    case StageKind::head:
      reject_unknown(j, {"name", "kind"}, where);
      break;
  }
  return s;
}

json stage_json(const StageConfig& s) {
  json j{{"name", s.name}, {"kind", to_string(s.kind)}};
  switch (s.kind) {
    case StageKind::stem:
      j["out"] = s.out;
      j["stride"] = s.stride;
      break;
    case StageKind::mnv2:
      j["out"] = s.out;
      j["stride"] = s.stride;
      j["expansion"] = s.expansion;
      break;
    case StageKind::mobilevim:
      j["dim"] = s.dim;
      j["patch"] = {s.patch_h, s.patch_w};
      break;
    case StageKind::deconv:
      j["out"] = s.out;
      break;
    case StageKind::sfusion:
      j["skip"] = s.skip;
      if (s.out > 0) j["out"] = s.out;
      if (s.fusion) j["fusion"] = fusion_json(*s.fusion);
      break;
    case StageKind::head:
      break;
  }
  return j;
}

std::string hw_str(const Shape& s) { return std::to_string(s[1]) + "x" + std::to_string(s[2]); }

// Keeps the top-left skip_h x skip_w window of every channel.
std::shared_ptr<const std::vector<std::int64_t>> crop_index(const Shape& up, std::int64_t h, std::int64_t w) {
  auto map = std::make_shared<std::vector<std::int64_t>>();
  map->reserve(static_cast<std::size_t>(up[0] * up[1] * h * w));
  for (std::int64_t nc = 0; nc < up[0] * up[1]; ++nc) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) map->push_back((nc * up[2] + y) * up[3] + x);
    }
  }
  return map;
}

}  // namespace

const char* to_string(StageKind kind) {
  switch (kind) {
    case StageKind::stem:
      return "stem";
    case StageKind::mnv2:
      return "mnv2";
    case StageKind::mobilevim:
      return "mobilevim";
    case StageKind::deconv:
      return "deconv";
    case StageKind::sfusion:
      return "sfusion";
    case StageKind::head:
      return "head";
  }
  return "?";
}

// ---- configuration -----------------------------------------------------------

ModelConfig ModelConfig::from_json(const json& j) {
  const std::string where = "config";
  reject_unknown(j, {"input_size", "in_channels", "keypoints", "heatmap_stride", "mlp_ratio", "pad_patches",
                     "bn_eps", "bn_momentum", "normalize", "fusion", "stages"},
                 where);
  ModelConfig c;
  const auto size = get_or<std::vector<std::int64_t>>(j, "input_size", {c.input_h, c.input_w}, where);
  if (size.size() != 2 || size[0] < 1 || size[1] < 1) config_error("config.input_size must be [H, W]");
  c.input_h = size[0];
  c.input_w = size[1];
  c.in_channels = positive(j, "in_channels", c.in_channels, where);
  c.keypoints = positive(j, "keypoints", c.keypoints, where);
  c.heatmap_stride = positive(j, "heatmap_stride", c.heatmap_stride, where);
  c.mlp_ratio = positive(j, "mlp_ratio", c.mlp_ratio, where);
  c.pad_patches = get_or<bool>(j, "pad_patches", c.pad_patches, where);
  c.bn_eps = get_or<double>(j, "bn_eps", c.bn_eps, where);
  c.bn_momentum = get_or<double>(j, "bn_momentum", c.bn_momentum, where);
  if (!(c.bn_eps > 0)) config_error("config.bn_eps must be positive");
  if (!(c.bn_momentum >= 0 && c.bn_momentum <= 1)) config_error("config.bn_momentum must lie in [0, 1]");
  if (j.contains("normalize")) {
    const json& n = j.at("normalize");
    reject_unknown(n, {"mean", "std"}, "config.normalize");
    c.mean = get_or<std::vector<double>>(n, "mean", c.mean, "config.normalize");
    c.std = get_or<std::vector<double>>(n, "std", c.std, "config.normalize");
  }
  if (static_cast<std::int64_t>(c.mean.size()) != c.in_channels ||
      static_cast<std::int64_t>(c.std.size()) != c.in_channels) {
    config_error("config.normalize: mean/std need one entry per input channel");
  }
  for (double s : c.std) {
    if (!(s > 0)) config_error("config.normalize.std entries must be positive");
  }
  if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion"), c.fusion, "config.fusion");
  if (!j.contains("stages") || !j.at("stages").is_array() || j.at("stages").empty()) {
    config_error("config.stages must be a non-empty array");
  }
  const json& stages = j.at("stages");
  for (std::size_t i = 0; i < stages.size(); ++i) c.stages.push_back(parse_stage(stages[i], i, c.fusion));
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json ModelConfig::to_json() const {
  json stages_j = json::array();
  for (const auto& s : stages) stages_j.push_back(stage_json(s));
  return {{"input_size", {input_h, input_w}},
          {"in_channels", in_channels},
          {"keypoints", keypoints},
          {"heatmap_stride", heatmap_stride},
          {"mlp_ratio", mlp_ratio},
          {"pad_patches", pad_patches},
          {"bn_eps", bn_eps},
          {"bn_momentum", bn_momentum},
          {"normalize", {{"mean", mean}, {"std", std}}},
          {"fusion", fusion_json(fusion)},
          {"stages", stages_j}};
}

std::string ModelConfig::digest() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig ModelConfig::reference(std::int64_t input_h, std::int64_t input_w, std::int64_t keypoints) {
  ModelConfig c;
  c.input_h = input_h;
  c.input_w = input_w;
  c.keypoints = keypoints;
  auto mnv2 = [](std::string name, std::int64_t out, int stride, std::int64_t t) {
    StageConfig s;
    s.name = std::move(name);
    s.kind = StageKind::mnv2;
    s.out = out;
    s.stride = stride;
    s.expansion = t;
    return s;
  };
  auto vim = [](std::string name, std::int64_t dim) {
    StageConfig s;
    s.name = std::move(name);
    s.kind = StageKind::mobilevim;
    s.dim = dim;
    return s;
  };
  auto up = [](std::string name, std::int64_t out) {
    StageConfig s;
    s.name = std::move(name);
    s.kind = StageKind::deconv;
    s.out = out;
    return s;
  };
  auto fuse = [](std::string name, std::string skip) {
    StageConfig s;
    s.name = std::move(name);
    s.kind = StageKind::sfusion;
    s.skip = std::move(skip);
    return s;
  };
  StageConfig stem;
  stem.name = "stem";
  stem.kind = StageKind::stem;
  stem.out = 16;
  stem.stride = 2;
  StageConfig head;
  head.name = "head";
  head.kind = StageKind::head;
  c.stages = {stem,
              mnv2("a1", 16, 1, 1),
              mnv2("b1", 24, 2, 6),
              mnv2("b2", 24, 1, 6),
              mnv2("c1", 48, 2, 6),
              vim("c2", 64),
              mnv2("d1", 64, 2, 6),
              vim("d2", 80),
              mnv2("e1", 96, 2, 6),
              vim("e2", 96),
              up("up1", 64),
              fuse("fuse1", "d2"),
              up("up2", 48),
              fuse("fuse2", "c2"),
              up("up3", 32),
              fuse("fuse3", "b2"),
              head};
  return c;
}

// ---- assembly ----------------------------------------------------------------

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  Model<T> m;
  m.config = cfg;
  if (cfg.stages.empty()) config_error("model has no stages");
  Shape shape{cfg.in_channels, cfg.input_h, cfg.input_w};
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& sc = cfg.stages[i];
    if (!by_name.emplace(sc.name, i).second) config_error("duplicate stage name '" + sc.name + "'");
    if (sc.kind == StageKind::head && i + 1 != cfg.stages.size()) {
      config_error("head stage '" + sc.name + "' must be the last stage");
    }
    Stage st;
    st.cfg = sc;
    st.in_shape = shape;
    const std::int64_t C = shape[0];
    try {
      switch (sc.kind) {
        case StageKind::stem: {
          auto conv = ConvBnAct::create(m.params, m.plan, sc.name, {C, sc.out, 3, sc.stride, 1}, true, cfg.bn_eps,
                                        cfg.bn_momentum);
          st.block = StemBlock{conv};
          CostLog scratch;
          shape = conv.cost(shape, scratch);
          break;
        }
        case StageKind::mnv2: {
          auto b = InvertedResidual::create(m.params, m.plan, sc.name, C, sc.out, sc.stride, sc.expansion,
                                            cfg.bn_eps, cfg.bn_momentum);
          CostLog scratch;
          shape = b.cost(shape, scratch);
          st.block = std::move(b);
          break;
        }
        case StageKind::mobilevim: {
          const auto dims = npt::PatchDims::make(shape[1], shape[2], sc.dim, sc.patch_h, sc.patch_w, cfg.pad_patches);
          st.block = MobileVim::create(m.params, m.plan, sc.name, C, sc.dim, dims, cfg.mlp_ratio);
          break;
        }
        case StageKind::deconv: {
          auto d = DeconvStage::create(m.params, m.plan, sc.name, C, sc.out, cfg.bn_eps, cfg.bn_momentum);
          CostLog scratch;
          shape = d.cost(shape, scratch);
          st.block = std::move(d);
          break;
        }
        case StageKind::sfusion: {
          auto it = by_name.find(sc.skip);
          if (it == by_name.end() || it->second == i) {
            config_error("fusion stage '" + sc.name + "' refers to unknown earlier stage '" + sc.skip + "'");
          }
          const Stage& skip = m.stages[it->second];
          const Shape& ss = skip.out_shape;
          const std::string producer = i > 0 ? cfg.stages[i - 1].name : "input";
          const std::int64_t dh = shape[1] - ss[1], dw = shape[2] - ss[2];
          if (dh < 0 || dw < 0 || dh > 1 || dw > 1) {
            config_error("resolution mismatch in '" + sc.name + "': stage '" + producer + "' outputs " + hw_str(shape) + " but skip stage '" +
                         skip.cfg.name + "' outputs " + hw_str(ss));
          }
          st.crop_up = dh != 0 || dw != 0;
          st.skip = it->second;
          const std::int64_t out = sc.out > 0 ? sc.out : C;
          st.block = Fusion::create(m.params, m.plan, sc.name, sc.fusion.value_or(cfg.fusion), C, ss[0], out);
          shape = {out, ss[1], ss[2]};
          break;
        }
        case StageKind::head: {
          st.block = HeadBlock{
              Conv2dLayer::create(m.params, m.plan, sc.name, {C, cfg.keypoints, 1, 1, 0, 1, true})};
          shape = {cfg.keypoints, shape[1], shape[2]};
          break;
        }
      }
    } catch (const ShapeError& e) {
      config_error("stage '" + sc.name + "': " + e.what());
    }
    st.out_shape = shape;
    m.stages.push_back(std::move(st));
  }
  if (cfg.stages.back().kind != StageKind::head) config_error("the last stage must be a head");
  if (cfg.input_h % cfg.heatmap_stride != 0 || cfg.input_w % cfg.heatmap_stride != 0 ||
      shape[1] != cfg.input_h / cfg.heatmap_stride || shape[2] != cfg.input_w / cfg.heatmap_stride) {
    config_error("head resolution " + hw_str(shape) + " is not input " + std::to_string(cfg.input_h) + "x" +
                 std::to_string(cfg.input_w) + " divided by heatmap_stride " + std::to_string(cfg.heatmap_stride));
  }
  return m;
}

template <typename T>
Var<T> Model<T>::forward(Context<T>& ctx, const Var<T>& x, const StageObserver<T>& observer) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != input_shape()) {
    throw ShapeError("model expects N," + shape_str(input_shape()).substr(1) + " input, got " + shape_str(s));
  }
  std::vector<Var<T>> outs;
  outs.reserve(stages.size());
  Var<T> h = x;
  for (const Stage& st : stages) {
    h = std::visit(
        [&](const auto& b) -> Var<T> {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) {
            return b.conv.forward(ctx, h);
          } else if constexpr (std::is_same_v<B, HeadBlock>) {
            return b.conv.forward(ctx, h);
          } else if constexpr (std::is_same_v<B, Fusion>) {
            const Var<T>& skip = outs[*st.skip];
            Var<T> up = h;
            if (st.crop_up) {
              const Shape& us = up.shape();
              const Shape& ks = skip.shape();
              up = gather(up, crop_index(us, ks[2], ks[3]), {us[0], us[1], ks[2], ks[3]});
            }
            return b.forward(ctx, up, skip);
          } else {
            return b.forward(ctx, h);
          }
        },
        st.block);
    if (observer) observer(st, h);
    outs.push_back(h);
  }
  return h;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x) const {
  const bool unbatched = x.ndim() == 3;
  Tape<T> tape(false);
  Context<T> ctx(tape, params, ForwardMode{});
  Var<T> in = tape.leaf(unbatched ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x);
  Tensor<T> y = forward(ctx, in).value();
  if (unbatched) return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
  return y;
}

// ---- cost accounting ---------------------------------------------------------

std::int64_t conv_macs(const ConvSpec& spec, std::int64_t out_h, std::int64_t out_w) {
  return spec.out * (spec.in / spec.groups) * spec.kernel * spec.kernel * out_h * out_w;
}

std::int64_t linear_macs(std::int64_t rows, std::int64_t in, std::int64_t out) { return rows * in * out; }

template <typename T>
CostReport count_flops(const Model<T>& model) {
  CostReport r;
  for (const Stage& st : model.stages) {
    std::visit(
        [&](const auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) {
            b.conv.cost(st.in_shape, r.layers);
          } else if constexpr (std::is_same_v<B, HeadBlock>) {
            b.conv.cost(st.in_shape, r.layers);
          } else if constexpr (std::is_same_v<B, Fusion>) {
            const Shape& skip = model.stages[*st.skip].out_shape;
            b.cost({st.in_shape[0], skip[1], skip[2]}, r.layers);
          } else {
            b.cost(st.in_shape, r.layers);
          }
        },
        st.block);
  }
  for (const auto& l : r.layers) {
    r.macs += l.macs;
    r.params += l.params;
    if (l.kind == "token_mixing") {
      r.token_mixing_macs += l.macs;
    } else {
      r.conv_macs += l.macs;
    }
  }
  return r;
}

CostReport count_flops(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w) {
  ModelConfig c = cfg;
  c.input_h = input_h;
  c.input_w = input_w;
  return count_flops(build_model<float>(c));
}

json CostReport::to_json(bool per_layer) const {
  json j{{"params", params},
         {"macs", macs},
         {"flops_as_macs", macs},
         {"flops_as_2macs", flops_2x()},
         {"conv_macs", conv_macs},
         {"token_mixing_macs", token_mixing_macs}};
  if (per_layer) {
    json rows = json::array();
    for (const auto& l : layers) {
      rows.push_back({{"name", l.name},
                      {"kind", l.kind},
                      {"macs", l.macs},
                      {"flops_2x", 2 * l.macs},
                      {"params", l.params},
                      {"output", l.output}});
    }
    j["layers"] = rows;
  }
  return j;
}

// ---- initialization ----------------------------------------------------------

template <typename T>
void init_weights(Model<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform01 = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  for (const ParamInfo& p : model.plan) {
    Tensor<T>& t = model.params[p.index];
    switch (p.init) {
      case InitKind::ones:
        std::fill(t.storage().begin(), t.storage().end(), T{1});
        break;
      case InitKind::zeros:
        std::fill(t.storage().begin(), t.storage().end(), T{0});
        break;
      case InitKind::fan_in_uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
        for (auto& v : t.storage()) v = static_cast<T>((2.0 * uniform01() - 1.0) * bound);
        break;
      }
    }
  }
}

// ---- weight files ------------------------------------------------------------

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  bool done() const { return pos_ == buf_.size(); }
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) {
      throw WeightError(WeightError::Kind::truncated, std::string("weight file truncated while reading ") + what);
    }
  }
  std::uint32_t le(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint32_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void save_weights(const ParamSet<T>& params, const std::filesystem::path& path) {
  std::string out = "LGMW";
  put_u32(out, kWeightFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor<T>& t = params[i];
    if (name.size() > 0xffff || t.ndim() > 0xff) throw IoError("tensor " + name + " cannot be encoded");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_u8(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.storage()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write to " + path.string() + " failed");
}

template <typename T>
void load_weights(ParamSet<T>& params, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open weight file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  Reader r(buf);
  if (buf.size() < 4 || buf.compare(0, 4, "LGMW") != 0) {
    throw WeightError(WeightError::Kind::bad_magic, path.string() + " is not an LGMW weight file");
  }
  r.bytes(4, "magic");
  const std::uint32_t version = r.le(4, "version");
  if (version != kWeightFormatVersion) {
    throw WeightError(WeightError::Kind::bad_version, "unsupported weight format version " + std::to_string(version));
  }
  const std::uint32_t count = r.le(4, "tensor count");
  std::map<std::string, Tensor<T>> loaded;
  std::vector<std::string> offenders;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.le(2, "name length"), "name");
    const std::uint32_t ndim = r.le(1, "rank");
    Shape shape;
    for (std::uint32_t k = 0; k < ndim; ++k) shape.push_back(r.le(4, "dims"));
    const std::int64_t n = shape_numel(shape);
    r.need(static_cast<std::size_t>(n) * 4, "payload");
    std::vector<T> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
      const std::uint32_t bits = r.le(4, "payload");
      float fv;
      std::memcpy(&fv, &bits, sizeof fv);
      v = static_cast<T>(fv);
    }
    if (!loaded.emplace(name, Tensor<T>(shape, std::move(data))).second) offenders.push_back(name + " (duplicate)");
  }
  if (!r.done()) {
    throw WeightError(WeightError::Kind::conflict, "unexpected trailing bytes after " + std::to_string(count) + " tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = loaded.find(params.name(i));
    if (it == loaded.end()) {
      offenders.push_back(params.name(i) + " (missing)");
    } else if (it->second.shape() != params[i].shape()) {
      offenders.push_back(params.name(i) + " (shape " + shape_str(it->second.shape()) + " vs " +
                          shape_str(params[i].shape()) + ")");
    }
  }
  for (const auto& [name, t] : loaded) {
    if (!params.find(name)) offenders.push_back(name + " (unexpected)");
  }
  if (!offenders.empty()) {
    std::string msg = "weight file does not match the model:";
    for (std::size_t i = 0; i < offenders.size(); ++i) msg += (i ? "; " : " ") + offenders[i];
    throw WeightError(WeightError::Kind::conflict, msg, offenders);
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] = std::move(loaded.at(params.name(i)));
}

template Model<float> build_model(const ModelConfig&);
template Model<double> build_model(const ModelConfig&);
template struct Model<float>;
template struct Model<double>;
template CostReport count_flops(const Model<float>&);
template CostReport count_flops(const Model<double>&);
template void init_weights(Model<float>&, std::uint64_t);
template void init_weights(Model<double>&, std::uint64_t);
template void save_weights(const ParamSet<float>&, const std::filesystem::path&);
template void save_weights(const ParamSet<double>&, const std::filesystem::path&);
template void load_weights(ParamSet<float>&, const std::filesystem::path&);
template void load_weights(ParamSet<double>&, const std::filesystem::path&);

}  // namespace lgm
