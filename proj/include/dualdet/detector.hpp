#pragma once

// A small fully convolutional detector with two prediction branches.
//
//   image -> stride-2 conv stem -> level features (strides 8, 16, ...)
//         -> classification tower + regression tower (shared across levels)
//         -> one-to-one head:  cls conv (K), ltrb conv (4)
//         -> one-to-many head: cls conv (K*A), ltrb conv (4*A) [, center-ness conv (A)]
//
// With share_subnets the one-to-many head reads the same towers as the
// one-to-one head; otherwise it owns a private copy of both towers.
// LTRB outputs are exp(raw) * stride.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualdet/assignment.hpp"
#include "dualdet/error.hpp"
#include "dualdet/losses.hpp"
#include "dualdet/tensor.hpp"
#include "json.hpp"

namespace dualdet {

enum class Branch { o2o, o2m };

struct ModelConfig {
  std::size_t input_height = 64, input_width = 64, input_channels = 1;
  /// Output channels of the stride-2 stem convolutions; the first pyramid
  /// level has stride 2^stem_channels.size().
  std::vector<std::size_t> stem_channels{16, 32, 64};
  std::size_t num_levels = 2;
  std::size_t subnet_channels = 32;
  std::size_t subnet_depth = 2;
  std::size_t num_classes = 3;
  O2MStyle o2m_style = O2MStyle::fcos;
  bool share_subnets = true;
  bool with_o2o = true;
  bool with_o2m = true;
  double prior_prob = 0.01;
  AnchorConfig anchors;  // consulted for the RetinaNet-style head only

  std::size_t stride(std::size_t level) const {
    return (std::size_t{1} << stem_channels.size()) << level;
  }
  std::size_t feature_channels() const { return stem_channels.back(); }
  std::size_t anchors_per_location() const {
    return o2m_style == O2MStyle::retina ? anchors.anchors_per_location() : 1;
  }

  void validate() const {
    if (stem_channels.empty() || num_levels == 0 || subnet_depth == 0 || subnet_channels == 0 ||
        input_channels == 0)
      throw ConfigError("model: empty stem, level, tower or channel count");
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (!with_o2o && !with_o2m) throw ConfigError("model: at least one branch required");
    const std::size_t s = stride(num_levels - 1);
    if (input_height % s || input_width % s)
      throw ConfigError("model: strides must divide the input size");
    if (!(prior_prob > 0 && prior_prob < 1)) throw ConfigError("model: prior_prob outside (0,1)");
    if (o2m_style == O2MStyle::retina) {
      anchors.validate();
      if (anchors.base_sizes.size() != num_levels) throw ConfigError("model: one anchor base size per level");
    }
  }

  std::vector<LevelGrid> level_grids() const {
    std::vector<LevelGrid> out;
    for (std::size_t l = 0; l < num_levels; ++l)
      out.push_back({static_cast<double>(stride(l)), input_height / stride(l), input_width / stride(l)});
    return out;
  }
};

struct Conv {
  ad::Tensor weight, bias;
  std::size_t stride = 1, padding = 1;

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  ad::Tensor operator()(const ad::Tensor& x) const {
    return ad::conv2d(x, weight, bias, {stride, padding});
  }
};

/// Both heads' outputs; a head absent from the model stays undefined.
struct Predictions {
  HeadOutput o2o, o2m;
  std::vector<LevelGrid> levels;

  bool has(Branch b) const {
    return (b == Branch::o2o ? o2o : o2m).cls_logits.defined();
  }
  const HeadOutput& head(Branch b) const { return b == Branch::o2o ? o2o : o2m; }
};

class Model {
 public:
  Model() = default;

  /// Deterministic in (cfg, seed). One-to-many parameters draw from their
  /// own stream, so the one-to-one part of a dual model is identical to a
  /// model built with the one-to-one branch only.
  static Model build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    std::mt19937_64 main_rng(seed);
    std::mt19937_64 o2m_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const double prior_bias = -std::log((1.0 - cfg.prior_prob) / cfg.prior_prob);

    std::size_t in = cfg.input_channels;
    for (std::size_t i = 0; i < cfg.stem_channels.size(); ++i) {
      m.add_conv("stem." + std::to_string(i), in, cfg.stem_channels[i], 2, main_rng, Init::he, 0.0);
      in = cfg.stem_channels[i];
    }
    for (std::size_t l = 1; l < cfg.num_levels; ++l)
      m.add_conv("level." + std::to_string(l), in, in, 2, main_rng, Init::he, 0.0);

    const bool o2m_private = cfg.with_o2m && !cfg.share_subnets;
    const bool shared_needed = cfg.with_o2o || (cfg.with_o2m && cfg.share_subnets);
    auto add_towers = [&](const std::string& prefix, std::mt19937_64& rng) {
      for (const char* tower : {"cls", "reg"}) {
        std::size_t c = cfg.feature_channels();
        for (std::size_t d = 0; d < cfg.subnet_depth; ++d) {
          m.add_conv(prefix + tower + "_tower." + std::to_string(d), c, cfg.subnet_channels, 1, rng, Init::he, 0.0);
          c = cfg.subnet_channels;
        }
      }
    };
    if (shared_needed) add_towers("", main_rng);
    const std::size_t C = cfg.subnet_channels, K = cfg.num_classes, A = cfg.anchors_per_location();
    if (cfg.with_o2o) {
      m.add_conv("o2o.cls", C, K, 1, main_rng, Init::head, prior_bias);
      m.add_conv("o2o.reg", C, 4, 1, main_rng, Init::head, 0.0);
    }
    if (o2m_private) add_towers("o2m.", o2m_rng);
    if (cfg.with_o2m) {
      m.add_conv("o2m.cls", C, K * A, 1, o2m_rng, Init::head, prior_bias);
      m.add_conv("o2m.reg", C, 4 * A, 1, o2m_rng, Init::head, 0.0);
      if (cfg.o2m_style == O2MStyle::fcos) m.add_conv("o2m.ctr", C, A, 1, o2m_rng, Init::head, 0.0);
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<LevelGrid> level_grids() const { return cfg_.level_grids(); }

  /// Flat parameter list in registration order.
  std::vector<ad::Tensor> parameters() const {
    std::vector<ad::Tensor> out;
    for (const auto& name : order_) {
      const Conv& c = convs_.at(name);
      out.push_back(c.weight);
      out.push_back(c.bias);
    }
    return out;
  }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& name : order_) {
      out.push_back(name + ".weight");
      out.push_back(name + ".bias");
    }
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, c] : convs_) n += c.parameter_count();
    return n;
  }
  /// Parameters used only by the one-to-many branch.
  std::size_t o2m_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, c] : convs_)
      if (name.rfind("o2m.", 0) == 0) n += c.parameter_count();
    return n;
  }
  bool has_conv(const std::string& name) const { return convs_.count(name) != 0; }
  const Conv& conv(const std::string& name) const { return convs_.at(name); }
  Conv& conv(const std::string& name) { return convs_.at(name); }

  /// Deep copy; the result shares no storage with this model.
  Model clone() const {
    Model m;
    m.cfg_ = cfg_;
    m.order_ = order_;
    for (const auto& [name, c] : convs_) {
      Conv copy = c;
      copy.weight = copy_param(c.weight);
      copy.bias = copy_param(c.bias);
      m.convs_.emplace(name, copy);
    }
    return m;
  }

  /// Inference model keeping one branch. Parameters the kept branch never
  /// reads are dropped, so the result matches a model built with that
  /// branch alone.
  Model strip_branch(Branch keep) const {
    if ((keep == Branch::o2o && !cfg_.with_o2o) || (keep == Branch::o2m && !cfg_.with_o2m))
      throw ConfigError("strip_branch: requested branch is absent from the model");
    Model m = clone();
    m.cfg_.with_o2o = keep == Branch::o2o;
    m.cfg_.with_o2m = keep == Branch::o2m;
    const bool o2m_private = m.cfg_.with_o2m && !m.cfg_.share_subnets;
    std::vector<std::string> kept;
    for (const auto& name : m.order_) {
      const bool is_o2m = name.rfind("o2m.", 0) == 0;
      const bool is_o2o = name.rfind("o2o.", 0) == 0;
      const bool is_shared_tower = name.find("_tower.") != std::string::npos && !is_o2m;
      bool keep_it = true;
      if (keep == Branch::o2o && is_o2m) keep_it = false;
      if (keep == Branch::o2m && is_o2o) keep_it = false;
      if (keep == Branch::o2m && is_shared_tower && o2m_private) keep_it = false;
      if (keep_it) kept.push_back(name);
      else m.convs_.erase(name);
    }
    m.order_ = kept;
    return m;
  }

  /// images: [N, C, H, W].
  Predictions forward(const ad::Tensor& images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.input_channels || s[2] != cfg_.input_height || s[3] != cfg_.input_width)
      throw ShapeError("forward: expected images [N," + std::to_string(cfg_.input_channels) + "," +
                       std::to_string(cfg_.input_height) + "," + std::to_string(cfg_.input_width) +
                       "], got " + ad::to_string(s));
    const std::size_t N = s[0];
    ad::Tensor x = images;
    for (std::size_t i = 0; i < cfg_.stem_channels.size(); ++i) x = ad::relu(conv("stem." + std::to_string(i))(x));
    std::vector<ad::Tensor> feats{x};
    for (std::size_t l = 1; l < cfg_.num_levels; ++l)
      feats.push_back(ad::relu(conv("level." + std::to_string(l))(feats.back())));

    auto tower = [&](const std::string& prefix, const ad::Tensor& f) {
      ad::Tensor h = f;
      for (std::size_t d = 0; d < cfg_.subnet_depth; ++d) h = ad::relu(conv(prefix + std::to_string(d))(h));
      return h;
    };
    std::vector<ad::Tensor> o2o_cls, o2o_reg, o2m_cls, o2m_reg, o2m_ctr;
    for (const auto& f : feats) {
      ad::Tensor cls_f, reg_f;
      const bool shared_needed = cfg_.with_o2o || cfg_.share_subnets;
      if (shared_needed) {
        cls_f = tower("cls_tower.", f);
        reg_f = tower("reg_tower.", f);
      }
      if (cfg_.with_o2o) {
        o2o_cls.push_back(conv("o2o.cls")(cls_f));
        o2o_reg.push_back(conv("o2o.reg")(reg_f));
      }
      if (cfg_.with_o2m) {
        const ad::Tensor mc = cfg_.share_subnets ? cls_f : tower("o2m.cls_tower.", f);
        const ad::Tensor mr = cfg_.share_subnets ? reg_f : tower("o2m.reg_tower.", f);
        o2m_cls.push_back(conv("o2m.cls")(mc));
        o2m_reg.push_back(conv("o2m.reg")(mr));
        if (cfg_.o2m_style == O2MStyle::fcos) o2m_ctr.push_back(conv("o2m.ctr")(mr));
      }
    }
    Predictions p;
    p.levels = level_grids();
    if (cfg_.with_o2o) p.o2o = assemble(N, 1, o2o_cls, o2o_reg, {});
    if (cfg_.with_o2m) p.o2m = assemble(N, cfg_.anchors_per_location(), o2m_cls, o2m_reg, o2m_ctr);
    return p;
  }

  /// Anchors aligned with the one-to-many head's flattened outputs.
  std::vector<Box> anchors() const { return generate_anchors(level_grids(), cfg_.anchors); }

 private:
  enum class Init { he, head };

  void add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride,
                std::mt19937_64& rng, Init init, double bias) {
    const std::size_t fan_in = cin * 9;
    const double sd = init == Init::he ? std::sqrt(2.0 / static_cast<double>(fan_in)) : 0.01;
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> w(cout * fan_in);
    for (double& v : w) v = dist(rng);
    Conv c;
    c.weight = ad::Tensor({cout, cin, 3, 3}, std::move(w), true);
    c.bias = ad::Tensor({cout}, std::vector<double>(cout, bias), true);
    c.stride = stride;
    c.padding = 1;
    convs_.emplace(name, c);
    order_.push_back(name);
  }

  static ad::Tensor copy_param(const ad::Tensor& t) {
    return ad::Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), true);
  }

  // Reorders per-level [N, A*C, H, W] maps into [N, L*A, C] with location
  // index (level offset + y*W + x)*A + a.
  static ad::Tensor flatten_levels(std::size_t N, std::size_t A, std::size_t C,
                                   const std::vector<ad::Tensor>& maps) {
    std::size_t total_loc = 0;
    for (const auto& t : maps) total_loc += t.dim(2) * t.dim(3);
    const ad::Tensor cat = ad::concat(maps);
    std::vector<std::size_t> idx(N * total_loc * A * C);
    std::size_t level_off = 0, loc_off = 0;
    for (const auto& t : maps) {
      const std::size_t H = t.dim(2), W = t.dim(3), HW = H * W;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p)
          for (std::size_t a = 0; a < A; ++a)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t l = (loc_off + p) * A + a;
              idx[(n * total_loc * A + l) * C + c] = level_off + (n * A * C + a * C + c) * HW + p;
            }
      level_off += t.size();
      loc_off += HW;
    }
    return ad::gather(cat, std::move(idx), {N, total_loc * A, C});
  }

  HeadOutput assemble(std::size_t N, std::size_t A, const std::vector<ad::Tensor>& cls,
                      const std::vector<ad::Tensor>& reg, const std::vector<ad::Tensor>& ctr) const {
    HeadOutput h;
    h.cls_logits = flatten_levels(N, A, cfg_.num_classes, cls);
    const ad::Tensor raw = flatten_levels(N, A, 4, reg);
    std::vector<double> strides;
    strides.reserve(raw.size());
    const auto grids = level_grids();
    for (std::size_t n = 0; n < N; ++n)
      for (const auto& g : grids)
        for (std::size_t i = 0; i < g.size() * A * 4; ++i) strides.push_back(g.stride);
    h.ltrb = ad::mul(ad::exp(raw), ad::Tensor(raw.shape(), std::move(strides)));
    if (!ctr.empty()) h.centerness_logits = ad::reshape(flatten_levels(N, A, 1, ctr), {N, h.cls_logits.dim(1)});
    for (const auto& g : grids)
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t a = 0; a < A; ++a) h.points.push_back(g.at(i));
    h.l1_scale = static_cast<double>(std::max(cfg_.input_height, cfg_.input_width));
    return h;
  }

  ModelConfig cfg_;
  std::map<std::string, Conv> convs_;
  std::vector<std::string> order_;
};

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return Model::build(cfg, seed); }

// ---------------------------------------------------------------------------
// AdamW

struct OptimizerState {
  double lr = 4e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p), with
/// bias-corrected moments and decay decoupled from the gradient.
inline void adamw_step(OptimizerState& s, std::vector<ad::Tensor>& params) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw ShapeError("adamw_step: optimizer state does not match parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto vals = params[i].mutable_values();
    const auto g = params[i].grad();
    auto& m = s.m[i];
    auto& v = s.v[i];
    if (m.size() != vals.size()) throw ShapeError("adamw_step: moment shape mismatch");
    for (std::size_t j = 0; j < vals.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double mh = m[j] / c1, vh = v[j] / c2;
      vals[j] -= s.lr * (mh / (std::sqrt(vh) + s.eps) + s.weight_decay * vals[j]);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON {format, config, parameters: [{name, shape, values}]}.

inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json anchors = {{"base_sizes", c.anchors.base_sizes},
                            {"ratios", c.anchors.ratios},
                            {"scales", c.anchors.scales},
                            {"positive_iou_threshold", c.anchors.positive_iou_threshold},
                            {"negative_iou_threshold", c.anchors.negative_iou_threshold}};
  return {{"input_height", c.input_height},
          {"input_width", c.input_width},
          {"input_channels", c.input_channels},
          {"stem_channels", c.stem_channels},
          {"num_levels", c.num_levels},
          {"subnet_channels", c.subnet_channels},
          {"subnet_depth", c.subnet_depth},
          {"num_classes", c.num_classes},
          {"o2m_style", c.o2m_style == O2MStyle::fcos ? "fcos" : "retina"},
          {"share_subnets", c.share_subnets},
          {"with_o2o", c.with_o2o},
          {"with_o2m", c.with_o2m},
          {"prior_prob", c.prior_prob},
          {"anchors", anchors}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_height = j.at("input_height");
  c.input_width = j.at("input_width");
  c.input_channels = j.at("input_channels");
  c.stem_channels = j.at("stem_channels").get<std::vector<std::size_t>>();
  c.num_levels = j.at("num_levels");
  c.subnet_channels = j.at("subnet_channels");
  c.subnet_depth = j.at("subnet_depth");
  c.num_classes = j.at("num_classes");
  c.o2m_style = j.at("o2m_style") == "fcos" ? O2MStyle::fcos : O2MStyle::retina;
  c.share_subnets = j.at("share_subnets");
  c.with_o2o = j.at("with_o2o");
  c.with_o2m = j.at("with_o2m");
  c.prior_prob = j.at("prior_prob");
  const auto& a = j.at("anchors");
  c.anchors.base_sizes = a.at("base_sizes").get<std::vector<double>>();
  c.anchors.ratios = a.at("ratios").get<std::vector<double>>();
  c.anchors.scales = a.at("scales").get<std::vector<double>>();
  c.anchors.positive_iou_threshold = a.at("positive_iou_threshold");
  c.anchors.negative_iou_threshold = a.at("negative_iou_threshold");
  return c;
}

inline nlohmann::json checkpoint_json(const Model& model) {
  nlohmann::json params = nlohmann::json::array();
  const auto names = model.parameter_names();
  const auto ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i)
    params.push_back({{"name", names[i]},
                      {"shape", ps[i].shape()},
                      {"values", std::vector<double>(ps[i].values().begin(), ps[i].values().end())}});
  return {{"format", kCheckpointFormat}, {"config", to_json(model.config())}, {"parameters", params}};
}

/// Rebuilds the architecture from the stored config and overwrites every
/// parameter. Doubles are printed shortest-round-trip, so values restore
/// bit-exactly.
inline Model model_from_checkpoint_json(const nlohmann::json& j) {
  if (j.value("format", -1) != kCheckpointFormat)
    throw ParseError("checkpoint: unsupported format version");
  Model m = Model::build(model_config_from_json(j.at("config")), 0);
  const auto names = m.parameter_names();
  auto ps = m.parameters();
  const auto& stored = j.at("parameters");
  if (stored.size() != ps.size()) throw ParseError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (stored[i].at("name") != names[i]) throw ParseError("checkpoint: unexpected parameter " + stored[i].at("name").get<std::string>());
    const auto values = stored[i].at("values").get<std::vector<double>>();
    if (values.size() != ps[i].size()) throw ParseError("checkpoint: size mismatch for " + names[i]);
    std::copy(values.begin(), values.end(), ps[i].mutable_values().begin());
  }
  return m;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << checkpoint_json(model).dump();
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint " + path + ": " + e.what());
  }
  return model_from_checkpoint_json(j);
}

}  // namespace dualdet
