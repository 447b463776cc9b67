#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dualdet/assignment.hpp"
#include "dualdet/detector.hpp"
#include "dualdet/evaluator.hpp"
#include "dualdet/losses.hpp"
#include "dualdet/postprocess.hpp"
#include "dualdet/scenegen.hpp"
#include "dualdet/tensor.hpp"

namespace dualdet {

/// Which branches are trained and how the one-to-many branch assigns.
enum class Regime { o2o, o2m_fcos, o2m_retina, dual_f, dual_r };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::o2o: return "o2o";
    case Regime::o2m_fcos: return "o2m-fcos";
    case Regime::o2m_retina: return "o2m-retina";
    case Regime::dual_f: return "dual-f";
    case Regime::dual_r: return "dual-r";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  for (Regime r : {Regime::o2o, Regime::o2m_fcos, Regime::o2m_retina, Regime::dual_f, Regime::dual_r})
    if (s == to_string(r)) return r;
  throw ConfigError("unknown regime '" + s + "' (expected o2o, o2m-fcos, o2m-retina, dual-f or dual-r)");
}

inline bool trains_o2o(Regime r) { return r == Regime::o2o || r == Regime::dual_f || r == Regime::dual_r; }
inline bool trains_o2m(Regime r) { return r != Regime::o2o; }
inline O2MStyle o2m_style(Regime r) {
  return (r == Regime::o2m_retina || r == Regime::dual_r) ? O2MStyle::retina : O2MStyle::fcos;
}

inline ModelConfig model_config_for(Regime r, ModelConfig base = {}) {
  base.with_o2o = trains_o2o(r);
  base.with_o2m = trains_o2m(r);
  base.o2m_style = o2m_style(r);
  return base;
}

/// lambda_o2m defaults to 1 with an FCOS-style branch and 2 with a
/// RetinaNet-style one.
inline LossWeights default_weights(Regime r) {
  LossWeights w;
  w.lambda_o2m = o2m_style(r) == O2MStyle::retina ? 2.0 : 1.0;
  return w;
}

struct TrainConfig {
  Regime regime = Regime::dual_f;
  std::size_t iterations = 3000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  LossWeights weights = default_weights(Regime::dual_f);
  O2OAssignerConfig o2o;
  FcosAssignerConfig fcos;
  double lr = 4e-4;
  double weight_decay = 1e-4;
  /// Divide the learning rate by 10 at 2/3 and 8/9 of the run.
  bool step_schedule = false;
  std::size_t eval_interval = 0;  // 0 disables periodic evaluation
  std::string checkpoint_path;

  void validate() const {
    if (iterations == 0) throw ConfigError("train: iterations must be > 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
    weights.validate();
  }

  double lr_at(std::size_t iteration) const {
    if (!step_schedule) return lr;
    double v = lr;
    if (iteration >= iterations * 2 / 3) v *= 0.1;
    if (iteration >= iterations * 8 / 9) v *= 0.1;
    return v;
  }
};

struct Batch {
  ad::Tensor images;  // [N, 1, H, W]
  std::vector<std::vector<GroundTruth>> gts;
  std::vector<std::size_t> scene_index;
};

inline Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  const std::size_t H = data.config.image_height, W = data.config.image_width;
  std::vector<double> pixels;
  pixels.reserve(indices.size() * H * W);
  Batch b;
  for (std::size_t i : indices) {
    const Scene& s = data.scenes.at(i);
    pixels.insert(pixels.end(), s.image.begin(), s.image.end());
    b.gts.push_back(s.annotations);
  }
  b.images = ad::Tensor({indices.size(), 1, H, W}, std::move(pixels));
  b.scene_index = indices;
  return b;
}

/// Per-step record: losses plus the assignment statistics needed to audit
/// the matching (positives per image, duplicate-freedom of the one-to-one
/// matching).
struct StepStats {
  LossReport report;
  std::vector<std::size_t> gt_counts;
  std::vector<std::size_t> o2o_positives;
  std::vector<std::size_t> o2m_positives;
  bool o2o_duplicate_free = true;
};

/// Source of one-to-many assignments, keyed by scene so that the
/// prediction-independent FCOS / max-IoU labels are computed once.
class O2MAssigner {
 public:
  O2MAssigner(const ModelConfig& cfg, FcosAssignerConfig fcos)
      : style_(cfg.o2m_style), levels_(cfg.level_grids()), fcos_(std::move(fcos)), anchor_cfg_(cfg.anchors) {
    if (style_ == O2MStyle::retina) anchors_ = generate_anchors(levels_, anchor_cfg_);
  }

  AssignmentResult operator()(const std::vector<GroundTruth>& gts) const {
    return style_ == O2MStyle::fcos ? assign_o2m_fcos(levels_, gts, fcos_) : assign_o2m_retina(anchors_, gts, anchor_cfg_);
  }

  const AssignmentResult& cached(std::size_t key, const std::vector<GroundTruth>& gts) {
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, (*this)(gts)).first;
    return it->second;
  }

 private:
  O2MStyle style_;
  std::vector<LevelGrid> levels_;
  FcosAssignerConfig fcos_;
  AnchorConfig anchor_cfg_;
  std::vector<Box> anchors_;
  std::map<std::size_t, AssignmentResult> cache_;
};

/// Forward both heads, assign (one-to-one by Hungarian matching on POTO
/// quality, one-to-many by FCOS or max-IoU rules), combine the branch losses
/// into l_DA, backpropagate and take one AdamW step.
inline StepStats training_step(Model& model, OptimizerState& opt, const Batch& batch, const TrainConfig& cfg,
                               O2MAssigner* o2m_assigner = nullptr) {
  const ModelConfig& mc = model.config();
  auto params = model.parameters();
  for (auto& p : params) p.zero_grad();

  const Predictions preds = model.forward(batch.images);
  const std::size_t N = batch.gts.size();
  StepStats stats;
  for (const auto& g : batch.gts) stats.gt_counts.push_back(g.size());

  std::optional<BranchLoss> o2o, o2m;
  if (mc.with_o2o) {
    std::vector<AssignmentResult> assignments;
    for (std::size_t n = 0; n < N; ++n) {
      assignments.push_back(assign_o2o(preds.o2o.candidates(n), batch.gts[n], cfg.o2o));
      const auto pos = assignments.back().positives();
      std::vector<std::size_t> seen_gt;
      for (std::size_t p : pos) seen_gt.push_back(assignments.back().labels[p].gt);
      std::sort(seen_gt.begin(), seen_gt.end());
      const bool unique = std::adjacent_find(seen_gt.begin(), seen_gt.end()) == seen_gt.end();
      stats.o2o_duplicate_free = stats.o2o_duplicate_free && unique && pos.size() == batch.gts[n].size();
      stats.o2o_positives.push_back(assignments.back().positive_count);
    }
    o2o = branch_loss_o2o(preds.o2o, assignments, batch.gts, cfg.weights);
  }
  if (mc.with_o2m) {
    std::vector<AssignmentResult> assignments;
    O2MAssigner local(mc, cfg.fcos);
    for (std::size_t n = 0; n < N; ++n) {
      if (o2m_assigner && n < batch.scene_index.size())
        assignments.push_back(o2m_assigner->cached(batch.scene_index[n], batch.gts[n]));
      else
        assignments.push_back(local(batch.gts[n]));
      stats.o2m_positives.push_back(assignments.back().positive_count);
    }
    o2m = branch_loss_o2m(preds.o2m, assignments, batch.gts, cfg.weights, mc.o2m_style);
  }

  ad::Tensor total;
  if (o2o && o2m) total = dual_loss(o2o->total, o2m->total, cfg.weights);
  else if (o2o) total = ad::mul(o2o->total, cfg.weights.lambda_o2o);
  else total = ad::mul(o2m->total, cfg.weights.lambda_o2m);

  ad::backward(total);
  adamw_step(opt, params);

  LossReport& r = stats.report;
  if (o2o) {
    r.l_o2o_cls = o2o->cls.item();
    r.l_o2o_reg = o2o->reg.item();
    r.l_o2o_iou = o2o->third.item();
    r.l_o2o = o2o->total.item();
  }
  if (o2m) {
    r.l_o2m_cls = o2m->cls.item();
    r.l_o2m_reg = o2m->reg.item();
    r.l_o2m_ctr = o2m->third.item();
    r.l_o2m = o2m->total.item();
  }
  r.l_DA = total.item();
  return stats;
}

/// Owns the model and optimizer of one run; batches are drawn with
/// replacement from a seeded stream, so a run is a pure function of
/// (TrainConfig, ModelConfig, dataset).
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const ModelConfig& base, const Dataset& train)
      : cfg_(cfg),
        model_(build_model(model_config_for(cfg.regime, base), cfg.seed)),
        train_(train),
        rng_(cfg.seed ^ 0x2545f4914f6cdd1dULL),
        o2m_(model_.config(), cfg.fcos) {
    cfg_.validate();
    if (train.scenes.empty()) throw ConfigError("train: empty dataset");
    opt_.lr = cfg.lr;
    opt_.weight_decay = cfg.weight_decay;
  }

  StepStats step() {
    std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
    std::vector<std::size_t> idx(cfg_.batch_size);
    for (auto& i : idx) i = pick(rng_);
    opt_.lr = cfg_.lr_at(iteration_);
    ++iteration_;
    return training_step(model_, opt_, make_batch(train_, idx), cfg_, &o2m_);
  }

  std::size_t iteration() const { return iteration_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  Model model_;
  const Dataset& train_;
  std::mt19937_64 rng_;
  OptimizerState opt_;
  O2MAssigner o2m_;
  std::size_t iteration_ = 0;
};

// ---------------------------------------------------------------------------
// Inference and evaluation

struct InferenceOptions {
  Branch head = Branch::o2o;
  bool use_nms = false;
  double nms_threshold = 0.6;
  bool class_aware_nms = true;
  std::size_t topk = kDefaultTopK;
  double score_floor = 0.0;
};

inline std::vector<std::vector<Detection>> predict(const Model& model, const Dataset& data, const InferenceOptions& opt,
                                                   std::size_t chunk = 64) {
  if (!model.config().with_o2o && opt.head == Branch::o2o) throw ConfigError("predict: model has no one-to-one head");
  if (!model.config().with_o2m && opt.head == Branch::o2m) throw ConfigError("predict: model has no one-to-many head");
  ad::NoGradGuard no_grad;
  std::vector<std::vector<Detection>> out;
  const ScoreMode mode = (opt.head == Branch::o2m && model.config().o2m_style == O2MStyle::fcos)
                             ? ScoreMode::cls_times_ctr
                             : ScoreMode::cls;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx);
    const Predictions p = model.forward(b.images);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      auto dets = select_topk(p.head(opt.head), n, opt.topk, opt.score_floor, mode);
      if (opt.use_nms) dets = nms(dets, opt.nms_threshold, opt.class_aware_nms);
      out.push_back(std::move(dets));
    }
  }
  return out;
}

inline std::vector<std::vector<GroundTruth>> annotations(const Dataset& data) {
  std::vector<std::vector<GroundTruth>> out;
  for (const auto& s : data.scenes) out.push_back(s.annotations);
  return out;
}

inline EvalResult evaluate_model(const Model& model, const Dataset& data, const InferenceOptions& opt) {
  return evaluate(predict(model, data, opt), annotations(data), model.config().num_classes);
}

}  // namespace dualdet
