#pragma once

// Training runs with periodic evaluation, plus the summaries used by the
// comparison and sweep commands.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dualdet/training.hpp"

namespace dualdet {

struct EvalPoint {
  std::size_t iteration = 0;
  EvalResult result;
};

struct TrainRun {
  TrainConfig config;
  std::vector<LossReport> losses;  // one per iteration
  std::vector<EvalPoint> evals;
  Model model;
  std::size_t o2o_steps_checked = 0;
  bool o2o_duplicate_free = true;  // N = G and no prediction matched twice, every step
  double mean_o2o_positives = 0, mean_o2m_positives = 0;  // per image

  double final_ap50() const { return evals.empty() ? 0.0 : evals.back().result.ap50; }
  double final_ap() const { return evals.empty() ? 0.0 : evals.back().result.ap; }
  /// First evaluated iteration whose AP50 reaches `target`.
  std::optional<std::size_t> iterations_to_reach(double target_ap50) const {
    for (const auto& e : evals)
      if (e.result.ap50 >= target_ap50) return e.iteration;
    return std::nullopt;
  }
};

/// How a run's periodic evaluation reads the model: the one-to-one head
/// without NMS whenever it exists, otherwise the one-to-many head with NMS.
inline InferenceOptions default_eval_options(Regime r) {
  InferenceOptions o;
  if (trains_o2o(r)) {
    o.head = Branch::o2o;
  } else {
    o.head = Branch::o2m;
    o.use_nms = true;
  }
  return o;
}

using StepCallback = std::function<void(std::size_t iteration, const StepStats&)>;

inline TrainRun run_training(const TrainConfig& cfg, const ModelConfig& base, const Dataset& train, const Dataset* test,
                             const StepCallback& on_step = {}) {
  Trainer trainer(cfg, base, train);
  TrainRun run;
  run.config = cfg;
  const InferenceOptions eval_opt = default_eval_options(cfg.regime);
  double o2o_pos = 0, o2m_pos = 0;
  std::size_t images = 0;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const StepStats s = trainer.step();
    run.losses.push_back(s.report);
    if (!s.o2o_positives.empty()) {
      ++run.o2o_steps_checked;
      run.o2o_duplicate_free = run.o2o_duplicate_free && s.o2o_duplicate_free;
    }
    for (auto n : s.o2o_positives) o2o_pos += static_cast<double>(n);
    for (auto n : s.o2m_positives) o2m_pos += static_cast<double>(n);
    images += s.gt_counts.size();
    if (on_step) on_step(it, s);
    if (test && cfg.eval_interval && (it % cfg.eval_interval == 0 || it == cfg.iterations))
      run.evals.push_back({it, evaluate_model(trainer.model(), *test, eval_opt)});
  }
  if (images) {
    run.mean_o2o_positives = o2o_pos / static_cast<double>(images);
    run.mean_o2m_positives = o2m_pos / static_cast<double>(images);
  }
  run.model = trainer.model().clone();
  if (!cfg.checkpoint_path.empty()) save_checkpoint(run.model, cfg.checkpoint_path);
  return run;
}

/// Runs independent jobs on up to `jobs` threads; results keep input order.
template <class Job>
auto run_parallel(const std::vector<Job>& work, std::size_t jobs) {
  using Result = decltype(work.front()());
  std::vector<std::optional<Result>> slots(work.size());
  std::vector<std::exception_ptr> errors(work.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= work.size()) return;
        i = next++;
      }
      try {
        slots[i].emplace(work[i]());
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, std::min(jobs, work.size())); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  std::vector<Result> out;
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

/// Running median over a centered window (shrunk at the edges).
inline std::vector<double> median_filter(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0, hi = std::min(v.size(), i + half + 1);
    std::vector<double> w(v.begin() + static_cast<long>(lo), v.begin() + static_cast<long>(hi));
    std::nth_element(w.begin(), w.begin() + static_cast<long>(w.size() / 2), w.end());
    out[i] = w[w.size() / 2];
  }
  return out;
}

struct MeanSd {
  double mean = 0, sd = 0;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV forms (schema versioned, columns stable within a version)

inline constexpr int kLossCsvSchema = 1;

inline std::string loss_csv_header() {
  return "schema,iteration,l_o2o_cls,l_o2o_reg,l_o2o_iou,l_o2m_cls,l_o2m_reg,l_o2m_ctr,l_o2o,l_o2m,l_DA";
}

inline std::string loss_csv_row(std::size_t iteration, const LossReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << kLossCsvSchema << ',' << iteration << ',' << r.l_o2o_cls << ',' << r.l_o2o_reg << ',' << r.l_o2o_iou << ','
     << r.l_o2m_cls << ',' << r.l_o2m_reg << ',' << r.l_o2m_ctr << ',' << r.l_o2o << ',' << r.l_o2m << ',' << r.l_DA;
  return os.str();
}

}  // namespace dualdet
