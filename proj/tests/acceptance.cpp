// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
// The convergence block trains 3 seeds x {o2o, dual-f} with the default
// configuration (2000 training scenes, 3000 iterations, batch 8, lr 4e-4)
// and reuses those six runs for the duplicate-freedom, positive-gap,
// NMS-free and classification-loss criteria.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dualdet/experiments.hpp"
#include "dualdet/pareto.hpp"
#include "oracles.hpp"
#include "reference_evaluator.hpp"
#include "tiny_model.hpp"

using namespace dualdet;
using ad::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kHungarianSeconds = 10;
constexpr double kGradSeconds = 60;
constexpr double kPositiveRatio = 3.0;
constexpr double kConvergenceMarginPts = 2.0;
constexpr double kConvergenceFraction = 0.6;
constexpr double kNmsFreeTolPts = 1.0;
constexpr double kSurplusFraction = 0.03;
constexpr std::size_t kConvergenceEvalInterval = 100;
constexpr std::size_t kClsLossIteration = 1500;
constexpr std::size_t kMedianWindow = 101;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

Dataset make_split(std::size_t n, std::uint64_t first, SceneConfig cfg = {}) {
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = first + i;
  return generate_dataset(seeds, cfg);
}

// ---------------------------------------------------------------------------

void hungarian_exactness() {
  const auto t0 = Clock::now();
  std::mt19937 rng(7);
  bool ok = true;
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t p = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t g = std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(7, p))(rng);
    std::uniform_int_distribution<int> val(-50, 50);
    std::vector<std::vector<double>> rows(g, std::vector<double>(p));
    CostMatrix c(g, p);
    for (std::size_t i = 0; i < g; ++i)
      for (std::size_t j = 0; j < p; ++j) c(i, j) = rows[i][j] = val(rng);
    const Matching m = hungarian(c);
    std::set<std::size_t> cols;
    double recomputed = 0;
    for (const auto& [gi, pj] : m.pairs) {
      cols.insert(pj);
      recomputed += rows[gi][pj];
    }
    const bool good = m.total_cost == oracle::brute_force_min_cost(rows) && m.pairs.size() == g && cols.size() == g &&
                      recomputed == m.total_cost;
    if (!good) ++mismatches;
    ok = ok && good;
  }
  const double secs = seconds_since(t0);
  report(ok && secs < kHungarianSeconds, "hungarian_exact",
         "1000 random matrices (G<=7, P<=8), mismatches=" + std::to_string(mismatches) + ", " + num(secs) +
             " s (limit " + num(kHungarianSeconds, 0) + " s)");
}

// Every loss against central differences, then the tiny end-to-end model.
void gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  auto check = [&](const std::string& name, double err) {
    if (!(err <= worst)) {
      worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      worst_name = name;
    }
    if (!(err <= kGradTol)) std::cout << "  grad " << name << " error " << sci(err) << "\n";
  };

  std::mt19937 rng(5);
  std::normal_distribution<double> n(0, 1.5);
  std::uniform_real_distribution<double> d(2, 12);
  const std::size_t m = 24;
  std::vector<double> logits(m), targets(m), weights(m, 0.4), soft(m);
  for (std::size_t i = 0; i < m; ++i) {
    logits[i] = n(rng);
    targets[i] = i % 3 == 1;
    soft[i] = static_cast<double>(i % 5) / 4.0;
  }
  const Tensor x({m}, logits);
  check("focal", ad::grad_check([&](const Tensor& t) { return loss::focal(t, targets, weights, 0.25, 2); }, x));
  check("bce", ad::grad_check([&](const Tensor& t) { return loss::bce(t, soft, weights); }, x));

  std::vector<Point> pts;
  std::vector<Box> gts;
  std::vector<LTRB> tl;
  std::vector<double> raw, w;
  for (std::size_t i = 0; i < 10; ++i) {
    const Point p{20 + d(rng), 20 + d(rng)};
    const Box g{p.x - d(rng), p.y - d(rng), p.x + d(rng), p.y + d(rng)};
    pts.push_back(p);
    gts.push_back(g);
    tl.push_back(ltrb_encode(p, g));
    for (int c = 0; c < 4; ++c) raw.push_back(d(rng));
    w.push_back(0.2 * static_cast<double>(i + 1));
  }
  const Tensor l({10, 4}, raw);
  check("giou", ad::grad_check([&](const Tensor& t) { return loss::giou(t, pts, gts, w); }, l));
  check("l1", ad::grad_check([&](const Tensor& t) { return loss::l1(t, tl, w, 64); }, l));

  // Branch losses on a hand-built head with fixed assignments.
  const std::size_t N = 2, L = 6, K = 2;
  std::vector<Point> loc;
  for (std::size_t i = 0; i < L; ++i) loc.push_back({8.0 + 8.0 * static_cast<double>(i), 20});
  const std::vector<std::vector<GroundTruth>> img_gts{{{{2, 10, 30, 34}, 1}},
                                                      {{{20, 8, 50, 30}, 0}, {{1, 12, 12, 28}, 1}}};
  std::vector<AssignmentResult> assign;
  for (std::size_t i = 0; i < N; ++i) {
    AssignmentResult a;
    a.labels.assign(L, {});
    a.centerness.assign(L, 0.0);
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t g = 0; g < img_gts[i].size(); ++g)
        if (strictly_inside(loc[j], img_gts[i][g].box) && !a.labels[j].positive()) {
          a.labels[j] = {SampleLabel::Kind::positive, g};
          a.centerness[j] = centerness_target(loc[j], img_gts[i][g].box);
          ++a.positive_count;
        }
    assign.push_back(a);
  }
  std::vector<double> cls(N * L * K), ltrb(N * L * 4), ctr(N * L);
  for (auto& v : cls) v = n(rng);
  for (auto& v : ltrb) v = d(rng);
  for (auto& v : ctr) v = n(rng);
  LossWeights lw;
  lw.lambda_o2m = 1.5;
  auto head = [&](const Tensor& c, const Tensor& r, const Tensor& q) {
    HeadOutput h;
    h.cls_logits = c;
    h.ltrb = r;
    h.centerness_logits = q;
    h.points = loc;
    return h;
  };
  const Tensor C({N, L, K}, cls), R({N, L, 4}, ltrb), Q({N, L}, ctr);
  for (auto style : {O2MStyle::fcos, O2MStyle::retina}) {
    const std::string s = style == O2MStyle::fcos ? "fcos" : "retina";
    check("o2m_" + s + ".cls", ad::grad_check([&](const Tensor& t) {
            return branch_loss_o2m(head(t, R, Q), assign, img_gts, lw, style).total;
          }, C));
    check("o2m_" + s + ".reg", ad::grad_check([&](const Tensor& t) {
            return branch_loss_o2m(head(C, t, Q), assign, img_gts, lw, style).total;
          }, R));
  }
  check("o2m_fcos.ctr", ad::grad_check([&](const Tensor& t) {
          return branch_loss_o2m(head(C, R, t), assign, img_gts, lw, O2MStyle::fcos).total;
        }, Q));
  check("o2o.cls", ad::grad_check([&](const Tensor& t) { return branch_loss_o2o(head(t, R, Q), assign, img_gts, lw).total; }, C));
  check("o2o.reg", ad::grad_check([&](const Tensor& t) { return branch_loss_o2o(head(C, t, Q), assign, img_gts, lw).total; }, R));
  check("dual", ad::grad_check([&](const Tensor& t) {
          const auto a = branch_loss_o2o(head(t, R, Q), assign, img_gts, lw).total;
          const auto b = branch_loss_o2m(head(t, R, Q), assign, img_gts, lw, O2MStyle::fcos).total;
          return dual_loss(a, b, lw);
        }, C));

  std::vector<std::pair<std::string, double>> per_param;
  fixture::tiny_model_worst_grad_error(&per_param);
  for (const auto& [name, err] : per_param) check("tiny_model." + name, err);

  const double secs = seconds_since(t0);
  report(worst <= kGradTol && secs < kGradSeconds, "gradient_correctness",
         "worst relative error " + sci(worst) + " (" + worst_name + "), tolerance " + sci(kGradTol) + ", " +
             num(secs) + " s (limit " + num(kGradSeconds, 0) + " s)");
}

void lambda_zero_degeneration(const Dataset& train) {
  TrainConfig o2o;
  o2o.regime = Regime::o2o;
  o2o.weights = default_weights(Regime::o2o);
  o2o.iterations = 200;
  o2o.seed = 4;
  TrainConfig dual = o2o;
  dual.regime = Regime::dual_f;
  dual.weights = default_weights(Regime::dual_f);
  dual.weights.lambda_o2m = 0;
  const TrainRun a = run_training(o2o, ModelConfig{}, train, nullptr);
  const TrainRun b = run_training(dual, ModelConfig{}, train, nullptr);
  bool same = a.losses.size() == b.losses.size();
  for (std::size_t i = 0; same && i < a.losses.size(); ++i)
    same = a.losses[i].l_o2o == b.losses[i].l_o2o && a.losses[i].l_o2o_cls == b.losses[i].l_o2o_cls &&
           a.losses[i].l_o2o_reg == b.losses[i].l_o2o_reg && a.losses[i].l_o2o_iou == b.losses[i].l_o2o_iou &&
           a.losses[i].l_DA == b.losses[i].l_DA;
  const auto pa = a.model.parameters();
  const auto pb = b.model.strip_branch(Branch::o2o).parameters();
  bool params = pa.size() == pb.size();
  for (std::size_t i = 0; params && i < pa.size(); ++i)
    params = std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin(), pb[i].values().end());
  report(same && params, "lambda_zero_degeneration",
         std::string("200 iterations seed 4: loss records ") + (same ? "identical" : "DIFFER") +
             ", stripped parameters " + (params ? "bit-identical" : "DIFFER"));
}

struct ConvergenceRuns {
  std::vector<TrainRun> o2o, dual;
};

ConvergenceRuns convergence_runs(const Dataset& train, const Dataset& test) {
  std::vector<TrainConfig> cfgs;
  for (Regime r : {Regime::o2o, Regime::dual_f})
    for (auto seed : kSeeds) {
      TrainConfig c;
      c.regime = r;
      c.weights = default_weights(r);
      c.seed = seed;
      c.eval_interval = kConvergenceEvalInterval;
      cfgs.push_back(c);
    }
  std::vector<std::function<TrainRun()>> work;
  for (const auto& c : cfgs) work.push_back([&, c] { return run_training(c, ModelConfig{}, train, &test); });
  const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  auto runs = run_parallel(work, jobs);
  ConvergenceRuns out;
  for (auto& r : runs) (r.config.regime == Regime::o2o ? out.o2o : out.dual).push_back(std::move(r));
  return out;
}

void duplicate_freedom(const ConvergenceRuns& cr) {
  bool ok = true;
  std::size_t steps = 0;
  for (const auto* set : {&cr.o2o, &cr.dual})
    for (const auto& r : *set) {
      ok = ok && r.o2o_duplicate_free && r.o2o_steps_checked == r.config.iterations;
      steps += r.o2o_steps_checked;
    }
  report(ok, "o2o_duplicate_free",
         std::to_string(steps) + " instrumented steps over 6 runs of 3000 iterations: N = G and no prediction matched twice " +
             (ok ? "at every step" : "VIOLATED"));
}

void positive_gap(const ConvergenceRuns& cr) {
  double o2o = 0, o2m = 0;
  for (const auto& r : cr.dual) {
    o2o += r.mean_o2o_positives;
    o2m += r.mean_o2m_positives;
  }
  o2o /= static_cast<double>(cr.dual.size());
  o2m /= static_cast<double>(cr.dual.size());
  const double ratio = o2m / o2o;
  report(ratio >= kPositiveRatio, "positive_sample_gap",
         "mean positives per image o2m-fcos " + num(o2m, 2) + " vs o2o " + num(o2o, 2) + ", ratio " + num(ratio, 2) +
             " (required >= " + num(kPositiveRatio, 1) + ")");
}

std::vector<double> mean_curve(const std::vector<TrainRun>& runs, std::vector<std::size_t>& iterations) {
  iterations.clear();
  std::vector<double> curve;
  for (std::size_t k = 0; k < runs.front().evals.size(); ++k) {
    iterations.push_back(runs.front().evals[k].iteration);
    double s = 0;
    for (const auto& r : runs) s += r.evals.at(k).result.ap50;
    curve.push_back(100 * s / static_cast<double>(runs.size()));
  }
  return curve;
}

void convergence(const ConvergenceRuns& cr) {
  std::vector<std::size_t> its;
  const auto o2o = mean_curve(cr.o2o, its);
  const auto dual = mean_curve(cr.dual, its);
  std::vector<double> fo, fd;
  for (const auto& r : cr.o2o) fo.push_back(100 * r.final_ap50());
  for (const auto& r : cr.dual) fd.push_back(100 * r.final_ap50());
  const MeanSd mo = mean_sd(fo), md = mean_sd(fd);
  const double target = o2o.back();
  std::optional<std::size_t> reach;
  for (std::size_t k = 0; k < its.size() && !reach; ++k)
    if (dual[k] >= target) reach = its[k];
  const std::size_t total = cr.dual.front().config.iterations;
  const double frac = reach ? static_cast<double>(*reach) / static_cast<double>(total) : std::numeric_limits<double>::infinity();
  const bool gain = md.mean >= mo.mean + kConvergenceMarginPts;
  const bool fast = reach && frac <= kConvergenceFraction;
  std::cout << "  AP50 curve (mean of 3 seeds, no NMS):";
  for (std::size_t k = 0; k < its.size(); ++k)
    if (its[k] % 500 == 0) std::cout << " it" << its[k] << " o2o=" << num(o2o[k], 1) << "/dual-f=" << num(dual[k], 1);
  std::cout << "\n";
  report(gain && fast, "convergence",
         "final AP50 dual-f " + num(md.mean, 2) + "+-" + num(md.sd, 2) + " vs o2o " + num(mo.mean, 2) + "+-" +
             num(mo.sd, 2) + " (gain " + num(md.mean - mo.mean, 2) + ", required >= " + num(kConvergenceMarginPts, 1) +
             ") [" + (gain ? "ok" : "not met") + "]; dual-f reaches " + num(target, 2) + " at iteration " +
             (reach ? std::to_string(*reach) : std::string("never")) + " = " +
             (reach ? num(100 * frac, 1) + "%" : std::string("-")) + " of " + std::to_string(total) +
             " (required <= " + num(100 * kConvergenceFraction, 0) + "%) [" + (fast ? "ok" : "not met") + "]");
}

void nms_free(const ConvergenceRuns& cr, const Dataset& test) {
  bool ok = true;
  std::string detail;
  for (const auto& r : cr.dual) {
    InferenceOptions opt;
    opt.head = Branch::o2o;
    const double plain = 100 * evaluate_model(r.model, test, opt).ap;
    opt.use_nms = true;
    opt.nms_threshold = 0.6;
    const double with = 100 * evaluate_model(r.model, test, opt).ap;
    ok = ok && std::abs(with - plain) <= kNmsFreeTolPts;
    detail += " seed " + std::to_string(r.config.seed) + ": " + num(plain, 2) + " vs " + num(with, 2) + " (delta " +
              num(with - plain, 2) + ");";
  }
  report(ok, "nms_free", "AP of o2o head without vs with NMS@0.6, tolerance " + num(kNmsFreeTolPts, 1) + " pt:" + detail);
}

void cls_loss_mechanism(const ConvergenceRuns& cr) {
  auto at = [](const TrainRun& r) {
    std::vector<double> v;
    for (const auto& l : r.losses) v.push_back(l.l_o2o_cls);
    return median_filter(v, kMedianWindow).at(kClsLossIteration - 1);
  };
  int wins = 0;
  std::string detail;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const double a = at(cr.o2o[i]), b = at(cr.dual[i]);
    wins += b < a;
    detail += " seed " + std::to_string(kSeeds[i]) + ": dual-f " + num(b, 4) + " vs o2o " + num(a, 4) + ";";
  }
  report(wins >= 2, "cls_loss_mechanism",
         "median(" + std::to_string(kMedianWindow) + ") o2o cls loss at iteration " + std::to_string(kClsLossIteration) +
             " lower for dual-f in " + std::to_string(wins) + "/3 seeds (required >= 2):" + detail);
}

void crowded_recall() {
  SceneConfig cfg;
  cfg.crowd_mode = true;
  const Dataset crowd = make_split(500, 5000000, cfg);
  const auto gts = annotations(crowd);
  const double nms_recall = recall_after_nms_on_gt(gts, 0.5);
  // The top-k path: every annotation as a score-1 detection, truncated to k,
  // no suppression.
  std::vector<std::vector<Detection>> dets;
  for (const auto& img : gts) {
    std::vector<Detection> d;
    for (const auto& g : img)
      if (d.size() < kDefaultTopK) d.push_back({g.box, 1.0, g.class_id});
    dets.push_back(d);
  }
  const double topk_recall = evaluate(dets, gts, cfg.num_classes).recall;
  report(nms_recall < 1.0 && topk_recall == 1.0, "crowded_recall_ceiling",
         "500 crowded scenes: recall after NMS@0.5 on ground truth " + num(nms_recall, 4) + " (< 1 required), top-k ceiling " +
             num(topk_recall, 4) + " (== 1 required)");
}

void pareto_suite() {
  using namespace dualdet::pareto;
  std::mt19937 rng(31);
  int bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 100)(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    std::uniform_int_distribution<int> v(0, trial % 2 ? 6 : 60);
    FeasibleSet s;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> f(m);
      for (auto& x : f) x = v(rng);
      s.push_back({f, std::to_string(i)});
    }
    const auto mask = oracle::front_mask(s);
    FeasibleSet expected;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) expected.push_back(s[i]);
    bool ok = pareto_front(s) == expected;
    for (std::size_t i = 0; i < n; ++i) ok = ok && is_pareto_optimal(s[i], s) == mask[i];
    std::vector<double> u(m);
    for (std::size_t j = 0; j < m; ++j) {
      u[j] = s[0].f[j];
      for (const auto& p : s) u[j] = std::min(u[j], p.f[j]);
    }
    ok = ok && utopia_point(s) == u;
    std::vector<double> w(m);
    for (auto& x : w) x = std::uniform_real_distribution<double>(0.01, 5)(rng);
    const ObjectivePoint best = argmin_weighted(s, w);
    double lowest = weighted_sum(s[0], w);
    for (const auto& p : s) lowest = std::min(lowest, weighted_sum(p, w));
    ok = ok && weighted_sum(best, w) == lowest && std::find(expected.begin(), expected.end(), best) != expected.end();
    bad += !ok;
  }
  report(bad == 0, "pareto_suite",
         "1000 random sets (n<=100, m<=4) against exhaustive dominance: " + std::to_string(bad) + " disagreements");
}

void evaluator_fidelity() {
  std::mt19937 rng(77);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const oracle::Fixture f = oracle::random_fixture(rng);
    const auto r = evaluate(f.dets, f.gts, 3);
    const auto ref = oracle::reference_evaluate(f.dets, f.gts, 3);
    bool ok = r.ap == ref.ap && r.ap50 == ref.ap50 && r.ap75 == ref.ap75;
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) ok = ok && r.ap_per_threshold[t] == ref.per_threshold[t];
    bad += !ok;
  }
  const std::vector<std::vector<GroundTruth>> gt{{{{10, 10, 30, 30}, 0}}};
  const double perfect = evaluate({{{{10, 10, 30, 30}, 0.9, 0}}}, gt, 1).ap;
  const double half = evaluate({{{{50, 50, 60, 60}, 0.9, 0}, {{10, 10, 30, 30}, 0.8, 0}}}, gt, 1).ap;
  const double none = evaluate({{}}, gt, 1).ap;
  const bool hand = perfect == 1.0 && half == 0.5 && none == 0.0;
  report(bad == 0 && hand, "evaluator_fidelity",
         "100 random fixtures vs reference evaluator: " + std::to_string(bad) + " mismatches; hand cases " + num(perfect, 3) +
             " / " + num(half, 3) + " / " + num(none, 3) + " (expected 1.000 / 0.500 / 0.000)");
}

void no_inference_overhead() {
  bool ok = true;
  std::string detail;
  for (Regime r : {Regime::dual_f, Regime::dual_r}) {
    const ModelConfig dual = model_config_for(r);
    const Model m = build_model(dual, 3);
    const Model direct = build_model(model_config_for(Regime::o2o), 3);
    const std::size_t stripped = m.strip_branch(Branch::o2o).parameter_count();
    const double surplus = static_cast<double>(m.o2m_parameter_count()) / static_cast<double>(m.parameter_count());
    ok = ok && stripped == direct.parameter_count() && surplus < kSurplusFraction;
    detail += std::string(" ") + to_string(r) + ": total " + std::to_string(m.parameter_count()) + ", stripped " +
              std::to_string(stripped) + " vs direct o2o " + std::to_string(direct.parameter_count()) +
              ", o2m surplus " + num(100 * surplus, 2) + "%;";
  }
  report(ok, "no_inference_overhead", "surplus limit " + num(100 * kSurplusFraction, 0) + "%:" + detail);
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  hungarian_exactness();
  gradient_correctness();
  pareto_suite();
  evaluator_fidelity();
  no_inference_overhead();
  crowded_recall();

  const Dataset train = make_split(2000, 0);
  const Dataset test = make_split(500, 1000000);
  lambda_zero_degeneration(train);

  const auto t1 = Clock::now();
  const ConvergenceRuns cr = convergence_runs(train, test);
  std::cout << "  convergence runs: 6 x 3000 iterations in " << num(seconds_since(t1), 0) << " s" << std::endl;
  duplicate_freedom(cr);
  positive_gap(cr);
  convergence(cr);
  nms_free(cr, test);
  cls_loss_mechanism(cr);

  std::cout << (failures ? "ACCEPTANCE FAILED: " : "ACCEPTANCE PASSED: ") << failures << " failing criteria, "
            << num(seconds_since(t0), 0) << " s total" << std::endl;
  return failures ? 1 : 0;
}
