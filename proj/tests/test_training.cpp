#include <gtest/gtest.h>

#include <random>

#include "dualdet/experiments.hpp"
#include "tiny_model.hpp"

using namespace dualdet;
using ad::Tensor;
using namespace fixture;

namespace {
Dataset small_dataset(std::size_t n, std::uint64_t first = 0) {
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = first + i;
  return generate_dataset(seeds, SceneConfig{});
}

std::vector<double> flat(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}
}  // namespace

TEST(Training, EndToEndDualLossGradientOnTinyModel) {
  std::vector<std::pair<std::string, double>> errors;
  const double worst = tiny_model_worst_grad_error(&errors);
  for (const auto& [name, err] : errors) EXPECT_LE(err, 1e-4) << name;
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Training, DualGradientIsLinearInLambda) {
  const TinyProblem t = tiny_problem();
  auto grad_of = [&](int which) {
    Model m = t.model.clone();
    const auto [a, b] = branch_losses(t, m);
    ad::backward(which == 0 ? a : which == 1 ? b : dual_loss(a, b, t.w));
    const auto g = m.conv("stem.0").weight.grad();
    return std::vector<double>(g.begin(), g.end());
  };
  const auto g_o2o = grad_of(0), g_o2m = grad_of(1), g_da = grad_of(2);
  for (std::size_t i = 0; i < g_da.size(); ++i)
    EXPECT_NEAR(g_da[i], t.w.lambda_o2o * g_o2o[i] + t.w.lambda_o2m * g_o2m[i], 1e-8);
}

TEST(Training, ZeroO2MWeightReproducesO2OOnlyRunBitForBit) {
  const Dataset data = small_dataset(40);
  TrainConfig o2o;
  o2o.regime = Regime::o2o;
  o2o.weights = default_weights(Regime::o2o);
  o2o.iterations = 25;
  o2o.batch_size = 4;
  o2o.seed = 3;
  TrainConfig dual = o2o;
  dual.regime = Regime::dual_f;
  dual.weights.lambda_o2m = 0;
  const TrainRun a = run_training(o2o, ModelConfig{}, data, nullptr);
  const TrainRun b = run_training(dual, ModelConfig{}, data, nullptr);
  ASSERT_EQ(a.losses.size(), b.losses.size());
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    ASSERT_EQ(a.losses[i].l_o2o, b.losses[i].l_o2o) << "iteration " << i;
    ASSERT_EQ(a.losses[i].l_o2o_cls, b.losses[i].l_o2o_cls);
  }
  EXPECT_EQ(flat(a.model), flat(b.model.strip_branch(Branch::o2o)));
  EXPECT_GT(b.losses.back().l_o2m, 0.0);
}

TEST(Training, LossDecreasesWhenOverfittingTenScenes) {
  const Dataset data = small_dataset(10, 500);
  TrainConfig cfg;
  cfg.regime = Regime::dual_f;
  cfg.iterations = 200;
  cfg.batch_size = 4;
  cfg.seed = 1;
  const TrainRun run = run_training(cfg, ModelConfig{}, data, nullptr);
  std::vector<double> l;
  for (const auto& r : run.losses) l.push_back(r.l_DA);
  const auto smooth = median_filter(l, 21);
  EXPECT_LT(smooth.back(), 0.6 * smooth.front());
  EXPECT_TRUE(run.o2o_duplicate_free);
  EXPECT_EQ(run.o2o_steps_checked, 200u);
}

TEST(Training, StepStatisticsAndRetinaRegime) {
  const Dataset data = small_dataset(12, 900);
  TrainConfig cfg;
  cfg.regime = Regime::dual_r;
  cfg.weights = default_weights(cfg.regime);
  cfg.iterations = 3;
  cfg.batch_size = 2;
  EXPECT_EQ(cfg.weights.lambda_o2m, 2.0);
  Trainer tr(cfg, ModelConfig{}, data);
  const StepStats s = tr.step();
  ASSERT_EQ(s.o2o_positives.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(s.o2o_positives[i], s.gt_counts[i]);
    EXPECT_GE(s.o2m_positives[i], 1u);
  }
  EXPECT_EQ(s.report.l_o2m_ctr, 0.0);
  EXPECT_NEAR(s.report.l_DA, s.report.l_o2o + 2.0 * s.report.l_o2m, 1e-12);
}

TEST(Training, RegimesAndSchedules) {
  EXPECT_EQ(parse_regime("dual-f"), Regime::dual_f);
  EXPECT_EQ(std::string(to_string(Regime::o2m_retina)), "o2m-retina");
  EXPECT_THROW(parse_regime("dual"), ConfigError);
  EXPECT_FALSE(model_config_for(Regime::o2o).with_o2m);
  EXPECT_FALSE(model_config_for(Regime::o2m_fcos).with_o2o);
  EXPECT_EQ(default_eval_options(Regime::o2m_fcos).head, Branch::o2m);
  EXPECT_TRUE(default_eval_options(Regime::o2m_fcos).use_nms);
  EXPECT_FALSE(default_eval_options(Regime::dual_f).use_nms);

  TrainConfig c;
  c.iterations = 90;
  c.lr = 1.0;
  EXPECT_EQ(c.lr_at(89), 1.0);
  c.step_schedule = true;
  EXPECT_EQ(c.lr_at(59), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at(60), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(80), 0.01);
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Experiments, Helpers) {
  EXPECT_EQ(median_filter({5, 1, 9, 2, 7}, 3), (std::vector<double>{5, 5, 2, 7, 7}));
  const MeanSd m = mean_sd({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_NEAR(m.sd, std::sqrt(5.0 / 3.0), 1e-15);
  std::vector<std::function<int()>> work;
  for (int i = 0; i < 7; ++i) work.push_back([i] { return i * i; });
  EXPECT_EQ(run_parallel(work, 3), (std::vector<int>{0, 1, 4, 9, 16, 25, 36}));
  std::vector<std::function<int()>> failing{[] { return 1; }, []() -> int { throw ConfigError("boom"); }};
  EXPECT_THROW(run_parallel(failing, 2), ConfigError);
  const std::string header = loss_csv_header(), row = loss_csv_row(3, LossReport{});
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
}
