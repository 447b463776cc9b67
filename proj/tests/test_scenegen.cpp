#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dualdet/evaluator.hpp"
#include "dualdet/scenegen.hpp"

using namespace dualdet;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dualdet_scenegen_test";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint64_t> seeds(std::uint64_t begin, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = begin + i;
  return s;
}
}  // namespace

TEST(Scenes, Deterministic) {
  const SceneConfig cfg;
  const Scene a = generate_scene(42, cfg), b = generate_scene(42, cfg);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.annotations, b.annotations);
  EXPECT_NE(generate_scene(43, cfg).image, a.image);
}

TEST(Scenes, CountsBoxesAndPixels) {
  const SceneConfig cfg;
  for (std::uint64_t s = 0; s < 300; ++s) {
    const Scene sc = generate_scene(s, cfg);
    EXPECT_GE(sc.annotations.size(), cfg.min_objects);
    EXPECT_LE(sc.annotations.size(), cfg.max_objects);
    ASSERT_EQ(sc.image.size(), 64u * 64u);
    for (double v : sc.image) ASSERT_TRUE(v >= 0 && v <= 1);
    for (std::size_t i = 0; i < sc.annotations.size(); ++i) {
      const auto& g = sc.annotations[i];
      EXPECT_GE(g.box.width(), cfg.min_size);
      EXPECT_GE(g.box.height(), cfg.min_size);
      EXPECT_GE(g.box.x1, 0);
      EXPECT_LE(g.box.x2, 64);
      EXPECT_TRUE(g.class_id >= 0 && g.class_id < 3);
      for (std::size_t j = 0; j < i; ++j) EXPECT_LE(iou(g.box, sc.annotations[j].box), cfg.max_pair_iou);
    }
  }
}

TEST(Scenes, OverlapUnconstrainedWhenAllowed) {
  SceneConfig cfg;
  cfg.max_pair_iou = 1.0;
  cfg.min_objects = cfg.max_objects = 6;
  double worst = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = generate_scene(s, cfg).annotations;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < i; ++j) worst = std::max(worst, iou(a[i].box, a[j].box));
  }
  EXPECT_GT(worst, 0.3);
}

TEST(Scenes, ConfigValidation) {
  SceneConfig cfg;
  cfg.num_classes = 4;
  EXPECT_THROW(generate_scene(0, cfg), ConfigError);
  cfg = {};
  cfg.min_objects = 7;
  EXPECT_THROW(generate_scene(0, cfg), ConfigError);
  cfg = {};
  cfg.max_size = 100;
  EXPECT_THROW(generate_scene(0, cfg), ConfigError);
}

TEST(CrowdedScenes, PostconditionAndGtNms) {
  SceneConfig cfg;
  cfg.crowd_mode = true;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Scene sc = make_scene(s, cfg);
    double best = 0;
    for (std::size_t i = 0; i < sc.annotations.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (sc.annotations[i].class_id == sc.annotations[j].class_id)
          best = std::max(best, iou(sc.annotations[i].box, sc.annotations[j].box));
    EXPECT_GE(best, 0.6) << "seed " << s;
    std::vector<Detection> as_dets;
    for (const auto& g : sc.annotations) as_dets.push_back({g.box, 1.0, g.class_id});
    EXPECT_LT(nms(as_dets, 0.5).size(), sc.annotations.size());
  }
  cfg.crowd_iou_target = 0;
  EXPECT_EQ(generate_crowded_scene(5, cfg).annotations, generate_scene(5, cfg).annotations);
}

TEST(Dataset, RoundTrip) {
  SceneConfig cfg;
  cfg.noise = 0.05;
  const auto path = scratch("round_trip.jsonl");
  const Dataset written = write_dataset(path.string(), seeds(100, 25), cfg);
  const Dataset read = read_dataset(path.string());
  ASSERT_EQ(read.size(), 25u);
  EXPECT_EQ(config_hash(read.config), config_hash(cfg));
  for (std::size_t i = 0; i < read.size(); ++i) {
    EXPECT_EQ(read.scenes[i].seed, written.scenes[i].seed);
    EXPECT_EQ(read.scenes[i].annotations, written.scenes[i].annotations);
    EXPECT_EQ(read.scenes[i].image, written.scenes[i].image);
  }
}

TEST(Dataset, CorruptedLineNamesLineNumber) {
  const auto path = scratch("corrupt.jsonl");
  write_dataset(path.string(), seeds(0, 5), SceneConfig{});
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  lines[3] = lines[3].substr(0, lines[3].size() / 2);
  {
    std::ofstream out(path);
    for (const auto& l : lines) out << l << '\n';
  }
  try {
    read_dataset(path.string());
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":4"), std::string::npos) << e.what();
  }
}

TEST(Dataset, HashMismatchAndTampering) {
  const auto path = scratch("tamper.jsonl");
  write_dataset(path.string(), seeds(0, 3), SceneConfig{});
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  auto rewrite = [&](const std::vector<std::string>& ls) {
    std::ofstream out(path);
    for (const auto& l : ls) out << l << '\n';
  };
  auto header = nlohmann::json::parse(lines[0]);
  auto bad = lines;
  header["config"]["noise"] = 0.2;
  bad[0] = header.dump();
  rewrite(bad);
  EXPECT_THROW(read_dataset(path.string()), ParseError);

  bad = lines;
  auto scene = nlohmann::json::parse(lines[1]);
  scene["config_hash"] = "0000000000000000";
  bad[1] = scene.dump();
  rewrite(bad);
  EXPECT_THROW(read_dataset(path.string()), ParseError);

  EXPECT_THROW(read_dataset(scratch("missing.jsonl").string()), IoError);
}

TEST(Dataset, DefaultBenchmarkIsSmallAndWellPosed) {
  const auto path = scratch("benchmark.jsonl");
  const Dataset d = write_dataset(path.string(), seeds(0, 2000), SceneConfig{});
  EXPECT_LT(fs::file_size(path), 5u * 1024 * 1024);
  std::size_t total = 0, covered = 0;
  for (const auto& s : d.scenes)
    for (const auto& g : s.annotations) {
      ++total;
      bool any = false;
      for (int y = 0; y < 8 && !any; ++y)
        for (int x = 0; x < 8 && !any; ++x) any = strictly_inside({4.0 + 8 * x, 4.0 + 8 * y}, g.box);
      covered += any;
    }
  EXPECT_GE(static_cast<double>(covered), 0.99 * static_cast<double>(total));
}
