// dualdet command-line front end.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualdet/experiments.hpp"
#include "dualdet/pareto.hpp"

#ifndef DUALDET_VERSION
#define DUALDET_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dualdet;

namespace {

constexpr const char* kOutputRootEnv = "DUALDET_OUTPUT_ROOT";
constexpr std::uint64_t kTestSeedOffset = 1000000;

/// Relative paths resolve against $DUALDET_OUTPUT_ROOT when it is set.
fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

fs::path ensure_dir(const std::string& p) {
  fs::path d = resolve(p);
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec || !fs::is_directory(d)) throw IoError("cannot create output directory " + d.string());
  return d;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

/// Everything needed to rerun a command: argv, resolved config, seed,
/// build version, outputs and timing.
class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), started_(utc_now()), t0_(std::chrono::steady_clock::now()) {}

  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;

  void write(const fs::path& dir) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    json j{{"command", command_},  {"argv", argv_},        {"config", config},
           {"seed", seed},         {"version", DUALDET_VERSION}, {"outputs", outputs},
           {"started_at", started_}, {"finished_at", utc_now()}, {"wall_seconds", secs}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
};

/// A dataset argument is either a JSONL file or a directory written by
/// gen-data, in which case `split` picks the file.
fs::path dataset_file(const std::string& arg, const std::string& split) {
  fs::path p = resolve(arg);
  if (fs::is_directory(p)) p /= split + ".jsonl";
  if (!fs::exists(p)) throw IoError("dataset not found: " + p.string());
  return p;
}

Branch parse_head(const std::string& s) {
  if (s == "o2o") return Branch::o2o;
  if (s == "o2m") return Branch::o2m;
  throw ConfigError("unknown head '" + s + "' (expected o2o or o2m)");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse " + what + " '" + s + "'");
  }
}

json train_config_json(const TrainConfig& c) {
  return {{"regime", to_string(c.regime)},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"lambda_o2o", c.weights.lambda_o2o},
          {"lambda_o2m", c.weights.lambda_o2m},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"step_schedule", c.step_schedule},
          {"eval_interval", c.eval_interval},
          {"o2o_alpha", c.o2o.alpha}};
}

std::string loss_csv(const TrainRun& run) {
  std::string s = loss_csv_header() + "\n";
  for (std::size_t i = 0; i < run.losses.size(); ++i) s += loss_csv_row(i + 1, run.losses[i]) + "\n";
  return s;
}

std::string eval_csv(const TrainRun& run) {
  std::string s = "iteration," + eval_csv_header() + "\n";
  for (const auto& e : run.evals) s += std::to_string(e.iteration) + "," + eval_csv_row(e.result) + "\n";
  return s;
}

/// Writes checkpoint.json, losses.csv and eval.csv into `dir`.
std::vector<std::string> write_run(const TrainRun& run, const fs::path& dir) {
  save_checkpoint(run.model, (dir / "checkpoint.json").string());
  write_text(dir / "losses.csv", loss_csv(run));
  write_text(dir / "eval.csv", eval_csv(run));
  return {(dir / "checkpoint.json").string(), (dir / "losses.csv").string(), (dir / "eval.csv").string()};
}

struct TrainFlags {
  std::size_t iters = 3000;
  std::size_t batch = 8;
  double lr = 4e-4;
  double weight_decay = 1e-4;
  std::size_t eval_interval = 250;
  bool step_schedule = false;
  std::string data = "data";

  void add_to(CLI::App* c) {
    c->add_option("--iters", iters, "training iterations")->capture_default_str();
    c->add_option("--batch", batch, "images per step")->capture_default_str();
    c->add_option("--lr", lr, "AdamW learning rate")->capture_default_str();
    c->add_option("--weight-decay", weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    c->add_option("--eval-interval", eval_interval, "iterations between test evaluations (0 = final only)")
        ->capture_default_str();
    c->add_flag("--step-schedule", step_schedule, "divide lr by 10 at 2/3 and 8/9 of the run");
    c->add_option("--data", data, "dataset directory from gen-data")->capture_default_str();
  }

  TrainConfig config(Regime r, std::uint64_t seed) const {
    TrainConfig c;
    c.regime = r;
    c.weights = default_weights(r);
    c.iterations = iters;
    c.batch_size = batch;
    c.seed = seed;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.step_schedule = step_schedule;
    c.eval_interval = eval_interval ? eval_interval : iters;
    return c;
  }
};

struct Splits {
  Dataset train, test;
};

Splits load_splits(const std::string& data) {
  return {read_dataset(dataset_file(data, "train").string()), read_dataset(dataset_file(data, "test").string())};
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataCmd {
  std::string out = "data";
  std::size_t scenes = 2000, test_scenes = 500;
  std::uint64_t seed = 0;
  bool crowd = false;
  std::string config;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen-data", "generate train/test scene datasets");
    c->add_option("--out", out, "output directory")->capture_default_str();
    c->add_option("--scenes", scenes, "training scenes")->capture_default_str();
    c->add_option("--test-scenes", test_scenes, "test scenes")->capture_default_str();
    c->add_option("--seed", seed, "base seed; scene i uses seed+i")->capture_default_str();
    c->add_flag("--crowd", crowd, "crowded benchmark (every scene holds a pair with IoU >= target)");
    c->add_option("--config", config, "JSON file overriding scene generator fields");
  }

  void run(const std::vector<std::string>& argv) {
    SceneConfig sc;
    if (!config.empty()) {
      std::ifstream in(resolve(config));
      if (!in) throw IoError("cannot read config " + resolve(config).string());
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ParseError("config " + config + ": " + e.what());
      }
      sc = scene_config_from_json(j);
    }
    if (crowd) sc.crowd_mode = true;
    sc.validate();
    const fs::path dir = ensure_dir(out);
    std::vector<std::uint64_t> tr, te;
    for (std::size_t i = 0; i < scenes; ++i) tr.push_back(seed + i);
    for (std::size_t i = 0; i < test_scenes; ++i) te.push_back(seed + kTestSeedOffset + i);
    write_dataset((dir / "train.jsonl").string(), tr, sc);
    write_dataset((dir / "test.jsonl").string(), te, sc);
    Manifest m("gen-data", argv);
    m.seed = seed;
    m.config = {{"scene", to_json(sc)}, {"scenes", scenes}, {"test_scenes", test_scenes},
                {"test_seed_offset", kTestSeedOffset}, {"config_hash", config_hash(sc)}};
    m.outputs = {(dir / "train.jsonl").string(), (dir / "test.jsonl").string()};
    m.write(dir);
    std::cout << json{{"train", m.outputs[0]}, {"test", m.outputs[1]}, {"config_hash", config_hash(sc)}}.dump() << "\n";
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainCmd {
  std::string regime = "dual-f";
  std::uint64_t seed = 0;
  std::optional<double> lambda_o2o, lambda_o2m;
  std::string out = "runs/train";
  TrainFlags flags;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train one regime and write checkpoint, loss and eval CSVs");
    c->add_option("--regime", regime, "o2o, o2m-fcos, o2m-retina, dual-f or dual-r")->capture_default_str();
    c->add_option("--seed", seed, "initialization and sampling seed")->capture_default_str();
    c->add_option("--lambda-o2o", lambda_o2o, "weight of the one-to-one loss (default 1)");
    c->add_option("--lambda-o2m", lambda_o2m, "weight of the one-to-many loss (default 1, or 2 for retina style)");
    c->add_option("--out", out, "output directory")->capture_default_str();
    flags.add_to(c);
  }

  void run(const std::vector<std::string>& argv) {
    TrainConfig cfg = flags.config(parse_regime(regime), seed);
    if (lambda_o2o) cfg.weights.lambda_o2o = *lambda_o2o;
    if (lambda_o2m) cfg.weights.lambda_o2m = *lambda_o2m;
    cfg.validate();
    const Splits data = load_splits(flags.data);
    const fs::path dir = ensure_dir(out);
    const TrainRun run = run_training(cfg, ModelConfig{}, data.train, &data.test);
    Manifest m("train", argv);
    m.seed = seed;
    m.config = {{"train", train_config_json(cfg)}, {"model", to_json(run.model.config())},
                {"data", dataset_file(flags.data, "train").string()}};
    m.outputs = write_run(run, dir);
    m.write(dir);
    std::cout << json{{"regime", regime},
                      {"final_ap50", run.final_ap50()},
                      {"final_ap", run.final_ap()},
                      {"mean_o2o_positives", run.mean_o2o_positives},
                      {"mean_o2m_positives", run.mean_o2m_positives},
                      {"o2o_duplicate_free", run.o2o_duplicate_free}}
                     .dump()
              << "\n";
  }
};

// ---------------------------------------------------------------------------
// eval

struct EvalCmd {
  std::string checkpoint, data = "data", head = "o2o", nms = "off", out;
  double nms_thr = 0.6;
  std::size_t topk = kDefaultTopK;
  bool class_agnostic = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    c->add_option("--checkpoint", checkpoint, "checkpoint.json written by train")->required();
    c->add_option("--data", data, "dataset directory (test split) or JSONL file")->capture_default_str();
    c->add_option("--head", head, "o2o or o2m")->capture_default_str();
    c->add_option("--nms", nms, "off or on")->capture_default_str();
    c->add_option("--nms-thr", nms_thr, "NMS IoU threshold")->capture_default_str();
    c->add_option("--topk", topk, "detections kept per image")->capture_default_str();
    c->add_flag("--class-agnostic", class_agnostic, "suppress across classes");
    c->add_option("--out", out, "directory for eval.csv / eval.json (default: beside the checkpoint)");
  }

  void run(const std::vector<std::string>& argv) {
    InferenceOptions opt;
    opt.head = parse_head(head);
    if (nms != "on" && nms != "off") throw ConfigError("--nms must be on or off");
    opt.use_nms = nms == "on";
    opt.nms_threshold = nms_thr;
    opt.topk = topk;
    opt.class_aware_nms = !class_agnostic;
    const fs::path ckpt = resolve(checkpoint);
    const Model model = load_checkpoint(ckpt.string());
    const Dataset d = read_dataset(dataset_file(data, "test").string());
    const EvalResult r = evaluate_model(model, d, opt);
    const fs::path dir = out.empty() ? ckpt.parent_path() / ("eval_" + head + "_nms-" + nms) : ensure_dir(out);
    fs::create_directories(dir);
    write_text(dir / "eval.csv", eval_csv_header() + "\n" + eval_csv_row(r) + "\n");
    write_text(dir / "eval.json", to_json(r).dump(2) + "\n");
    Manifest m("eval", argv);
    m.config = {{"checkpoint", ckpt.string()}, {"data", dataset_file(data, "test").string()}, {"head", head},
                {"nms", opt.use_nms}, {"nms_threshold", nms_thr}, {"topk", topk},
                {"class_aware_nms", opt.class_aware_nms}};
    m.outputs = {(dir / "eval.csv").string(), (dir / "eval.json").string()};
    m.write(dir);
    std::cout << to_json(r).dump() << "\n";
  }
};

// ---------------------------------------------------------------------------
// compare

struct CompareCmd {
  std::string regimes = "o2o,dual-f", seeds = "0,1,2", out = "runs/compare";
  std::size_t jobs = 1;
  TrainFlags flags;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("compare", "train regime x seed grid and tabulate AP at each evaluation");
    c->add_option("--regimes", regimes, "comma-separated regimes")->capture_default_str();
    c->add_option("--seeds", seeds, "comma-separated seeds")->capture_default_str();
    c->add_option("--out", out, "output directory")->capture_default_str();
    c->add_option("--jobs", jobs, "parallel training jobs")->capture_default_str();
    flags.add_to(c);
  }

  void run(const std::vector<std::string>& argv) {
    std::vector<Regime> rs;
    for (const auto& s : split(regimes, ',')) rs.push_back(parse_regime(s));
    std::vector<std::uint64_t> ss;
    for (const auto& s : split(seeds, ',')) ss.push_back(static_cast<std::uint64_t>(parse_double(s, "seed")));
    if (rs.empty() || ss.empty()) throw ConfigError("compare needs at least one regime and one seed");
    const Splits data = load_splits(flags.data);
    const fs::path dir = ensure_dir(out);

    std::vector<TrainConfig> cfgs;
    for (Regime r : rs)
      for (auto s : ss) {
        cfgs.push_back(flags.config(r, s));
        cfgs.back().validate();
      }
    std::vector<std::function<TrainRun()>> work;
    for (const auto& c : cfgs) work.push_back([&, c] { return run_training(c, ModelConfig{}, data.train, &data.test); });
    const auto runs = run_parallel(work, jobs);

    Manifest m("compare", argv);
    m.seed = ss.front();
    m.config = {{"regimes", regimes}, {"seeds", ss}, {"train", train_config_json(cfgs.front())},
                {"data", dataset_file(flags.data, "train").string()}};
    std::string csv = "kind,regime,seed,iteration,ap50,ap50_sd,ap,ap_sd,runs\n";
    for (const auto& run : runs) {
      const std::string name = std::string(to_string(run.config.regime)) + "_s" + std::to_string(run.config.seed);
      const fs::path rd = ensure_dir((dir / name).string());
      for (auto& o : write_run(run, rd)) m.outputs.push_back(o);
      for (const auto& e : run.evals)
        csv += "run," + std::string(to_string(run.config.regime)) + "," + std::to_string(run.config.seed) + "," +
               std::to_string(e.iteration) + "," + fmt(100 * e.result.ap50, 4) + ",0," + fmt(100 * e.result.ap, 4) + ",0,1\n";
    }
    std::cout << std::left << std::setw(12) << "regime" << std::setw(8) << "seed" << std::setw(18) << "AP50"
              << std::setw(18) << "AP" << "\n";
    for (const auto& run : runs)
      std::cout << std::setw(12) << to_string(run.config.regime) << std::setw(8) << run.config.seed << std::setw(18)
                << fmt(100 * run.final_ap50()) << std::setw(18) << fmt(100 * run.final_ap()) << "\n";
    for (Regime r : rs) {
      std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> at;
      for (const auto& run : runs)
        if (run.config.regime == r)
          for (const auto& e : run.evals) {
            at[e.iteration].first.push_back(100 * e.result.ap50);
            at[e.iteration].second.push_back(100 * e.result.ap);
          }
      for (const auto& [it, v] : at) {
        const MeanSd a50 = mean_sd(v.first), a = mean_sd(v.second);
        csv += "aggregate," + std::string(to_string(r)) + ",all," + std::to_string(it) + "," + fmt(a50.mean, 4) + "," +
               fmt(a50.sd, 4) + "," + fmt(a.mean, 4) + "," + fmt(a.sd, 4) + "," + std::to_string(v.first.size()) + "\n";
      }
      const auto& last = at.rbegin()->second;
      const MeanSd a50 = mean_sd(last.first), a = mean_sd(last.second);
      std::cout << std::setw(12) << to_string(r) << std::setw(8) << "mean" << std::setw(18)
                << (fmt(a50.mean) + " +- " + fmt(a50.sd)) << std::setw(18) << (fmt(a.mean) + " +- " + fmt(a.sd))
                << "\n";
    }
    write_text(dir / "summary.csv", csv);
    m.outputs.push_back((dir / "summary.csv").string());
    m.write(dir);
  }
};

// ---------------------------------------------------------------------------
// sweep-lambda

struct SweepCmd {
  std::string grid = "1:0.5,1:1,1:2,1:4,0.5:1,2:1,4:1", out = "runs/sweep";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool baseline = false;
  TrainFlags flags;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("sweep-lambda", "train dual-f over a grid of (lambda_o2o, lambda_o2m)");
    c->add_option("--grid", grid, "comma-separated lambda_o2o:lambda_o2m pairs")->capture_default_str();
    c->add_option("--seed", seed, "seed shared by every setting")->capture_default_str();
    c->add_option("--out", out, "output directory")->capture_default_str();
    c->add_option("--jobs", jobs, "parallel training jobs")->capture_default_str();
    c->add_flag("--with-baseline", baseline, "also train the o2o-only regime as a reference row");
    flags.add_to(c);
  }

  void run(const std::vector<std::string>& argv) {
    std::vector<TrainConfig> cfgs;
    for (const auto& cell : split(grid, ',')) {
      const auto parts = split(cell, ':');
      if (parts.size() != 2) throw ConfigError("grid entry '" + cell + "' is not lambda_o2o:lambda_o2m");
      TrainConfig c = flags.config(Regime::dual_f, seed);
      c.weights.lambda_o2o = parse_double(parts[0], "lambda_o2o");
      c.weights.lambda_o2m = parse_double(parts[1], "lambda_o2m");
      c.validate();
      cfgs.push_back(c);
    }
    if (cfgs.empty()) throw ConfigError("empty lambda grid");
    if (baseline) cfgs.push_back(flags.config(Regime::o2o, seed));
    const Splits data = load_splits(flags.data);
    const fs::path dir = ensure_dir(out);
    std::vector<std::function<TrainRun()>> work;
    for (const auto& c : cfgs) work.push_back([&, c] { return run_training(c, ModelConfig{}, data.train, &data.test); });
    const auto runs = run_parallel(work, jobs);

    Manifest m("sweep-lambda", argv);
    m.seed = seed;
    m.config = {{"grid", grid}, {"with_baseline", baseline}, {"train", train_config_json(cfgs.front())},
                {"data", dataset_file(flags.data, "train").string()}};
    std::string csv = "regime,lambda_o2o,lambda_o2m,ap50,ap,ap75\n";
    std::cout << std::left << std::setw(10) << "regime" << std::setw(12) << "lambda_o2o" << std::setw(12)
              << "lambda_o2m" << std::setw(10) << "AP50" << std::setw(10) << "AP" << "AP75\n";
    for (const auto& run : runs) {
      const auto& w = run.config.weights;
      const std::string reg = to_string(run.config.regime);
      const std::string name = reg + "_" + fmt(w.lambda_o2o, 3) + "_" + fmt(w.lambda_o2m, 3);
      for (auto& o : write_run(run, ensure_dir((dir / name).string()))) m.outputs.push_back(o);
      const EvalResult& r = run.evals.back().result;
      const double lo2m = run.config.regime == Regime::o2o ? 0.0 : w.lambda_o2m;
      csv += reg + "," + fmt(w.lambda_o2o, 3) + "," + fmt(lo2m, 3) + "," + fmt(100 * r.ap50, 4) + "," +
             fmt(100 * r.ap, 4) + "," + fmt(100 * r.ap75, 4) + "\n";
      std::cout << std::setw(10) << reg << std::setw(12) << fmt(w.lambda_o2o) << std::setw(12) << fmt(lo2m)
                << std::setw(10) << fmt(100 * r.ap50) << std::setw(10) << fmt(100 * r.ap) << fmt(100 * r.ap75) << "\n";
    }
    write_text(dir / "sweep.csv", csv);
    m.outputs.push_back((dir / "sweep.csv").string());
    m.write(dir);
  }
};

// ---------------------------------------------------------------------------
// crowd-recall

struct CrowdRecallCmd {
  std::string data = "data", checkpoint, head = "o2o", out;
  double nms_thr = 0.5;
  std::size_t topk = kDefaultTopK;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("crowd-recall", "recall lost to NMS on ground truth and, optionally, on predictions");
    c->add_option("--data", data, "dataset directory (test split) or JSONL file")->capture_default_str();
    c->add_option("--nms-thr", nms_thr, "NMS IoU threshold")->capture_default_str();
    c->add_option("--checkpoint", checkpoint, "also measure a trained model's top-k and NMS recall");
    c->add_option("--head", head, "head used with --checkpoint")->capture_default_str();
    c->add_option("--topk", topk, "detections kept per image")->capture_default_str();
    c->add_option("--out", out, "directory for crowd_recall.json and its manifest");
  }

  void run(const std::vector<std::string>& argv) {
    const fs::path file = dataset_file(data, "test");
    const Dataset d = read_dataset(file.string());
    const auto gts = annotations(d);
    std::size_t total = 0, ceiling = 0;
    for (const auto& g : gts) {
      total += g.size();
      ceiling += std::min(g.size(), topk);
    }
    json r{{"data", file.string()},
           {"nms_threshold", nms_thr},
           {"images", d.size()},
           {"gts", total},
           {"gt_nms_recall", recall_after_nms_on_gt(gts, nms_thr)},
           {"gt_topk_recall", total ? static_cast<double>(ceiling) / static_cast<double>(total) : 1.0}};
    if (!checkpoint.empty()) {
      const Model model = load_checkpoint(resolve(checkpoint).string());
      InferenceOptions opt;
      opt.head = parse_head(head);
      opt.topk = topk;
      const EvalResult plain = evaluate_model(model, d, opt);
      opt.use_nms = true;
      opt.nms_threshold = nms_thr;
      const EvalResult with_nms = evaluate_model(model, d, opt);
      r["model"] = {{"checkpoint", resolve(checkpoint).string()}, {"head", head},
                    {"topk_recall", plain.recall},    {"nms_recall", with_nms.recall},
                    {"topk_ap50", plain.ap50},        {"nms_ap50", with_nms.ap50}};
    }
    if (!out.empty()) {
      const fs::path dir = ensure_dir(out);
      write_text(dir / "crowd_recall.json", r.dump(2) + "\n");
      Manifest m("crowd-recall", argv);
      m.config = {{"data", file.string()}, {"nms_threshold", nms_thr}, {"checkpoint", checkpoint}, {"head", head},
                  {"topk", topk}};
      m.outputs = {(dir / "crowd_recall.json").string()};
      m.write(dir);
    }
    std::cout << r.dump() << "\n";
  }
};

// ---------------------------------------------------------------------------
// pareto-demo

struct ParetoCmd {
  std::string points, weights;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("pareto-demo", "Pareto front, utopia point and weighted-sum minimizer of a point set");
    c->add_option("--points", points, "CSV with a header; first column id, remaining columns objectives")->required();
    c->add_option("--weights", weights, "comma-separated positive weights (default all 1)");
  }

  void run(const std::vector<std::string>&) {
    std::ifstream in(resolve(points));
    if (!in) throw IoError("cannot read " + resolve(points).string());
    pareto::FeasibleSet set;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (lineno == 1 || line.empty()) continue;
      const auto cells = split(line, ',');
      if (cells.size() < 2) throw ParseError(points + ":" + std::to_string(lineno) + ": need id and objectives");
      pareto::ObjectivePoint p;
      p.id = cells[0];
      for (std::size_t i = 1; i < cells.size(); ++i)
        p.f.push_back(parse_double(cells[i], points + ":" + std::to_string(lineno)));
      set.push_back(std::move(p));
    }
    const auto pts = [](const pareto::FeasibleSet& s) {
      json a = json::array();
      for (const auto& p : s) a.push_back({{"id", p.id}, {"f", p.f}});
      return a;
    };
    const auto front = pareto::pareto_front(set);
    json r{{"points", set.size()}, {"front", pts(front)}, {"utopia", pareto::utopia_point(set)}};
    std::vector<double> w;
    if (weights.empty()) {
      if (!set.empty()) w.assign(set.front().f.size(), 1.0);
    } else {
      for (const auto& s : split(weights, ',')) w.push_back(parse_double(s, "weight"));
    }
    const auto best = pareto::argmin_weighted(set, w);
    r["weights"] = w;
    r["argmin_weighted"] = {{"id", best.id}, {"f", best.f}};
    std::cout << r.dump() << "\n";
  }
};

void print_error(const std::string& code, const std::string& message) {
  std::cerr << "error: " << json{{"code", code}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dualdet: dual-assignment detector experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DUALDET_VERSION);
  GenDataCmd gen;
  TrainCmd train;
  EvalCmd eval;
  CompareCmd compare;
  SweepCmd sweep;
  CrowdRecallCmd crowd;
  ParetoCmd pareto;
  gen.add(app);
  train.add(app);
  eval.add(app);
  compare.add(app);
  sweep.add(app);
  crowd.add(app);
  pareto.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  const std::vector<std::string> args(argv, argv + argc);
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gen-data") gen.run(args);
    else if (cmd == "train") train.run(args);
    else if (cmd == "eval") eval.run(args);
    else if (cmd == "compare") compare.run(args);
    else if (cmd == "sweep-lambda") sweep.run(args);
    else if (cmd == "crowd-recall") crowd.run(args);
    else if (cmd == "pareto-demo") pareto.run(args);
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
