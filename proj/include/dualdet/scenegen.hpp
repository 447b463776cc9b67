#pragma once

// Procedural detection scenes: rectangles, discs and rings over a noisy
// background. A scene is a pure function of (seed, SceneConfig), so a
// dataset file stores only seeds and annotations and images are rendered
// again on load.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualdet/annotations.hpp"
#include "dualdet/error.hpp"
#include "dualdet/geometry.hpp"
#include "json.hpp"

namespace dualdet {

enum class ShapeKind { rectangle = 0, disc = 1, ring = 2 };

struct SceneConfig {
  std::size_t image_height = 64, image_width = 64;
  std::size_t num_classes = 3;  // class k is drawn as ShapeKind(k)
  std::size_t min_objects = 1, max_objects = 6;
  double min_size = 8, max_size = 40;
  /// Upper bound on pairwise IoU between objects of an ordinary scene;
  /// 1 allows any overlap.
  double max_pair_iou = 0.3;
  bool crowd_mode = false;
  double crowd_iou_target = 0.6;
  double noise = 0.1;
  std::size_t max_attempts = 200;

  void validate() const {
    if (num_classes < 1 || num_classes > 3) throw ConfigError("scene: num_classes must be in [1,3]");
    if (min_objects > max_objects) throw ConfigError("scene: min_objects > max_objects");
    if (!(min_size >= 1 && min_size <= max_size)) throw ConfigError("scene: invalid size range");
    if (max_size > static_cast<double>(std::min(image_height, image_width)))
      throw ConfigError("scene: size range exceeds the image");
    if (!(crowd_iou_target >= 0 && crowd_iou_target <= 1)) throw ConfigError("scene: crowd_iou_target outside [0,1]");
    if (!(max_pair_iou >= 0 && max_pair_iou <= 1)) throw ConfigError("scene: max_pair_iou outside [0,1]");
    if (noise < 0) throw ConfigError("scene: negative noise");
  }
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<double> image;  // [H * W], row-major, values in [0, 1]
  std::vector<GroundTruth> annotations;
};

namespace scene_detail {

struct Shape {
  ShapeKind kind;
  double cx, cy, w, h;  // center and extent in pixels
};

// Pixel (x, y) is covered when its center lies inside the shape.
inline bool covers(const Shape& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.w / 2 && std::abs(dy) <= s.h / 2;
    case ShapeKind::disc:
      return dx * dx + dy * dy <= s.w * s.w / 4;
    case ShapeKind::ring: {
      const double d2 = dx * dx + dy * dy, r = s.w / 2, ri = 0.55 * r;
      return d2 <= r * r && d2 > ri * ri;
    }
  }
  return false;
}

inline double intensity(const Shape& s, double px, double py) {
  switch (s.kind) {
    case ShapeKind::rectangle:
      return 0.9;
    case ShapeKind::disc: {
      const double d = std::hypot(px - s.cx, py - s.cy) / (s.w / 2);
      return 1.0 - 0.5 * std::min(1.0, d);
    }
    case ShapeKind::ring:
      return 0.7;
  }
  return 0.0;
}

// Tight box of the covered pixels; empty when nothing is covered.
inline bool tight_box(const Shape& s, std::size_t H, std::size_t W, Box& out) {
  long x0 = static_cast<long>(W), y0 = static_cast<long>(H), x1 = -1, y1 = -1;
  const long lo_x = std::max(0L, static_cast<long>(std::floor(s.cx - s.w / 2)) - 1);
  const long hi_x = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(s.cx + s.w / 2)) + 1);
  const long lo_y = std::max(0L, static_cast<long>(std::floor(s.cy - s.h / 2)) - 1);
  const long hi_y = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(s.cy + s.h / 2)) + 1);
  for (long y = lo_y; y <= hi_y; ++y)
    for (long x = lo_x; x <= hi_x; ++x)
      if (covers(s, x + 0.5, y + 0.5)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return false;
  out = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1), static_cast<double>(y1 + 1)};
  return true;
}

class Generator {
 public:
  Generator(std::uint64_t seed, const SceneConfig& cfg) : cfg_(cfg), rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  Shape random_shape(ShapeKind kind) {
    const double size = uniform(cfg_.min_size, cfg_.max_size);
    double w = size, h = size;
    if (kind == ShapeKind::rectangle) {
      const double aspect = std::exp(uniform(std::log(0.5), std::log(2.0)));  // h : w
      w = std::clamp(size / std::sqrt(aspect), cfg_.min_size, cfg_.max_size);
      h = std::clamp(size * std::sqrt(aspect), cfg_.min_size, cfg_.max_size);
      w = std::round(w);
      h = std::round(h);
    }
    const double W = static_cast<double>(cfg_.image_width), H = static_cast<double>(cfg_.image_height);
    double cx = uniform(w / 2, W - w / 2), cy = uniform(h / 2, H - h / 2);
    if (kind == ShapeKind::rectangle) {  // snap so edges fall on pixel boundaries
      cx = std::floor(cx - w / 2) + w / 2;
      cy = std::floor(cy - h / 2) + h / 2;
    }
    return {kind, cx, cy, w, h};
  }

  bool accept(const Shape& s, Box& box) const {
    if (!tight_box(s, cfg_.image_height, cfg_.image_width, box)) return false;
    return box.width() >= cfg_.min_size && box.height() >= cfg_.min_size && box.x1 >= 0 && box.y1 >= 0 &&
           box.x2 <= static_cast<double>(cfg_.image_width) && box.y2 <= static_cast<double>(cfg_.image_height);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  const SceneConfig& cfg_;
  std::mt19937_64 rng_;
};

inline std::vector<double> render(const std::vector<Shape>& shapes, const SceneConfig& cfg, std::mt19937_64& rng) {
  const std::size_t H = cfg.image_height, W = cfg.image_width;
  std::vector<double> img(H * W);
  std::uniform_real_distribution<double> noise(0.0, cfg.noise);
  for (double& v : img) v = cfg.noise > 0 ? noise(rng) : 0.0;
  for (const auto& s : shapes)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        if (covers(s, px, py)) img[y * W + x] = std::min(1.0, intensity(s, px, py) + (cfg.noise > 0 ? noise(rng) : 0.0) - cfg.noise / 2);
      }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

inline bool fits(const Box& b, const std::vector<GroundTruth>& placed, double max_iou) {
  for (const auto& g : placed)
    if (iou(b, g.box) > max_iou) return false;
  return true;
}

}  // namespace scene_detail

/// Ordinary scene. Placement retries a bounded number of times and settles
/// for fewer objects (never fewer than one) if the image is too full.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  using namespace scene_detail;
  Generator gen(seed, cfg);
  const std::size_t target = gen.index(cfg.min_objects, cfg.max_objects);
  Scene scene;
  scene.seed = seed;
  std::vector<Shape> shapes;
  for (std::size_t attempt = 0; attempt < cfg.max_attempts && shapes.size() < target; ++attempt) {
    const int cls = static_cast<int>(gen.index(0, cfg.num_classes - 1));
    const Shape s = gen.random_shape(static_cast<ShapeKind>(cls));
    Box box;
    if (!gen.accept(s, box) || !fits(box, scene.annotations, cfg.max_pair_iou)) continue;
    shapes.push_back(s);
    scene.annotations.push_back({box, cls});
  }
  scene.image = render(shapes, cfg, gen.rng());
  return scene;
}

/// Scene holding at least one same-class pair with IoU >= crowd_iou_target.
/// A target of 0 is the ordinary generator.
inline Scene generate_crowded_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  if (cfg.crowd_iou_target <= 0) return generate_scene(seed, cfg);
  using namespace scene_detail;
  Generator gen(seed, cfg);
  const std::size_t target = std::max<std::size_t>(2, gen.index(cfg.min_objects, cfg.max_objects));
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int cls = static_cast<int>(gen.index(0, cfg.num_classes - 1));
    const Shape a = gen.random_shape(static_cast<ShapeKind>(cls));
    Box box_a;
    if (!gen.accept(a, box_a)) continue;
    // A shifted copy of `a`: shifting by (dx, dy) with |d| <= w/4 keeps IoU high.
    Shape b = a;
    b.cx += std::round(gen.uniform(-a.w / 5, a.w / 5));
    b.cy += std::round(gen.uniform(-a.h / 5, a.h / 5));
    Box box_b;
    if (!gen.accept(b, box_b) || iou(box_a, box_b) < cfg.crowd_iou_target) continue;

    Scene scene;
    scene.seed = seed;
    std::vector<Shape> shapes{a, b};
    scene.annotations = {{box_a, cls}, {box_b, cls}};
    for (std::size_t extra = 0; extra < cfg.max_attempts && shapes.size() < target; ++extra) {
      const int c = static_cast<int>(gen.index(0, cfg.num_classes - 1));
      const Shape s = gen.random_shape(static_cast<ShapeKind>(c));
      Box box;
      if (!gen.accept(s, box) || !fits(box, scene.annotations, cfg.max_pair_iou)) continue;
      shapes.push_back(s);
      scene.annotations.push_back({box, c});
    }
    scene.image = render(shapes, cfg, gen.rng());
    return scene;
  }
  throw DomainError("generate_crowded_scene: no crowded pair found for seed " + std::to_string(seed));
}

inline Scene make_scene(std::uint64_t seed, const SceneConfig& cfg) {
  return cfg.crowd_mode ? generate_crowded_scene(seed, cfg) : generate_scene(seed, cfg);
}

// ---------------------------------------------------------------------------
// JSON-lines datasets
//
// Line 1:  {"schema":1,"kind":"header","config":{...},"config_hash":"<16 hex>"}
// Line k:  {"schema":1,"kind":"scene","seed":S,"config_hash":"<16 hex>",
//           "annotations":[{"box":[x1,y1,x2,y2],"class_id":c},...]}

inline constexpr int kDatasetSchema = 1;

inline nlohmann::json to_json(const SceneConfig& c) {
  return {{"image_height", c.image_height}, {"image_width", c.image_width}, {"num_classes", c.num_classes},
          {"min_objects", c.min_objects},   {"max_objects", c.max_objects}, {"min_size", c.min_size},
          {"max_size", c.max_size},         {"max_pair_iou", c.max_pair_iou}, {"crowd_mode", c.crowd_mode},
          {"crowd_iou_target", c.crowd_iou_target}, {"noise", c.noise}, {"max_attempts", c.max_attempts}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.min_size = j.value("min_size", c.min_size);
  c.max_size = j.value("max_size", c.max_size);
  c.max_pair_iou = j.value("max_pair_iou", c.max_pair_iou);
  c.crowd_mode = j.value("crowd_mode", c.crowd_mode);
  c.crowd_iou_target = j.value("crowd_iou_target", c.crowd_iou_target);
  c.noise = j.value("noise", c.noise);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.validate();
  return c;
}

/// FNV-1a of the canonical (key-sorted) JSON form.
inline std::string config_hash(const SceneConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct Dataset {
  SceneConfig config;
  std::vector<Scene> scenes;

  std::size_t size() const { return scenes.size(); }
};

inline Dataset generate_dataset(const std::vector<std::uint64_t>& seeds, const SceneConfig& cfg) {
  Dataset d;
  d.config = cfg;
  for (auto s : seeds) d.scenes.push_back(make_scene(s, cfg));
  return d;
}

inline void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset " + path);
  const std::string hash = config_hash(d.config);
  out << nlohmann::json{{"schema", kDatasetSchema}, {"kind", "header"}, {"config", to_json(d.config)}, {"config_hash", hash}}.dump()
      << '\n';
  for (const auto& s : d.scenes) {
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& g : s.annotations)
      anns.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}, {"class_id", g.class_id}});
    out << nlohmann::json{{"schema", kDatasetSchema}, {"kind", "scene"}, {"seed", s.seed}, {"config_hash", hash}, {"annotations", anns}}.dump()
        << '\n';
  }
  if (!out) throw IoError("failed writing dataset " + path);
}

inline Dataset write_dataset(const std::string& path, const std::vector<std::uint64_t>& seeds, const SceneConfig& cfg) {
  Dataset d = generate_dataset(seeds, cfg);
  write_dataset(path, d);
  return d;
}

/// Loads a dataset and re-renders each image from its seed. Stored
/// annotations must agree with the regenerated scene.
inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset " + path);
  Dataset d;
  std::string line, hash;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (j.at("schema").get<int>() != kDatasetSchema) throw ParseError(where + ": unsupported schema");
      if (!have_header) {
        if (j.at("kind") != "header") throw ParseError(where + ": expected header record");
        d.config = scene_config_from_json(j.at("config"));
        hash = j.at("config_hash").get<std::string>();
        if (hash != config_hash(d.config)) throw ParseError(where + ": config hash mismatch");
        have_header = true;
        continue;
      }
      if (j.at("kind") != "scene") throw ParseError(where + ": expected scene record");
      if (j.at("config_hash").get<std::string>() != hash) throw ParseError(where + ": config hash mismatch");
      Scene s = make_scene(j.at("seed").get<std::uint64_t>(), d.config);
      std::vector<GroundTruth> stored;
      for (const auto& a : j.at("annotations")) {
        const auto b = a.at("box").get<std::vector<double>>();
        if (b.size() != 4) throw ParseError(where + ": box needs 4 coordinates");
        stored.push_back({{b[0], b[1], b[2], b[3]}, a.at("class_id").get<int>()});
      }
      if (stored != s.annotations) throw ParseError(where + ": annotations do not match the regenerated scene");
      d.scenes.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  if (!have_header) throw ParseError(path + ": missing header record");
  return d;
}

}  // namespace dualdet
