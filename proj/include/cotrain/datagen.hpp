#pragma once

// Deterministic street-scene generator for two domains ("source" and
// "target") with a controllable appearance gap. Layout statistics are shared
// between domains; only appearance differs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"

namespace cotrain {

enum ToyClass : ClassId {
  kRoad = 0,
  kSidewalk = 1,
  kBuilding = 2,
  kVegetation = 3,
  kSky = 4,
  kPerson = 5,
  kCar = 6,
  kPole = 7,
};

inline LabelSpace toy_label_space() {
  return LabelSpace("toy8", {"road", "sidewalk", "building", "vegetation", "sky", "person", "car",
                             "pole"});
}

struct ClassAppearance {
  std::array<double, 3> mean{};
  double stddev = 0.0;
};

struct DomainSpec {
  std::string name;
  int width = 64;
  int height = 64;
  std::vector<ClassAppearance> classes;  // indexed by class id
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  double noise_sigma = 0.0;
  double horizon_min = 0.35;  // fraction of height
  double horizon_max = 0.5;
  int buildings_min = 2, buildings_max = 5;
  int trees_min = 1, trees_max = 4;
  int cars_min = 1, cars_max = 3;
  int persons_min = 1, persons_max = 3;
  int poles_min = 1, poles_max = 3;

  void validate() const {
    if (width < 8 || height < 8) fail(ErrorKind::config, "domain '" + name + "': scene too small");
    if (noise_sigma < 0.0) fail(ErrorKind::config, "domain '" + name + "': noise sigma < 0");
    for (const auto& c : classes)
      for (double m : c.mean)
        if (m < 0.0 || m > 255.0)
          fail(ErrorKind::config, "domain '" + name + "': class color mean outside [0,255]");
  }
};

inline DomainSpec default_source_domain() {
  DomainSpec s;
  s.name = "toy-source";
  s.classes = {
      {{95, 95, 100}, 7},     // road
      {{175, 150, 160}, 9},   // sidewalk
      {{130, 85, 70}, 12},    // building
      {{60, 135, 55}, 12},    // vegetation
      {{125, 175, 235}, 7},   // sky
      {{210, 60, 70}, 12},    // person
      {{40, 50, 165}, 12},    // car
      {{200, 195, 90}, 9},    // pole
  };
  s.noise_sigma = 4.0;
  return s;
}

// Per-class color shift, a global color cast and heavier sensor noise.
inline DomainSpec default_target_domain() {
  DomainSpec s = default_source_domain();
  s.name = "toy-target";
  const std::array<std::array<double, 3>, 8> shift = {{
      {12, 8, 0},      // road
      {-15, 0, -20},   // sidewalk
      {10, 15, 10},    // building
      {10, -10, 10},   // vegetation
      {-10, -10, -30}, // sky
      {-10, 15, 10},   // person
      {20, 10, -20},   // car
      {-15, -10, 20},  // pole
  }};
  for (std::size_t c = 0; c < s.classes.size(); ++c)
    for (int ch = 0; ch < 3; ++ch)
      s.classes[c].mean[ch] = std::clamp(s.classes[c].mean[ch] + shift[c][ch], 0.0, 255.0);
  s.gain = {0.8, 0.95, 0.7};
  s.bias = {45.0, 20.0, 10.0};
  s.noise_sigma = 8.0;
  return s;
}

struct Scene {
  Image image;
  LabelMap labels;
};

namespace detail {

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline void fill_rect(LabelMap& map, int x0, int y0, int x1, int y1, ClassId c) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, map.width() - 1);
  y1 = std::min(y1, map.height() - 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) map(x, y) = c;
}

}  // namespace detail

inline LabelMap generate_layout(const DomainSpec& spec, std::mt19937_64& rng) {
  using detail::uniform_int;
  using detail::uniform_real;
  const int W = spec.width, H = spec.height;
  LabelMap map(W, H, kSky);
  const int horizon =
      static_cast<int>(std::lround(H * uniform_real(rng, spec.horizon_min, spec.horizon_max)));
  const double vx = W * uniform_real(rng, 0.4, 0.6);

  // Ground: vegetation verges, then sidewalk and road wedges from the vanishing point.
  for (int y = horizon; y < H; ++y) {
    const double depth = static_cast<double>(y - horizon + 1) / (H - horizon);
    const double road_half = 0.45 * W * depth + 0.5;
    const double walk_half = road_half * 1.4 + 1.0;
    for (int x = 0; x < W; ++x) {
      const double dx = std::abs(x + 0.5 - vx);
      map(x, y) = dx <= road_half ? kRoad : (dx <= walk_half ? kSidewalk : kVegetation);
    }
  }

  // Buildings stand on the horizon and reach into the sky band.
  const int n_buildings = uniform_int(rng, spec.buildings_min, spec.buildings_max);
  for (int i = 0; i < n_buildings; ++i) {
    const int bw = uniform_int(rng, W / 8, W / 3);
    const int x0 = uniform_int(rng, -bw / 2, W - bw / 2);
    const int top = uniform_int(rng, horizon / 4, horizon - 2);
    detail::fill_rect(map, x0, top, x0 + bw, horizon + 1, kBuilding);
  }

  // Tree crowns around the horizon line.
  const int n_trees = uniform_int(rng, spec.trees_min, spec.trees_max);
  for (int i = 0; i < n_trees; ++i) {
    const double cx = uniform_real(rng, 0, W);
    const double cy = horizon - uniform_real(rng, 0, horizon * 0.4);
    const double rx = uniform_real(rng, 3, W / 8.0), ry = uniform_real(rng, 3, H / 9.0);
    for (int y = std::max(0, static_cast<int>(cy - ry)); y <= std::min(H - 1, static_cast<int>(cy + ry)); ++y)
      for (int x = std::max(0, static_cast<int>(cx - rx)); x <= std::min(W - 1, static_cast<int>(cx + rx)); ++x) {
        const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
        if (u * u + v * v <= 1.0) map(x, y) = kVegetation;
      }
  }

  // Poles rise from the sidewalk edge.
  const int n_poles = uniform_int(rng, spec.poles_min, spec.poles_max);
  for (int i = 0; i < n_poles; ++i) {
    const int base = uniform_int(rng, horizon + 2, H - 1);
    const double depth = static_cast<double>(base - horizon + 1) / (H - horizon);
    const double road_half = 0.45 * W * depth + 0.5;
    const int side = uniform_int(rng, 0, 1) == 0 ? -1 : 1;
    const int x = static_cast<int>(std::lround(vx + side * (road_half * 1.2 + 0.5)));
    const int length = static_cast<int>(std::lround(6 + 22 * depth));
    detail::fill_rect(map, x, base - length, x, base, kPole);
  }

  // Pedestrians on the sidewalks.
  const int n_persons = uniform_int(rng, spec.persons_min, spec.persons_max);
  for (int i = 0; i < n_persons; ++i) {
    const int feet = uniform_int(rng, horizon + 3, H - 1);
    const double depth = static_cast<double>(feet - horizon + 1) / (H - horizon);
    const double road_half = 0.45 * W * depth + 0.5;
    const int side = uniform_int(rng, 0, 1) == 0 ? -1 : 1;
    const int x = static_cast<int>(std::lround(vx + side * (road_half * 1.2)));
    const int h = std::max(3, static_cast<int>(std::lround(14 * depth)));
    const int w = std::max(1, h / 3);
    detail::fill_rect(map, x - w / 2, feet - h, x + w / 2, feet, kPerson);
  }

  // Cars on the road.
  const int n_cars = uniform_int(rng, spec.cars_min, spec.cars_max);
  for (int i = 0; i < n_cars; ++i) {
    const int bottom = uniform_int(rng, horizon + 3, H - 1);
    const double depth = static_cast<double>(bottom - horizon + 1) / (H - horizon);
    const double road_half = 0.45 * W * depth + 0.5;
    const int cw = std::max(3, static_cast<int>(std::lround(0.5 * road_half)));
    const int ch = std::max(2, static_cast<int>(std::lround(cw * 0.6)));
    const int cx = static_cast<int>(std::lround(vx + uniform_real(rng, -0.6, 0.6) * road_half));
    detail::fill_rect(map, cx - cw / 2, bottom - ch, cx + cw / 2, bottom, kCar);
  }
  return map;
}

inline Image render_appearance(const DomainSpec& spec, const LabelMap& labels,
                               std::mt19937_64& rng) {
  std::normal_distribution<double> unit(0.0, 1.0);
  Image img(labels.width(), labels.height());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const ClassAppearance& a = spec.classes.at(labels[i]);
    // Shared brightness jitter plus a little per-channel jitter.
    const double shade = unit(rng) * a.stddev;
    std::array<std::uint8_t, 3> out{};
    for (int ch = 0; ch < 3; ++ch) {
      const double base = a.mean[ch] + shade + 0.35 * a.stddev * unit(rng);
      const double v = spec.gain[ch] * base + spec.bias[ch] + spec.noise_sigma * unit(rng);
      out[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    img[i] = {out[0], out[1], out[2]};
  }
  return img;
}

inline Scene generate_scene(const DomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5ceeu};
  std::mt19937_64 rng(seq);
  LabelMap labels = generate_layout(spec, rng);
  Image image = render_appearance(spec, labels, rng);
  return {std::move(image), std::move(labels)};
}

inline std::string scene_id(const std::string& prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return prefix + "_" + buf;
}

// Writes images (and labels when `labeled`) plus manifest.json into `dir`.
// Scene i uses seed (seed, i) so splits are reproducible per (spec, seed, count).
inline DatasetSplit generate_split(const DomainSpec& spec, int count, std::uint64_t seed,
                                   bool labeled, const fs::path& dir, const std::string& name) {
  if (count < 1) fail(ErrorKind::config, "split '" + name + "': count must be >= 1");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (labeled) fs::create_directories(dir / "labels", ec);
  if (ec) fail(ErrorKind::data, "cannot create " + dir.string() + ": " + ec.message());
  DatasetSplit split;
  split.name = name;
  split.kind = labeled ? SplitKind::labeled : SplitKind::unlabeled;
  split.label_space = toy_label_space();
  for (int i = 0; i < count; ++i) {
    const std::string id = scene_id(name, i);
    const Scene scene = generate_scene(spec, seed * 1000003ULL + static_cast<std::uint64_t>(i));
    DatasetEntry e;
    e.image_id = id;
    e.image_path = dir / "images" / (id + ".png");
    write_png_rgb(e.image_path, scene.image);
    if (labeled) {
      e.label_path = dir / "labels" / (id + ".png");
      write_label_png(*e.label_path, scene.labels);
    }
    split.entries.push_back(std::move(e));
  }
  save_manifest(dir / "manifest.json", split);
  return split;
}

inline void write_palette(const fs::path& path, const LabelSpace& space) {
  static constexpr std::array<std::array<int, 3>, 8> kToyPalette = {{
      {128, 64, 128}, {244, 35, 232}, {70, 70, 70}, {107, 142, 35},
      {70, 130, 180}, {220, 20, 60}, {0, 0, 142}, {153, 153, 153},
  }};
  json classes = json::array();
  for (int c = 0; c < space.num_classes(); ++c) {
    const auto& col = kToyPalette[c % kToyPalette.size()];
    classes.push_back(json{{"id", c}, {"name", space.class_names()[c]}, {"rgb", col}});
  }
  write_json(path, json{{"void", {{"id", 255}, {"rgb", {0, 0, 0}}}}, {"classes", classes}});
}

}  // namespace cotrain
