#pragma once

// CIE L*a*b* statistics alignment of source images to the target domain
// (Reinhard-style per-channel mean/std matching) and the class-balance
// sampling policy.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"

namespace cotrain {

struct LabPixel {
  double L = 0.0, a = 0.0, b = 0.0;
  double& operator[](int i) { return i == 0 ? L : (i == 1 ? a : b); }
  double operator[](int i) const { return i == 0 ? L : (i == 1 ? a : b); }
};

using LabImage = Grid<LabPixel>;

namespace detail {

// D65 reference white, consistent with the sRGB matrix rows below.
inline constexpr double kWhiteX = 0.95047;
inline constexpr double kWhiteY = 1.00000;
inline constexpr double kWhiteZ = 1.08883;
inline constexpr double kDelta = 6.0 / 29.0;

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double linear_to_srgb(double c) {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}

inline double lab_f_inv(double t) {
  return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace detail

inline LabPixel rgb_to_lab(Rgb px) {
  using namespace detail;
  const double r = srgb_to_linear(px.r / 255.0);
  const double g = srgb_to_linear(px.g / 255.0);
  const double b = srgb_to_linear(px.b / 255.0);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = lab_f(x / kWhiteX);
  const double fy = lab_f(y / kWhiteY);
  const double fz = lab_f(z / kWhiteZ);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

// Unclipped sRGB in [0,255] units.
inline std::array<double, 3> lab_to_rgb_unclipped(const LabPixel& lab) {
  using namespace detail;
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const double x = kWhiteX * lab_f_inv(fx);
  const double y = kWhiteY * lab_f_inv(fy);
  const double z = kWhiteZ * lab_f_inv(fz);
  const double r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
  const double g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
  const double b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
  auto enc = [](double c) { return 255.0 * linear_to_srgb(std::max(c, 0.0)); };
  return {enc(r), enc(g), enc(b)};
}

inline Rgb lab_to_rgb(const LabPixel& lab) {
  const auto v = lab_to_rgb_unclipped(lab);
  return {detail::to_byte(v[0]), detail::to_byte(v[1]), detail::to_byte(v[2])};
}

inline LabImage to_lab(const Image& img) {
  LabImage out(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = rgb_to_lab(img[i]);
  return out;
}

inline Image to_rgb(const LabImage& img) {
  Image out(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = lab_to_rgb(img[i]);
  return out;
}

struct LabStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
  std::size_t sample_size = 0;  // images
  std::uint64_t pixel_count = 0;
};

// Mergeable partial sums over pooled pixels.
class LabAccumulator {
 public:
  void add(const LabImage& img) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        const double v = img[i][c];
        sum_[c] += v;
        sumsq_[c] += v * v;
      }
    }
    count_ += img.size();
    ++images_;
  }

  LabAccumulator& operator+=(const LabAccumulator& o) {
    for (int c = 0; c < 3; ++c) {
      sum_[c] += o.sum_[c];
      sumsq_[c] += o.sumsq_[c];
    }
    count_ += o.count_;
    images_ += o.images_;
    return *this;
  }

  LabStats stats() const {
    LabStats s;
    s.sample_size = images_;
    s.pixel_count = count_;
    if (count_ == 0) return s;
    const double n = static_cast<double>(count_);
    for (int c = 0; c < 3; ++c) {
      s.mean[c] = sum_[c] / n;
      s.stddev[c] = std::sqrt(std::max(0.0, sumsq_[c] / n - s.mean[c] * s.mean[c]));
    }
    return s;
  }

 private:
  std::array<double, 3> sum_{};
  std::array<double, 3> sumsq_{};
  std::uint64_t count_ = 0;
  std::size_t images_ = 0;
};

inline LabStats lab_stats(std::span<const LabImage> images) {
  LabAccumulator acc;
  for (const auto& img : images) acc.add(img);
  return acc.stats();
}

// Pooled stats over min(sample_size, |split|) seeded-random images.
inline LabStats dataset_lab_stats(const DatasetSplit& split, std::size_t sample_size,
                                  std::uint64_t seed) {
  if (split.entries.empty())
    fail(ErrorKind::data, "cannot compute LAB statistics of empty split '" + split.name + "'");
  std::vector<std::size_t> order(split.entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (sample_size < order.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(sample_size);
    std::sort(order.begin(), order.end());
  }
  LabAccumulator acc;
  for (std::size_t i : order) acc.add(to_lab(read_png_rgb(split.entries[i].image_path)));
  return acc.stats();
}

inline LabImage lab_align(const LabImage& img, const LabStats& src, const LabStats& tgt) {
  LabImage out(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      if (src.stddev[c] > 0.0)
        out[i][c] = (img[i][c] - src.mean[c]) / src.stddev[c] * tgt.stddev[c] + tgt.mean[c];
      else
        out[i][c] = tgt.mean[c];
    }
  }
  return out;
}

inline Image lab_align_image(const Image& img, const LabStats& src, const LabStats& tgt) {
  return to_rgb(lab_align(to_lab(img), src, tgt));
}

// Writes aligned copies of every image to `dir`/images and a manifest that
// keeps the original label files.
inline DatasetSplit lab_align_split(const DatasetSplit& split, const LabStats& src,
                                    const LabStats& tgt, const fs::path& dir,
                                    const std::string& name) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) fail(ErrorKind::data, "cannot create " + dir.string() + ": " + ec.message());
  DatasetSplit out = split;
  out.name = name;
  for (auto& e : out.entries) {
    const fs::path dst = dir / "images" / (file_stem_for_id(e.image_id) + ".png");
    write_png_rgb(dst, lab_align_image(read_png_rgb(e.image_path), src, tgt));
    e.image_path = dst;
  }
  save_manifest(dir / "manifest.json", out);
  return out;
}

inline json to_json(const LabStats& s) {
  return json{{"mean", s.mean},
              {"stddev", s.stddev},
              {"sample_size", s.sample_size},
              {"pixel_count", s.pixel_count}};
}

inline LabStats lab_stats_from_json(const json& j) {
  LabStats s;
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.stddev = j.at("stddev").get<std::array<double, 3>>();
  s.sample_size = j.at("sample_size").get<std::size_t>();
  s.pixel_count = j.at("pixel_count").get<std::uint64_t>();
  return s;
}

// ---------------------------------------------------------------------------
// Class balance

struct SamplingWeights {
  std::map<std::string, double> weights;  // sums to 1
};

// image weight = max over classes present of median(f) / f_c, normalized.
inline SamplingWeights class_balance_weights(
    std::span<const std::pair<std::string, LabelMap>> images, int num_classes) {
  std::vector<std::uint64_t> freq(num_classes, 0);
  for (const auto& [id, map] : images) {
    bool any = false;
    for (ClassId v : map.values()) {
      if (v == kVoidId) continue;
      if (v >= num_classes) fail(ErrorKind::data, "label id out of range in '" + id + "'");
      ++freq[v];
      any = true;
    }
    if (!any) fail(ErrorKind::data, "label map of '" + id + "' has no labeled pixels");
  }
  std::vector<double> observed;
  for (auto f : freq)
    if (f > 0) observed.push_back(static_cast<double>(f));
  std::sort(observed.begin(), observed.end());
  const std::size_t m = observed.size();
  const double median =
      m % 2 == 1 ? observed[m / 2] : 0.5 * (observed[m / 2 - 1] + observed[m / 2]);

  SamplingWeights out;
  double total = 0.0;
  for (const auto& [id, map] : images) {
    std::vector<bool> present(num_classes, false);
    for (ClassId v : map.values())
      if (v != kVoidId) present[v] = true;
    double w = 0.0;
    for (int c = 0; c < num_classes; ++c)
      if (present[c]) w = std::max(w, median / static_cast<double>(freq[c]));
    out.weights[id] += w;
    total += w;
  }
  for (auto& [id, w] : out.weights) w /= total;
  return out;
}

inline SamplingWeights class_balance_weights(const DatasetSplit& split) {
  if (split.kind != SplitKind::labeled)
    fail(ErrorKind::data, "class balance needs a labeled split, got '" + split.name + "'");
  if (split.entries.empty()) fail(ErrorKind::data, "class balance over an empty split");
  std::vector<std::pair<std::string, LabelMap>> maps;
  maps.reserve(split.entries.size());
  for (const auto& e : split.entries) {
    LabelMap map = read_label_png(*e.label_path);
    if (map.empty()) fail(ErrorKind::data, "empty label map: " + e.label_path->string());
    maps.emplace_back(e.image_id, std::move(map));
  }
  return class_balance_weights(maps, split.label_space.num_classes());
}

}  // namespace cotrain
