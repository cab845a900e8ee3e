#pragma once

// Domain types shared by every stage of the adaptation pipeline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cotrain {

using ClassId = std::uint8_t;
inline constexpr ClassId kVoidId = 255;
inline constexpr int kMaxClasses = 254;

// Error categories map onto the CLI exit codes (2, 3, 4).
enum class ErrorKind { config, data, trainer };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline std::string shape_string(int width, int height) {
  return std::to_string(width) + "x" + std::to_string(height);
}

// Row-major 2-D raster.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * height, fill) {
    if (width < 0 || height < 0) fail(ErrorKind::data, "negative raster size");
  }
  Grid(int width, int height, std::vector<T> values)
      : width_(width), height_(height), data_(std::move(values)) {
    if (data_.size() != static_cast<std::size_t>(width) * height)
      fail(ErrorKind::data, "raster value count does not match " +
                                shape_string(width, height));
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return width_ == other.width() && height_ == other.height();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * width_ + x;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

using Image = Grid<Rgb>;
using LabelMap = Grid<ClassId>;
using ConfidenceMap = Grid<float>;

class LabelSpace {
 public:
  LabelSpace() = default;
  LabelSpace(std::string name, std::vector<std::string> class_names,
             std::optional<std::vector<int>> eval_subset = std::nullopt)
      : name_(std::move(name)),
        class_names_(std::move(class_names)),
        eval_subset_(std::move(eval_subset)) {
    const int n = num_classes();
    if (n < 1 || n > kMaxClasses)
      fail(ErrorKind::config, "label space '" + name_ + "': num_classes " +
                                  std::to_string(n) + " outside [1, 254]");
    if (eval_subset_) {
      for (int c : *eval_subset_)
        if (c < 0 || c >= n)
          fail(ErrorKind::config, "label space '" + name_ +
                                      "': eval_subset id " + std::to_string(c) +
                                      " outside [0, " + std::to_string(n) + ")");
    }
  }

  const std::string& name() const noexcept { return name_; }
  int num_classes() const noexcept { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  const std::optional<std::vector<int>>& eval_subset() const noexcept { return eval_subset_; }
  static constexpr ClassId void_id() noexcept { return kVoidId; }

  bool is_valid(ClassId value) const noexcept {
    return value == kVoidId || value < num_classes();
  }

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  std::string name_;
  std::vector<std::string> class_names_;
  std::optional<std::vector<int>> eval_subset_;
};

// Per-pixel, per-class confidences laid out class-major (C x H x W).
class ConfidenceStack {
 public:
  ConfidenceStack() = default;
  ConfidenceStack(int width, int height, int num_classes, float fill = 0.0f)
      : width_(width), height_(height), num_classes_(num_classes),
        values_(static_cast<std::size_t>(width) * height * num_classes, fill) {}
  ConfidenceStack(int width, int height, int num_classes, std::vector<float> values)
      : width_(width), height_(height), num_classes_(num_classes),
        values_(std::move(values)) {
    if (values_.size() != static_cast<std::size_t>(width) * height * num_classes)
      fail(ErrorKind::data, "confidence stack value count does not match " +
                                std::to_string(num_classes) + "x" +
                                shape_string(width, height));
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int num_classes() const noexcept { return num_classes_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(width_) * height_; }

  float& at(int c, std::size_t pixel) { return values_[c * pixels() + pixel]; }
  float at(int c, std::size_t pixel) const { return values_[c * pixels() + pixel]; }
  float& at(int c, int x, int y) { return at(c, static_cast<std::size_t>(y) * width_ + x); }
  float at(int c, int x, int y) const { return at(c, static_cast<std::size_t>(y) * width_ + x); }

  std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }

  // Lowest class id wins ties.
  std::pair<int, float> argmax(std::size_t pixel) const {
    int best = 0;
    float best_value = at(0, pixel);
    for (int c = 1; c < num_classes_; ++c) {
      const float v = at(c, pixel);
      if (v > best_value) {
        best = c;
        best_value = v;
      }
    }
    return {best, best_value};
  }

  bool same_shape(const ConfidenceStack& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_ && num_classes_ == o.num_classes_;
  }

  friend bool operator==(const ConfidenceStack&, const ConfidenceStack&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int num_classes_ = 0;
  std::vector<float> values_;
};

enum class ModelTag { self, branch1, branch2, ensemble };

inline const char* to_string(ModelTag tag) {
  switch (tag) {
    case ModelTag::self: return "self";
    case ModelTag::branch1: return "1";
    case ModelTag::branch2: return "2";
    case ModelTag::ensemble: return "ensemble";
  }
  return "?";
}

inline ModelTag model_tag_from_string(const std::string& s) {
  if (s == "self") return ModelTag::self;
  if (s == "1") return ModelTag::branch1;
  if (s == "2") return ModelTag::branch2;
  if (s == "ensemble") return ModelTag::ensemble;
  fail(ErrorKind::data, "unknown source_model tag '" + s + "'");
}

// Mean of confidences over non-void pixels; 0 for an all-void map.
inline float mean_labeled_confidence(const LabelMap& labels, const ConfidenceMap& conf) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kVoidId) continue;
    sum += conf[i];
    ++count;
  }
  return count == 0 ? 0.0f : static_cast<float>(sum / static_cast<double>(count));
}

// A pseudo-labeled target image. The image-level confidence is always derived
// from the maps; confidences at void pixels are forced to zero.
class PseudoLabeledImage {
 public:
  PseudoLabeledImage() = default;
  PseudoLabeledImage(std::string image_id, LabelMap labels, ConfidenceMap pixel_confidence,
                     int source_cycle, ModelTag source_model)
      : image_id_(std::move(image_id)),
        labels_(std::move(labels)),
        pixel_confidence_(std::move(pixel_confidence)),
        source_cycle_(source_cycle),
        source_model_(source_model) {
    if (!labels_.same_shape(pixel_confidence_))
      fail(ErrorKind::data, "pseudo-label '" + image_id_ + "': label map " +
                                shape_string(labels_.width(), labels_.height()) +
                                " vs confidence " +
                                shape_string(pixel_confidence_.width(),
                                             pixel_confidence_.height()));
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      float& c = pixel_confidence_[i];
      if (labels_[i] == kVoidId) {
        c = 0.0f;
      } else if (!(c >= 0.0f && c <= 1.0f)) {
        fail(ErrorKind::data, "pseudo-label '" + image_id_ + "': confidence outside [0,1]");
      }
    }
    image_confidence_ = mean_labeled_confidence(labels_, pixel_confidence_);
  }

  const std::string& image_id() const noexcept { return image_id_; }
  const LabelMap& labels() const noexcept { return labels_; }
  const ConfidenceMap& pixel_confidence() const noexcept { return pixel_confidence_; }
  float image_confidence() const noexcept { return image_confidence_; }
  int source_cycle() const noexcept { return source_cycle_; }
  ModelTag source_model() const noexcept { return source_model_; }

  std::size_t labeled_pixels() const {
    return static_cast<std::size_t>(
        std::count_if(labels_.values().begin(), labels_.values().end(),
                      [](ClassId v) { return v != kVoidId; }));
  }

  friend bool operator==(const PseudoLabeledImage&, const PseudoLabeledImage&) = default;

 private:
  std::string image_id_;
  LabelMap labels_;
  ConfidenceMap pixel_confidence_;
  float image_confidence_ = 0.0f;
  int source_cycle_ = 0;
  ModelTag source_model_ = ModelTag::self;
};

using PseudoLabelSet = std::vector<PseudoLabeledImage>;

struct ThresholdVector {
  std::vector<float> per_class;
  double curriculum_fraction = 0.0;
  int cycle = 0;

  int num_classes() const noexcept { return static_cast<int>(per_class.size()); }
  friend bool operator==(const ThresholdVector&, const ThresholdVector&) = default;
};

struct CurriculumParams {
  double p_m = 0.5;
  double p_M = 0.6;
  double delta_p = 0.05;
  double C_m = 0.5;
  double C_M = 0.9;

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(p_m)) fail(ErrorKind::config, "p_m must lie in [0,1]");
    if (!in_unit(p_M)) fail(ErrorKind::config, "p_M must lie in [0,1]");
    if (p_m > p_M) fail(ErrorKind::config, "p_m must not exceed p_M");
    if (!(delta_p >= 0.0)) fail(ErrorKind::config, "delta_p must be >= 0");
    if (!in_unit(C_m)) fail(ErrorKind::config, "C_m must lie in [0,1]");
    if (!in_unit(C_M)) fail(ErrorKind::config, "C_M must lie in [0,1]");
    if (C_m > C_M) fail(ErrorKind::config, "C_m must not exceed C_M");
  }
  friend bool operator==(const CurriculumParams&, const CurriculumParams&) = default;
};

struct MixParams {
  double p_MB = 0.75;
  double p_CM = 0.5;

  void validate() const {
    if (!(p_MB >= 0.0 && p_MB <= 1.0)) fail(ErrorKind::config, "p_MB must lie in [0,1]");
    if (!(p_CM >= 0.0 && p_CM <= 1.0)) fail(ErrorKind::config, "p_CM must lie in [0,1]");
  }
  friend bool operator==(const MixParams&, const MixParams&) = default;
};

struct SelfTrainParams {
  CurriculumParams T;
  int N = 500;
  int n = 100;
  int K_m = 1;
  int K_M = 10;
  MixParams M_df;

  void validate() const {
    T.validate();
    M_df.validate();
    if (N < 1) fail(ErrorKind::config, "N must be >= 1");
    if (n < 0) fail(ErrorKind::config, "n must be >= 0");
    if (n > N) fail(ErrorKind::config, "n must not exceed N");
    if (K_m < 0) fail(ErrorKind::config, "K_m must be >= 0");
    if (K_m >= K_M) fail(ErrorKind::config, "K_m must be < K_M");
  }
  friend bool operator==(const SelfTrainParams&, const SelfTrainParams&) = default;
};

// Which predictor labels the full target set before the last training.
enum class FinalModel { ensemble = 0, branch1 = 1, branch2 = 2 };

struct CoTrainParams {
  int K = 5;
  FinalModel w = FinalModel::branch1;
  double lambda = 0.8;
  // Curriculum fractions used inside the co-training loop; they may differ
  // from the self-training ones.
  double p_m = 0.5;
  double p_M = 0.6;

  void validate() const {
    if (K < 1) fail(ErrorKind::config, "K must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorKind::config, "lambda must lie in [0,1]");
    if (!(p_m >= 0.0 && p_m <= 1.0)) fail(ErrorKind::config, "ct_p_m must lie in [0,1]");
    if (!(p_M >= 0.0 && p_M <= 1.0)) fail(ErrorKind::config, "ct_p_M must lie in [0,1]");
    if (p_m > p_M) fail(ErrorKind::config, "ct_p_m must not exceed ct_p_M");
  }
  friend bool operator==(const CoTrainParams&, const CoTrainParams&) = default;
};

enum class SplitKind { labeled, unlabeled, pseudo_labeled };

struct DatasetEntry {
  std::string image_id;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> label_path;
  std::optional<double> sampling_weight;
  friend bool operator==(const DatasetEntry&, const DatasetEntry&) = default;
};

struct DatasetSplit {
  std::string name;
  SplitKind kind = SplitKind::unlabeled;
  std::vector<DatasetEntry> entries;
  LabelSpace label_space;

  std::size_t size() const noexcept { return entries.size(); }

  void validate() const {
    for (const auto& e : entries) {
      if (kind == SplitKind::labeled && !e.label_path)
        fail(ErrorKind::data, "labeled split '" + name + "': entry '" + e.image_id +
                                  "' has no label reference");
      if (kind == SplitKind::unlabeled && e.label_path)
        fail(ErrorKind::data, "unlabeled split '" + name + "': entry '" + e.image_id +
                                  "' carries a label reference");
    }
  }

  // Same entries without label references.
  DatasetSplit as_unlabeled() const {
    DatasetSplit out = *this;
    out.kind = SplitKind::unlabeled;
    for (auto& e : out.entries) e.label_path.reset();
    return out;
  }
};

struct ModelHandle {
  std::string branch;
  std::string session_id;
  std::string weights;
  friend bool operator==(const ModelHandle&, const ModelHandle&) = default;
};

struct LabelOffense {
  int x = 0;
  int y = 0;
  ClassId value = 0;
};

struct ValidationReport {
  bool ok = true;
  std::size_t offending_pixels = 0;
  std::vector<LabelOffense> samples;  // at most 16
};

inline ValidationReport validate_label_map(const LabelMap& map, const LabelSpace& space) {
  constexpr std::size_t kMaxSamples = 16;
  ValidationReport report;
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      const ClassId v = map(x, y);
      if (space.is_valid(v)) continue;
      report.ok = false;
      ++report.offending_pixels;
      if (report.samples.size() < kMaxSamples) report.samples.push_back({x, y, v});
    }
  }
  return report;
}

}  // namespace cotrain
