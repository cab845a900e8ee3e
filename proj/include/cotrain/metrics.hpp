#pragma once

// Confusion-matrix based IoU / mIoU evaluation.

#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain {

// Rows are ground truth, columns are predictions. A prediction of void on a
// non-void pixel lands in void_pred[gt]: a false negative for gt and a false
// positive for nobody. Void ground truth is only counted in ignored_pixels.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes)
      : num_classes_(num_classes),
        counts_(static_cast<std::size_t>(num_classes) * num_classes, 0),
        void_pred_(num_classes, 0) {}

  int num_classes() const noexcept { return num_classes_; }
  std::uint64_t count(int gt, int pred) const { return counts_[gt * num_classes_ + pred]; }
  std::uint64_t void_predictions(int gt) const { return void_pred_[gt]; }
  std::uint64_t ignored_pixels() const noexcept { return ignored_; }

  std::uint64_t total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}) +
           std::accumulate(void_pred_.begin(), void_pred_.end(), std::uint64_t{0}) + ignored_;
  }

  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (!pred.same_shape(gt))
      fail(ErrorKind::data, "prediction " + shape_string(pred.width(), pred.height()) +
                                " and ground truth " + shape_string(gt.width(), gt.height()) +
                                " differ in shape");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const ClassId g = gt[i];
      const ClassId p = pred[i];
      if (g == kVoidId) {
        ++ignored_;
        continue;
      }
      if (g >= num_classes_)
        fail(ErrorKind::data, "ground-truth id " + std::to_string(g) + " out of range");
      if (p == kVoidId) {
        ++void_pred_[g];
      } else if (p >= num_classes_) {
        fail(ErrorKind::data, "predicted id " + std::to_string(p) + " out of range");
      } else {
        ++counts_[g * num_classes_ + p];
      }
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.num_classes_ != num_classes_)
      fail(ErrorKind::data, "cannot merge confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    for (std::size_t i = 0; i < void_pred_.size(); ++i) void_pred_[i] += other.void_pred_[i];
    ignored_ += other.ignored_;
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int num_classes_ = 0;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> void_pred_;
  std::uint64_t ignored_ = 0;
};

inline ConfusionMatrix confusion_accumulate(const LabelMap& pred, const LabelMap& gt,
                                            const LabelSpace& space, ConfusionMatrix acc) {
  if (acc.num_classes() == 0) acc = ConfusionMatrix(space.num_classes());
  acc.accumulate(pred, gt);
  return acc;
}

struct ClassIoU {
  double iou = 0.0;
  bool present = false;  // false: no gt and no prediction, excluded from means
};

inline std::vector<ClassIoU> iou_per_class(const ConfusionMatrix& cm) {
  const int n = cm.num_classes();
  std::vector<ClassIoU> out(n);
  for (int c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int k = 0; k < n; ++k) {
      row += cm.count(c, k);
      col += cm.count(k, c);
    }
    const std::uint64_t tp = cm.count(c, c);
    const std::uint64_t denom = row + col - tp + cm.void_predictions(c);
    if (denom == 0) continue;
    out[c] = {static_cast<double>(tp) / static_cast<double>(denom), true};
  }
  return out;
}

inline double miou(std::span<const ClassIoU> ious,
                   const std::optional<std::vector<int>>& subset = std::nullopt) {
  double sum = 0.0;
  int count = 0;
  auto take = [&](int c) {
    if (c < 0 || c >= static_cast<int>(ious.size()))
      fail(ErrorKind::config, "mIoU subset id " + std::to_string(c) + " out of range");
    if (!ious[c].present) return;
    sum += ious[c].iou;
    ++count;
  };
  if (subset) {
    for (int c : *subset) take(c);
  } else {
    for (int c = 0; c < static_cast<int>(ious.size()); ++c) take(c);
  }
  if (count == 0) fail(ErrorKind::data, "mIoU over an empty class set");
  return sum / count;
}

inline void write_iou_csv(std::ostream& os, const LabelSpace& space,
                          std::span<const ClassIoU> ious) {
  os << "class,iou\n";
  os << std::fixed << std::setprecision(2);
  for (int c = 0; c < space.num_classes(); ++c) {
    os << space.class_names()[c] << ',';
    if (ious[c].present)
      os << ious[c].iou * 100.0;
    else
      os << '-';
    os << '\n';
  }
}

inline std::string format_iou_table(const LabelSpace& space, std::span<const ClassIoU> ious,
                                    double miou_value, const std::string& caption) {
  std::ostringstream os;
  std::size_t width = 5;
  for (const auto& name : space.class_names()) width = std::max(width, name.size());
  os << std::fixed << std::setprecision(2);
  for (int c = 0; c < space.num_classes(); ++c) {
    os << std::left << std::setw(static_cast<int>(width) + 2) << space.class_names()[c];
    if (ious[c].present)
      os << std::right << std::setw(7) << ious[c].iou * 100.0;
    else
      os << std::right << std::setw(7) << '-';
    os << '\n';
  }
  os << std::left << std::setw(static_cast<int>(width) + 2) << caption << std::right
     << std::setw(7) << miou_value * 100.0 << '\n';
  return os.str();
}

// The 19 evaluation classes of Cityscapes, with the 16- and 13-class subsets
// used when SYNTHIA is the source (terrain, truck and train have no samples;
// wall, fence and pole are further left out of the 13-class average).
inline LabelSpace cityscapes_label_space() {
  return LabelSpace("cityscapes19",
                    {"road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
                     "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
                     "truck", "bus", "train", "motorcycle", "bicycle"});
}

inline std::optional<std::vector<int>> cityscapes_subset(int setting) {
  switch (setting) {
    case 19: return std::nullopt;
    case 16: return std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 15, 17, 18};
    case 13: return std::vector<int>{0, 1, 2, 6, 7, 8, 10, 11, 12, 13, 15, 17, 18};
  }
  fail(ErrorKind::config, "class setting must be 19, 16 or 13, got " + std::to_string(setting));
}

}  // namespace cotrain
