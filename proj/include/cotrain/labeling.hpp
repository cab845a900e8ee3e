#pragma once

// From model confidences to a curated pseudo-label set: self-paced
// percentile thresholds, clamping, per-pixel acceptance, image ranking,
// top-n selection, cross-cycle fusion and void filling between models.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cotrain/core.hpp"

namespace cotrain {

// Per-class confidences gathered at pixels where that class is the argmax,
// kept sorted in descending order. With a non-zero reservoir cap each class
// keeps a seeded uniform sample of at most `cap` values.
class ClassConfidenceSample {
 public:
  ClassConfidenceSample() = default;
  explicit ClassConfidenceSample(int num_classes, std::size_t reservoir_cap = 0,
                                 std::uint64_t seed = 0)
      : values_(num_classes), seen_(num_classes, 0), cap_(reservoir_cap) {
    rngs_.reserve(num_classes);
    for (int c = 0; c < num_classes; ++c) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(c)};
      rngs_.emplace_back(seq);
    }
  }

  // Builds directly from per-class value lists (sorted on entry).
  static ClassConfidenceSample from_values(std::vector<std::vector<float>> per_class) {
    ClassConfidenceSample s(static_cast<int>(per_class.size()));
    for (std::size_t c = 0; c < per_class.size(); ++c)
      for (float v : per_class[c]) s.add_value(static_cast<int>(c), v);
    s.finalize();
    return s;
  }

  int num_classes() const noexcept { return static_cast<int>(values_.size()); }

  void add_value(int c, float v) {
    if (!(v > 0.0f)) return;
    sorted_ = false;
    ++seen_[c];
    auto& vec = values_[c];
    if (cap_ == 0 || vec.size() < cap_) {
      vec.push_back(v);
      return;
    }
    std::uniform_int_distribution<std::uint64_t> pick(0, seen_[c] - 1);
    const std::uint64_t j = pick(rngs_[c]);
    if (j < cap_) vec[j] = v;
  }

  void add(const ConfidenceStack& stack) {
    if (stack.num_classes() != num_classes())
      fail(ErrorKind::data, "confidence stack has " + std::to_string(stack.num_classes()) +
                                " classes, sample expects " + std::to_string(num_classes()));
    for (std::size_t i = 0; i < stack.pixels(); ++i) {
      const auto [c, v] = stack.argmax(i);
      add_value(c, v);
    }
  }

  void merge(const ClassConfidenceSample& other) {
    for (int c = 0; c < num_classes(); ++c)
      for (float v : other.values_[c]) add_value(c, v);
  }

  void finalize() {
    for (auto& vec : values_) std::sort(vec.begin(), vec.end(), std::greater<>());
    sorted_ = true;
  }

  std::span<const float> values(int c) const {
    if (!sorted_) fail(ErrorKind::data, "ClassConfidenceSample read before finalize()");
    return values_[c];
  }

 private:
  std::vector<std::vector<float>> values_;
  std::vector<std::uint64_t> seen_;
  std::vector<std::mt19937_64> rngs_;
  std::size_t cap_ = 0;
  bool sorted_ = true;
};

inline double curriculum_fraction(int k, const CurriculumParams& T) {
  if (k < 0) fail(ErrorKind::config, "cycle index must be >= 0");
  return std::min(T.p_m + k * T.delta_p, T.p_M);
}

// Descending-order index floor(p * size), clamped to the last element.
// The 1e-9 slack keeps products like 0.57 * 100 from rounding down.
inline std::size_t percentile_index(double p, std::size_t size) {
  const auto raw = static_cast<std::size_t>(std::floor(p * static_cast<double>(size) + 1e-9));
  return std::min(raw, size - 1);
}

inline ThresholdVector compute_class_thresholds(const ClassConfidenceSample& sample, double p,
                                                const CurriculumParams& T, int cycle = 0) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::config, "curriculum fraction outside [0,1]");
  ThresholdVector out;
  out.curriculum_fraction = p;
  out.cycle = cycle;
  out.per_class.resize(sample.num_classes());
  const float lo = static_cast<float>(T.C_m);
  const float hi = static_cast<float>(T.C_M);
  for (int c = 0; c < sample.num_classes(); ++c) {
    const auto v = sample.values(c);
    if (v.empty()) {
      out.per_class[c] = hi;
      continue;
    }
    const float raw = v[percentile_index(p, v.size())];
    out.per_class[c] = std::max(lo, std::min(raw, hi));
  }
  return out;
}

inline PseudoLabeledImage apply_thresholds(const ConfidenceStack& stack,
                                           const ThresholdVector& vct, std::string image_id,
                                           int cycle = 0, ModelTag tag = ModelTag::self) {
  if (stack.num_classes() != vct.num_classes())
    fail(ErrorKind::data, "threshold vector has " + std::to_string(vct.num_classes()) +
                              " classes, stack has " + std::to_string(stack.num_classes()));
  LabelMap labels(stack.width(), stack.height(), kVoidId);
  ConfidenceMap conf(stack.width(), stack.height(), 0.0f);
  for (std::size_t i = 0; i < stack.pixels(); ++i) {
    const auto [c, v] = stack.argmax(i);
    if (v >= vct.per_class[c]) {
      labels[i] = static_cast<ClassId>(c);
      conf[i] = v;
    }
  }
  return PseudoLabeledImage(std::move(image_id), std::move(labels), std::move(conf), cycle, tag);
}

struct PseudoLabelResult {
  PseudoLabelSet set;
  ThresholdVector thresholds;
};

// Thresholds are computed once over all stacks and applied to every stack.
inline PseudoLabelResult pseudo_label_stacks(std::span<const ConfidenceStack> stacks,
                                             std::span<const std::string> ids, int k,
                                             const CurriculumParams& T, ModelTag tag,
                                             std::size_t reservoir_cap = 0,
                                             std::uint64_t seed = 0) {
  if (stacks.size() != ids.size())
    fail(ErrorKind::data, "stack count does not match image id count");
  if (stacks.empty()) fail(ErrorKind::data, "no confidence stacks to pseudo-label");
  ClassConfidenceSample sample(stacks.front().num_classes(), reservoir_cap, seed);
  for (const auto& s : stacks) sample.add(s);
  sample.finalize();
  PseudoLabelResult out;
  out.thresholds = compute_class_thresholds(sample, curriculum_fraction(k, T), T, k);
  out.set.reserve(stacks.size());
  for (std::size_t i = 0; i < stacks.size(); ++i)
    out.set.push_back(apply_thresholds(stacks[i], out.thresholds, ids[i], k, tag));
  return out;
}

// Descending image confidence, ascending id on ties.
inline bool more_confident(const PseudoLabeledImage& a, const PseudoLabeledImage& b) {
  if (a.image_confidence() != b.image_confidence())
    return a.image_confidence() > b.image_confidence();
  return a.image_id() < b.image_id();
}

inline PseudoLabelSet select_top_n(PseudoLabelSet candidates, std::size_t n) {
  std::sort(candidates.begin(), candidates.end(), more_confident);
  if (candidates.size() > n) candidates.resize(n);
  return candidates;
}

// Union keyed by image id; on collision the higher image confidence wins and
// an exact tie keeps the earlier entry (previous before incoming). Output
// ordered by id.
inline PseudoLabelSet fuse(const PseudoLabelSet& previous, const PseudoLabelSet& incoming) {
  std::map<std::string, const PseudoLabeledImage*> merged;
  for (const auto* set : {&previous, &incoming})
    for (const auto& p : *set) {
      auto [it, inserted] = merged.try_emplace(p.image_id(), &p);
      if (!inserted && p.image_confidence() > it->second->image_confidence()) it->second = &p;
    }
  PseudoLabelSet out;
  out.reserve(merged.size());
  for (const auto& [id, p] : merged) out.push_back(*p);
  return out;
}

// Each map's void pixels adopt the other map's non-void label and confidence.
inline std::pair<PseudoLabeledImage, PseudoLabeledImage> combine_void(
    const PseudoLabeledImage& a, const PseudoLabeledImage& b) {
  if (a.image_id() != b.image_id())
    fail(ErrorKind::data, "combine_void on different images '" + a.image_id() + "' and '" +
                              b.image_id() + "'");
  if (!a.labels().same_shape(b.labels()))
    fail(ErrorKind::data, "combine_void shape mismatch for '" + a.image_id() + "': " +
                              shape_string(a.labels().width(), a.labels().height()) + " vs " +
                              shape_string(b.labels().width(), b.labels().height()));
  auto fill = [](const PseudoLabeledImage& dst, const PseudoLabeledImage& donor) {
    LabelMap labels = dst.labels();
    ConfidenceMap conf = dst.pixel_confidence();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != kVoidId || donor.labels()[i] == kVoidId) continue;
      labels[i] = donor.labels()[i];
      conf[i] = donor.pixel_confidence()[i];
    }
    return PseudoLabeledImage(dst.image_id(), std::move(labels), std::move(conf),
                              dst.source_cycle(), dst.source_model());
  };
  return {fill(a, b), fill(b, a)};
}

}  // namespace cotrain
