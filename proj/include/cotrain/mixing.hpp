#pragma once

// Training batch composition: source/target mixing at mini-batch level and
// the class-confidence ordered source-onto-target collage.

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "cotrain/core.hpp"

namespace cotrain {

enum class SampleOrigin { source, target, collaged_target };

inline const char* to_string(SampleOrigin o) {
  switch (o) {
    case SampleOrigin::source: return "source";
    case SampleOrigin::target: return "target";
    case SampleOrigin::collaged_target: return "collaged-target";
  }
  return "?";
}

// Per-pixel weights are 1 for ground truth, the pseudo-label confidence for
// pseudo-labeled pixels and 0 at void.
struct TrainingSample {
  Image image;
  LabelMap labels;
  ConfidenceMap weights;
  SampleOrigin origin = SampleOrigin::source;
  std::vector<std::string> provenance;
};

struct LabeledSample {
  std::string id;
  std::shared_ptr<const Image> image;
  std::shared_ptr<const LabelMap> labels;
};

struct TargetSample {
  std::shared_ptr<const PseudoLabeledImage> pseudo;
  std::shared_ptr<const Image> image;
};

struct Batch {
  std::vector<TrainingSample> samples;
  bool collage = false;
  int target_count = 0;
  int source_count = 0;
};

// round-half-up(p_MB * N_MB)
inline int target_per_batch(int n_mb, double p_mb) {
  return static_cast<int>(std::floor(p_mb * n_mb + 0.5 + 1e-9));
}

inline TrainingSample to_training_sample(const LabeledSample& s) {
  ConfidenceMap w(s.labels->width(), s.labels->height(), 0.0f);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (*s.labels)[i] == kVoidId ? 0.0f : 1.0f;
  return {*s.image, *s.labels, std::move(w), SampleOrigin::source, {s.id}};
}

inline TrainingSample to_training_sample(const TargetSample& t) {
  return {*t.image, t.pseudo->labels(), t.pseudo->pixel_confidence(), SampleOrigin::target,
          {t.pseudo->image_id()}};
}

// Classes present in the donor sorted ascending by threshold (lower class id
// first on ties); the first ceil(p_CM * count) are pasted with label and
// appearance. Pasted pixels carry weight 1.
inline TrainingSample classmix_collage(const LabeledSample& donor, const TargetSample& target,
                                       const ThresholdVector& vct, double p_cm) {
  const LabelMap& dl = *donor.labels;
  const PseudoLabeledImage& tp = *target.pseudo;
  if (!dl.same_shape(tp.labels()) || !donor.image->same_shape(*target.image) ||
      !dl.same_shape(*donor.image))
    fail(ErrorKind::data, "collage of '" + donor.id + "' onto '" + tp.image_id() +
                              "': donor " + shape_string(dl.width(), dl.height()) +
                              " vs target " +
                              shape_string(tp.labels().width(), tp.labels().height()));

  std::vector<bool> present(vct.num_classes(), false);
  for (ClassId v : dl.values()) {
    if (v == kVoidId) continue;
    if (v >= vct.num_classes()) fail(ErrorKind::data, "donor label outside threshold vector");
    present[v] = true;
  }
  std::vector<int> classes;
  for (int c = 0; c < vct.num_classes(); ++c)
    if (present[c]) classes.push_back(c);
  std::stable_sort(classes.begin(), classes.end(),
                   [&](int a, int b) { return vct.per_class[a] < vct.per_class[b]; });
  const auto take = static_cast<std::size_t>(
      std::ceil(p_cm * static_cast<double>(classes.size()) - 1e-9));
  std::vector<bool> selected(vct.num_classes(), false);
  for (std::size_t i = 0; i < std::min(take, classes.size()); ++i) selected[classes[i]] = true;

  TrainingSample out{*target.image, tp.labels(), tp.pixel_confidence(),
                     SampleOrigin::collaged_target, {tp.image_id(), donor.id}};
  for (std::size_t i = 0; i < dl.size(); ++i) {
    const ClassId v = dl[i];
    if (v == kVoidId || !selected[v]) continue;
    out.image[i] = (*donor.image)[i];
    out.labels[i] = v;
    out.weights[i] = 1.0f;
  }
  return out;
}

namespace detail {

inline std::size_t draw_index(std::mt19937_64& rng, std::size_t size,
                              std::span<const double> weights) {
  if (!weights.empty()) {
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    return dist(rng);
  }
  std::uniform_int_distribution<std::size_t> dist(0, size - 1);
  return dist(rng);
}

}  // namespace detail

// round(p_MB * N_MB) pseudo-labeled samples (collaged when `collage`) plus
// source samples for the rest. `source_weights` (empty = uniform) applies to
// source and donor draws.
inline Batch compose_minibatch(std::span<const LabeledSample> source,
                               std::span<const TargetSample> pseudo, int n_mb,
                               const MixParams& mix, const ThresholdVector& vct, bool collage,
                               std::span<const double> source_weights, std::mt19937_64& rng) {
  if (n_mb < 1) fail(ErrorKind::config, "N_MB must be >= 1");
  if (source.empty()) fail(ErrorKind::data, "mini-batch composition needs source samples");
  if (!source_weights.empty() && source_weights.size() != source.size())
    fail(ErrorKind::data, "source weight count does not match source samples");
  int n_target = target_per_batch(n_mb, mix.p_MB);
  if (n_target > 0 && pseudo.empty()) {
    spdlog::warn("no pseudo-labeled images available; batch falls back to source only");
    n_target = 0;
  }
  Batch batch;
  batch.collage = collage;
  batch.target_count = n_target;
  batch.source_count = n_mb - n_target;
  for (int i = 0; i < n_target; ++i) {
    const TargetSample& t = pseudo[detail::draw_index(rng, pseudo.size(), {})];
    if (collage) {
      const LabeledSample& donor = source[detail::draw_index(rng, source.size(), source_weights)];
      batch.samples.push_back(classmix_collage(donor, t, vct, mix.p_CM));
    } else {
      batch.samples.push_back(to_training_sample(t));
    }
  }
  for (int i = 0; i < batch.source_count; ++i)
    batch.samples.push_back(
        to_training_sample(source[detail::draw_index(rng, source.size(), source_weights)]));
  return batch;
}

// One pass: enough batches to draw |pseudo| target samples, or |source|
// samples when the batch carries no target part.
inline std::size_t epoch_batches(std::size_t source_size, std::size_t pseudo_size, int n_mb,
                                 const MixParams& mix) {
  const int n_target = pseudo_size == 0 ? 0 : target_per_batch(n_mb, mix.p_MB);
  if (n_target > 0) return (pseudo_size + n_target - 1) / n_target;
  return (source_size + n_mb - 1) / static_cast<std::size_t>(n_mb);
}

// Each batch index draws from its own seeded stream.
inline std::vector<Batch> compose_schedule(std::span<const LabeledSample> source,
                                           std::span<const TargetSample> pseudo, int n_mb,
                                           const MixParams& mix, const ThresholdVector& vct,
                                           bool collage, std::span<const double> source_weights,
                                           std::uint64_t seed) {
  MixParams effective = mix;
  if (pseudo.empty() && target_per_batch(n_mb, mix.p_MB) > 0) {
    spdlog::warn("no pseudo-labeled images available; schedule falls back to source only");
    effective.p_MB = 0.0;
  }
  const std::size_t count = epoch_batches(source.size(), pseudo.size(), n_mb, effective);
  std::vector<Batch> schedule;
  schedule.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(b)};
    std::mt19937_64 rng(seq);
    schedule.push_back(
        compose_minibatch(source, pseudo, n_mb, effective, vct, collage, source_weights, rng));
  }
  return schedule;
}

}  // namespace cotrain
