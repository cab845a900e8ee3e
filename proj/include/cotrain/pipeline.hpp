#pragma once

// Orchestration of the self-training stage, the two-model collaboration and
// the co-training loop, including the last training over the full target set.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"
#include "cotrain/labeling.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/mixing.hpp"
#include "cotrain/trainer.hpp"

namespace cotrain {

// ---------------------------------------------------------------------------
// Pseudo-labeling through a trainer

inline PseudoLabelResult run_pseudolabel(Trainer& trainer, const ModelHandle& model,
                                         std::span<const DatasetEntry> images, int k,
                                         const CurriculumParams& T, ModelTag tag,
                                         std::size_t reservoir_cap = 0, std::uint64_t seed = 0) {
  const auto stacks = trainer.predict(model, images);
  if (stacks.size() != images.size())
    fail(ErrorKind::trainer, "session '" + trainer.session_id() + "' returned " +
                                 std::to_string(stacks.size()) + " stacks for " +
                                 std::to_string(images.size()) + " images");
  std::vector<std::string> ids;
  ids.reserve(images.size());
  for (const auto& e : images) ids.push_back(e.image_id);
  return pseudo_label_stacks(stacks, ids, k, T, tag, reservoir_cap, seed);
}

// ---------------------------------------------------------------------------
// Collaboration of models

// Class ids by descending value; ascending id on ties.
inline std::vector<int> sort_rank(std::span<const double> v) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
  return order;
}

struct ClassImageEntry {
  std::size_t index;  // position in the indexed set
  std::string image_id;
  float image_confidence;
};

// per_class[k]: images whose pseudo-labels contain class k, most confident
// first (ascending id on ties).
struct ClassImageIndex {
  std::vector<std::vector<ClassImageEntry>> per_class;
};

inline ClassImageIndex class_image_stats(const PseudoLabelSet& set, int num_classes) {
  ClassImageIndex out;
  out.per_class.resize(num_classes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::vector<bool> present(num_classes, false);
    for (ClassId v : set[i].labels().values())
      if (v != kVoidId && v < num_classes) present[v] = true;
    for (int c = 0; c < num_classes; ++c)
      if (present[c])
        out.per_class[c].push_back({i, set[i].image_id(), set[i].image_confidence()});
  }
  for (auto& list : out.per_class)
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.image_confidence != b.image_confidence)
        return a.image_confidence > b.image_confidence;
      return a.image_id < b.image_id;
    });
  return out;
}

// lambda * max + (1 - lambda) * min over the list's image confidences.
inline double dynamic_threshold(std::span<const ClassImageEntry> list, double lambda) {
  if (list.empty()) return 0.0;
  double lo = list.front().image_confidence, hi = lo;
  for (const auto& e : list) {
    lo = std::min<double>(lo, e.image_confidence);
    hi = std::max<double>(hi, e.image_confidence);
  }
  return lambda * hi + (1.0 - lambda) * lo;
}

// cross: images selected from set i move to the new set j.
// listing: each new set draws from its own input.
enum class CollabSource { cross, listing };

inline const char* to_string(CollabSource s) {
  return s == CollabSource::cross ? "cross" : "listing";
}

inline CollabSource collab_source_from_string(const std::string& s) {
  if (s == "cross") return CollabSource::cross;
  if (s == "listing") return CollabSource::listing;
  fail(ErrorKind::config, "collab_source must be 'cross' or 'listing', got '" + s + "'");
}

inline std::pair<PseudoLabelSet, PseudoLabelSet> collaboration_exchange(
    const PseudoLabelSet& set1, const ThresholdVector& vct1, const PseudoLabelSet& set2,
    const ThresholdVector& vct2, std::size_t n, double lambda,
    CollabSource source = CollabSource::cross) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorKind::config, "lambda must lie in [0,1]");
  if (vct1.num_classes() != vct2.num_classes())
    fail(ErrorKind::data, "threshold vectors differ in class count");
  const int num_classes = vct1.num_classes();

  std::vector<double> two_minus_one(num_classes), one_minus_two(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    two_minus_one[c] = static_cast<double>(vct2.per_class[c]) - vct1.per_class[c];
    one_minus_two[c] = static_cast<double>(vct1.per_class[c]) - vct2.per_class[c];
  }
  const auto delta1 = sort_rank(two_minus_one);  // classes where model 2 leads
  const auto delta2 = sort_rank(one_minus_two);  // classes where model 1 leads
  const auto stats1 = class_image_stats(set1, num_classes);
  const auto stats2 = class_image_stats(set2, num_classes);

  struct Direction {
    const PseudoLabelSet* from;
    const ClassImageIndex* stats;
    const std::vector<int>* order;
    PseudoLabelSet out;
    std::set<std::string> ids;
  };
  Direction to1, to2;
  if (source == CollabSource::cross) {
    to1 = {&set2, &stats2, &delta1, {}, {}};
    to2 = {&set1, &stats1, &delta2, {}, {}};
  } else {
    to1 = {&set1, &stats1, &delta2, {}, {}};
    to2 = {&set2, &stats2, &delta1, {}, {}};
  }

  auto visit = [&](Direction& d, int k) {
    const auto& list = d.stats->per_class[(*d.order)[k]];
    if (list.empty()) return;
    const double t = dynamic_threshold(list, lambda);
    for (const auto& e : list) {
      if (d.out.size() >= n) return;
      if (!(e.image_confidence > t)) continue;
      if (d.ids.insert(e.image_id).second) d.out.push_back((*d.from)[e.index]);
    }
  };
  for (int k = 0; k < num_classes; ++k) {
    if (to1.out.size() >= n && to2.out.size() >= n) break;
    visit(to1, k);
    visit(to2, k);
  }
  if (to1.out.size() < n || to2.out.size() < n)
    spdlog::info("collaboration produced {} and {} images, fewer than n = {}", to1.out.size(),
                 to2.out.size(), n);
  return {std::move(to1.out), std::move(to2.out)};
}

inline ConfidenceStack ensemble_confidence(const ConfidenceStack& a, const ConfidenceStack& b) {
  if (!a.same_shape(b))
    fail(ErrorKind::data, "ensemble of stacks " + std::to_string(a.num_classes()) + "x" +
                              shape_string(a.width(), a.height()) + " and " +
                              std::to_string(b.num_classes()) + "x" +
                              shape_string(b.width(), b.height()));
  ConfidenceStack out(a.width(), a.height(), a.num_classes());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 0.5f * (av[i] + bv[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline LabelMap argmax_labels(const ConfidenceStack& stack) {
  LabelMap out(stack.width(), stack.height());
  for (std::size_t i = 0; i < stack.pixels(); ++i)
    out[i] = static_cast<ClassId>(stack.argmax(i).first);
  return out;
}

struct Evaluation {
  ConfusionMatrix confusion;
  std::vector<ClassIoU> ious;
  double miou = 0.0;
};

inline Evaluation evaluate_model(Trainer& trainer, const ModelHandle& model,
                                 const DatasetSplit& eval, ImageCache& cache) {
  if (eval.kind != SplitKind::labeled)
    fail(ErrorKind::data, "evaluation split '" + eval.name + "' has no labels");
  Evaluation out{ConfusionMatrix(eval.label_space.num_classes()), {}, 0.0};
  const auto stacks = trainer.predict(model, eval.entries);
  for (std::size_t i = 0; i < stacks.size(); ++i)
    out.confusion.accumulate(argmax_labels(stacks[i]), *cache.labels(*eval.entries[i].label_path));
  out.ious = iou_per_class(out.confusion);
  out.miou = miou(out.ious, eval.label_space.eval_subset());
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, int k) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : purpose) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(k)};
  std::mt19937_64 rng(seq);
  return rng();
}

// Seeded draw of `count` distinct indices, returned in ascending order.
inline std::vector<std::size_t> draw_subset(std::size_t size, std::size_t count,
                                            std::uint64_t seed) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct PipelineInputs {
  DatasetSplit source;                 // labeled
  DatasetSplit target;                 // unlabeled
  std::optional<DatasetSplit> eval;    // labeled target, metrics only
  std::vector<double> source_weights;  // class-balance weights; empty = uniform
};

struct PipelineOptions {
  TrainerConfig trainer;
  SelfTrainParams st;
  CoTrainParams ct;
  CollabSource collab = CollabSource::cross;
  std::uint64_t seed = 0;
  fs::path run_dir;
  bool resume = false;
  int jobs = 1;
  std::size_t reservoir_cap = 0;
  // Stops (by throwing Interrupted) right after the given co-training cycle
  // has been persisted.
  std::optional<int> interrupt_after_cotrain_cycle;
  // When set, every collaged sample is also written there as an image and
  // label PNG pair.
  std::optional<fs::path> dump_collages;
};

struct Interrupted : std::runtime_error {
  explicit Interrupted(const std::string& what) : std::runtime_error(what) {}
};

using TrainerFactory = std::function<std::unique_ptr<Trainer>(const std::string& session_id)>;

struct SelfTrainResult {
  ModelHandle W_Km;
  ModelHandle W_KM;
};

struct CoTrainResult {
  ModelHandle W_01, W_02;  // from the self-training stage
  ModelHandle W_1, W_2;    // after the co-training loop
  ModelHandle final_model;
};

namespace detail {

// Runs both callables, concurrently when jobs > 1.
template <typename F1, typename F2>
auto run_pair(int jobs, F1&& f1, F2&& f2) {
  if (jobs > 1) {
    auto fut = std::async(std::launch::async, std::forward<F2>(f2));
    auto r1 = f1();
    return std::make_pair(std::move(r1), fut.get());
  }
  auto r1 = f1();
  auto r2 = f2();
  return std::make_pair(std::move(r1), std::move(r2));
}

}  // namespace detail

class Pipeline {
 public:
  Pipeline(PipelineInputs inputs, PipelineOptions options, TrainerFactory factory,
           std::shared_ptr<ImageCache> cache = std::make_shared<ImageCache>())
      : in_(std::move(inputs)), opt_(std::move(options)), factory_(std::move(factory)),
        cache_(std::move(cache)) {
    in_.source.validate();
    if (in_.source.kind != SplitKind::labeled)
      fail(ErrorKind::data, "source split '" + in_.source.name + "' must be labeled");
    if (in_.source.entries.empty()) fail(ErrorKind::data, "source split is empty");
    if (in_.target.entries.empty()) fail(ErrorKind::data, "target split is empty");
    if (!in_.source_weights.empty() && in_.source_weights.size() != in_.source.size())
      fail(ErrorKind::data, "class-balance weights do not cover the source split");
    opt_.trainer.validate();
    opt_.st.validate();
    opt_.ct.validate();
    num_classes_ = in_.source.label_space.num_classes();
    for (const auto& e : in_.source.entries)
      source_.push_back({e.image_id, cache_->rgb(e.image_path), cache_->labels(*e.label_path)});
    for (std::size_t i = 0; i < in_.target.entries.size(); ++i)
      target_index_[in_.target.entries[i].image_id] = i;
  }

  const std::vector<std::string>& trace() const { return trace_; }
  const fs::path& run_dir() const { return opt_.run_dir; }

  // W_0: source-only model.
  ModelHandle baseline() {
    const fs::path record_path = opt_.run_dir / "baseline" / "record.json";
    if (opt_.resume && fs::exists(record_path))
      return model_handle_from_json(read_json(record_path).at("model"));
    Trainer& t = session("self");
    const auto schedule = compose_schedule(source_, {}, opt_.trainer.N_MB, MixParams{0.0, 0.0},
                                           ThresholdVector{}, false, in_.source_weights,
                                           derive_seed(opt_.seed, "baseline", 0));
    mark("baseline:train");
    ModelHandle w0 = t.baseline_train(with_seed("baseline", 0), schedule, "baseline");
    json record{{"model", to_json(w0)}, {"batches", schedule.size()}};
    if (auto m = metrics(t, w0)) record["metrics"] = *m;
    write_json(record_path, record);
    return w0;
  }

  SelfTrainResult self_training_stage() {
    const auto& st = opt_.st;
    if (static_cast<std::size_t>(st.N) > in_.target.size())
      fail(ErrorKind::config, "N = " + std::to_string(st.N) + " exceeds the " +
                                  std::to_string(in_.target.size()) + " unlabeled images");
    const ModelHandle w0 = baseline();
    Trainer& t = session("self");

    PseudoLabelSet fused;
    ModelHandle current = w0;
    std::optional<ModelHandle> w_km, w_kM;
    int start = 0;
    if (opt_.resume) {
      for (int k = st.K_M; k >= 0; --k) {
        const fs::path dir = selftrain_dir(k);
        if (!fs::exists(dir / "record.json")) continue;
        const json rec = read_json(dir / "record.json");
        current = model_handle_from_json(rec.at("branches").at("self").at("model"));
        fused = load_pseudo_label_set(dir / "fused").set;
        if (k >= st.K_m)
          w_km = model_handle_from_json(
              read_json(selftrain_dir(st.K_m) / "record.json").at("branches").at("self").at("model"));
        if (k == st.K_M) w_kM = current;
        start = k + 1;
        break;
      }
    }

    for (int k = start; k <= st.K_M; ++k) {
      const auto draw = draw_subset(in_.target.size(), st.N, derive_seed(opt_.seed, "selftrain-draw", k));
      const auto images = entries(draw);
      mark("selftrain:" + std::to_string(k) + ":run");
      auto run = run_pseudolabel(t, current, images, k, st.T, ModelTag::self, opt_.reservoir_cap,
                                 derive_seed(opt_.seed, "selftrain-reservoir", k));
      auto selected = select_top_n(run.set, static_cast<std::size_t>(st.n));
      mark("selftrain:" + std::to_string(k) + ":fuse");
      fused = fuse(fused, selected);
      mark("selftrain:" + std::to_string(k) + ":train");
      current = train_on(t, w0, fused, run.thresholds, true, "selftrain", k,
                         "selftrain_k" + pad(k));

      json branch{{"thresholds", to_json(run.thresholds)},
                  {"candidate_ids", ids_of(run.set)},
                  {"selected_ids", ids_of(selected)},
                  {"fused_size", fused.size()},
                  {"model", to_json(current)}};
      if (auto m = metrics(t, current)) branch["metrics"] = *m;
      const fs::path dir = selftrain_dir(k);
      save_pseudo_label_set(dir / "fused", fused, run.thresholds);
      write_json(dir / "record.json",
                 json{{"stage", "selftrain"},
                      {"cycle", k},
                      {"curriculum_fraction", run.thresholds.curriculum_fraction},
                      {"branches", {{"self", branch}}}});
      if (k == st.K_m) w_km = current;
      if (k == st.K_M) w_kM = current;
    }
    return {*w_km, *w_kM};
  }

  CoTrainResult co_training() {
    const auto st_result = self_training_stage();
    const auto& st = opt_.st;
    const auto& ct = opt_.ct;
    CurriculumParams T = st.T;
    T.p_m = ct.p_m;
    T.p_M = ct.p_M;

    CoTrainResult result;
    result.W_01 = st_result.W_Km;
    result.W_02 = st_result.W_KM;
    ModelHandle w1 = result.W_01, w2 = result.W_02;
    PseudoLabelSet fused1, fused2;
    int start = 0;
    if (opt_.resume) {
      for (int k = ct.K; k >= 0; --k) {
        const fs::path dir = cotrain_dir(k);
        if (!fs::exists(dir / "record.json")) continue;
        const json rec = read_json(dir / "record.json");
        w1 = model_handle_from_json(rec.at("branches").at("branch1").at("model"));
        w2 = model_handle_from_json(rec.at("branches").at("branch2").at("model"));
        fused1 = load_pseudo_label_set(dir / "branch1" / "fused").set;
        fused2 = load_pseudo_label_set(dir / "branch2" / "fused").set;
        start = k + 1;
        break;
      }
    }

    Trainer& t1 = session("branch1");
    Trainer& t2 = session("branch2");
    for (int k = start; k <= ct.K; ++k) {
      const std::string ks = std::to_string(k);
      const auto draw = draw_subset(in_.target.size(), st.N, derive_seed(opt_.seed, "cotrain-draw", k));
      const auto images = entries(draw);

      auto [run1, run2] = detail::run_pair(opt_.jobs, 
          [&] {
            mark("cotrain:" + ks + ":run:branch1");
            return run_pseudolabel(t1, w1, images, k, T, ModelTag::branch1, opt_.reservoir_cap,
                                   derive_seed(opt_.seed, "cotrain-reservoir-1", k));
          },
          [&] {
            mark("cotrain:" + ks + ":run:branch2");
            return run_pseudolabel(t2, w2, images, k, T, ModelTag::branch2, opt_.reservoir_cap,
                                   derive_seed(opt_.seed, "cotrain-reservoir-2", k));
          });

      mark("cotrain:" + ks + ":combine");
      PseudoLabelSet comb1, comb2;
      for (std::size_t i = 0; i < run1.set.size(); ++i) {
        auto [a, b] = combine_void(run1.set[i], run2.set[i]);
        comb1.push_back(std::move(a));
        comb2.push_back(std::move(b));
      }

      mark("cotrain:" + ks + ":collaboration");
      auto [new1, new2] = collaboration_exchange(comb1, run1.thresholds, comb2, run2.thresholds,
                                                 static_cast<std::size_t>(st.n), ct.lambda,
                                                 opt_.collab);
      mark("cotrain:" + ks + ":fuse");
      fused1 = fuse(fused1, new1);
      fused2 = fuse(fused2, new2);

      auto [m1, m2] = detail::run_pair(opt_.jobs, 
          [&] {
            mark("cotrain:" + ks + ":train:branch1");
            return train_on(t1, result.W_01, fused1, run1.thresholds, true, "cotrain-1", k,
                            "cotrain_k" + pad(k) + "_branch1");
          },
          [&] {
            mark("cotrain:" + ks + ":train:branch2");
            return train_on(t2, result.W_02, fused2, run2.thresholds, true, "cotrain-2", k,
                            "cotrain_k" + pad(k) + "_branch2");
          });
      w1 = m1;
      w2 = m2;

      auto [metrics1, metrics2] = detail::run_pair(opt_.jobs, [&] { return metrics(t1, w1); },
                                       [&] { return metrics(t2, w2); });
      const fs::path dir = cotrain_dir(k);
      auto branch_record = [&](const PseudoLabelResult& run, const PseudoLabelSet& exchanged,
                               const PseudoLabelSet& fused, const ModelHandle& model,
                               const std::optional<json>& m) {
        json b{{"thresholds", to_json(run.thresholds)},
               {"candidate_ids", ids_of(run.set)},
               {"exchanged_ids", ids_of(exchanged)},
               {"fused_size", fused.size()},
               {"model", to_json(model)}};
        if (m) b["metrics"] = *m;
        return b;
      };
      save_pseudo_label_set(dir / "branch1" / "exchanged", new1, run1.thresholds);
      save_pseudo_label_set(dir / "branch1" / "fused", fused1, run1.thresholds);
      save_pseudo_label_set(dir / "branch2" / "exchanged", new2, run2.thresholds);
      save_pseudo_label_set(dir / "branch2" / "fused", fused2, run2.thresholds);
      write_json(dir / "record.json",
                 json{{"stage", "cotrain"},
                      {"cycle", k},
                      {"curriculum_fraction", run1.thresholds.curriculum_fraction},
                      {"branches",
                       {{"branch1", branch_record(run1, new1, fused1, w1, metrics1)},
                        {"branch2", branch_record(run2, new2, fused2, w2, metrics2)}}}});
      if (opt_.interrupt_after_cotrain_cycle && *opt_.interrupt_after_cotrain_cycle == k)
        throw Interrupted("interrupted after co-training cycle " + ks);
    }
    result.W_1 = w1;
    result.W_2 = w2;
    result.final_model = final_training(ct.w, w1, w2);
    return result;
  }

  // Pseudo-labels all of D^U with the selected predictor at curriculum
  // cycle K, then trains from the initial weights without collage.
  ModelHandle final_training(FinalModel w, const ModelHandle& w1, const ModelHandle& w2) {
    const fs::path dir = opt_.run_dir / "final";
    if (opt_.resume && fs::exists(dir / "record.json"))
      return model_handle_from_json(read_json(dir / "record.json").at("model"));
    CurriculumParams T = opt_.st.T;
    T.p_m = opt_.ct.p_m;
    T.p_M = opt_.ct.p_M;
    const int k = opt_.ct.K;

    mark("final:run");
    std::vector<ConfidenceStack> stacks;
    ModelTag tag = ModelTag::ensemble;
    switch (w) {
      case FinalModel::branch1:
        stacks = session("branch1").predict(w1, in_.target.entries);
        tag = ModelTag::branch1;
        break;
      case FinalModel::branch2:
        stacks = session("branch2").predict(w2, in_.target.entries);
        tag = ModelTag::branch2;
        break;
      case FinalModel::ensemble: {
        auto [s1, s2] = detail::run_pair(opt_.jobs, [&] { return session("branch1").predict(w1, in_.target.entries); },
                             [&] { return session("branch2").predict(w2, in_.target.entries); });
        for (std::size_t i = 0; i < s1.size(); ++i) stacks.push_back(ensemble_confidence(s1[i], s2[i]));
        break;
      }
    }
    std::vector<std::string> ids;
    for (const auto& e : in_.target.entries) ids.push_back(e.image_id);
    auto run = pseudo_label_stacks(stacks, ids, k, T, tag, opt_.reservoir_cap,
                                   derive_seed(opt_.seed, "final-reservoir", k));
    save_pseudo_label_set(dir / "pseudo", run.set, run.thresholds);

    Trainer& t = session("final");
    auto targets = target_samples(run.set);
    auto schedule = compose_schedule(source_, targets, opt_.trainer.N_MB, opt_.st.M_df,
                                     run.thresholds, false, in_.source_weights,
                                     derive_seed(opt_.seed, "final-batches", k));
    mark("final:train");
    last_schedule_collage_ = std::any_of(schedule.begin(), schedule.end(),
                                         [](const Batch& b) { return b.collage; });
    ModelHandle model = t.baseline_train(with_seed("final", k), schedule, "final");
    json record{{"selector", static_cast<int>(w)},
                {"thresholds", to_json(run.thresholds)},
                {"pseudo_labeled", run.set.size()},
                {"model", to_json(model)}};
    if (auto m = metrics(t, model)) record["metrics"] = *m;
    write_json(dir / "record.json", record);
    return model;
  }

  // True if any batch of the last final-training schedule had collage on.
  bool last_final_schedule_used_collage() const { return last_schedule_collage_; }

  Trainer& session(const std::string& id) {
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) it = sessions_.emplace(id, factory_(id)).first;
    return *it->second;
  }

  std::optional<Evaluation> evaluate(const ModelHandle& model, const std::string& session_id = "eval") {
    if (!in_.eval) return std::nullopt;
    return evaluate_model(session(session_id), model, *in_.eval, *cache_);
  }

 private:
  static std::string pad(int k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", k);
    return buf;
  }

  fs::path selftrain_dir(int k) const {
    return opt_.run_dir / "selftrain" / ("cycle_" + std::to_string(k));
  }
  fs::path cotrain_dir(int k) const { return opt_.run_dir / ("cycle_" + std::to_string(k)); }

  void mark(std::string event) {
    std::lock_guard lock(trace_mutex_);
    trace_.push_back(std::move(event));
  }

  TrainerConfig with_seed(std::string_view purpose, int k) const {
    TrainerConfig c = opt_.trainer;
    c.seed = derive_seed(opt_.trainer.seed ^ opt_.seed, purpose, k);
    return c;
  }

  std::vector<DatasetEntry> entries(const std::vector<std::size_t>& idx) const {
    std::vector<DatasetEntry> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(in_.target.entries[i]);
    return out;
  }

  static json ids_of(const PseudoLabelSet& set) {
    json out = json::array();
    for (const auto& p : set) out.push_back(p.image_id());
    return out;
  }

  std::vector<TargetSample> target_samples(const PseudoLabelSet& set) {
    std::vector<TargetSample> out;
    out.reserve(set.size());
    for (const auto& p : set) {
      auto it = target_index_.find(p.image_id());
      if (it == target_index_.end())
        fail(ErrorKind::data, "pseudo-label '" + p.image_id() + "' is not in the target split");
      out.push_back({std::make_shared<const PseudoLabeledImage>(p),
                     cache_->rgb(in_.target.entries[it->second].image_path)});
    }
    return out;
  }

  ModelHandle train_on(Trainer& t, const ModelHandle& base, const PseudoLabelSet& pseudo,
                       const ThresholdVector& vct, bool collage, std::string_view purpose, int k,
                       const std::string& tag) {
    const auto targets = target_samples(pseudo);
    const auto schedule = compose_schedule(source_, targets, opt_.trainer.N_MB, opt_.st.M_df, vct,
                                           collage, in_.source_weights,
                                           derive_seed(opt_.seed, std::string(purpose) + "-batches", k));
    if (opt_.dump_collages) dump_collages(schedule, tag);
    return t.finetune(base, with_seed(purpose, k), schedule, tag);
  }

  void dump_collages(std::span<const Batch> schedule, const std::string& tag) const {
    const fs::path dir = *opt_.dump_collages / tag;
    fs::create_directories(dir);
    for (std::size_t b = 0; b < schedule.size(); ++b)
      for (std::size_t s = 0; s < schedule[b].samples.size(); ++s) {
        const auto& sample = schedule[b].samples[s];
        if (sample.origin != SampleOrigin::collaged_target) continue;
        const std::string stem = "b" + pad(static_cast<int>(b)) + "_s" + pad(static_cast<int>(s));
        write_png_rgb(dir / (stem + ".png"), sample.image);
        write_label_png(dir / (stem + ".labels.png"), sample.labels);
      }
  }

  std::optional<json> metrics(Trainer& t, const ModelHandle& model) {
    if (!in_.eval) return std::nullopt;
    const auto ev = evaluate_model(t, model, *in_.eval, *cache_);
    json per_class = json::array();
    for (const auto& c : ev.ious) per_class.push_back(c.present ? json(c.iou) : json(nullptr));
    return json{{"miou", ev.miou}, {"iou", per_class}};
  }

  PipelineInputs in_;
  PipelineOptions opt_;
  TrainerFactory factory_;
  std::shared_ptr<ImageCache> cache_;
  int num_classes_ = 0;
  std::vector<LabeledSample> source_;
  std::map<std::string, std::size_t> target_index_;
  std::mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<Trainer>> sessions_;
  std::mutex trace_mutex_;
  std::vector<std::string> trace_;
  bool last_schedule_collage_ = false;
};

}  // namespace cotrain
