// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "cotrain/cotrain.hpp"
#include "../oracles.hpp"

using namespace cotrain;
using namespace cotrain::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects the first few violations of a criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) messages_ << (failures_ > 1 ? "; " : "") << what;
  }
  Outcome done(const std::string& summary) const {
    if (failures_ == 0) return {true, summary};
    return {false, std::to_string(failures_) + " violation(s): " + messages_.str()};
  }

 private:
  int failures_ = 0;
  std::ostringstream messages_;
};

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

class Workspace {
 public:
  Workspace() {
    root_ = fs::temp_directory_path() / ("cotrain_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Workspace() {
    std::error_code ec;
    fs::remove_all(root_, ec);
  }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

LabelMap random_labels(std::mt19937_64& rng, int w, int h, int classes, double void_rate) {
  LabelMap m(w, h);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> c(0, classes - 1);
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = u(rng) < void_rate ? kVoidId : static_cast<ClassId>(c(rng));
  return m;
}

PseudoLabeledImage random_pseudo(std::mt19937_64& rng, const std::string& id, int w, int h,
                                 int classes, double void_rate) {
  LabelMap labels = random_labels(rng, w, h, classes, void_rate);
  ConfidenceMap conf(w, h, 0.0f);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (labels[i] != kVoidId) conf[i] = static_cast<float>(u(rng));
  return PseudoLabeledImage(id, std::move(labels), std::move(conf), 0, ModelTag::self);
}

PseudoLabeledImage pseudo_from(const std::string& id, std::vector<ClassId> labels,
                               std::vector<float> conf) {
  const int w = static_cast<int>(labels.size());
  return PseudoLabeledImage(id, LabelMap(w, 1, std::move(labels)),
                            ConfidenceMap(w, 1, std::move(conf)), 0, ModelTag::self);
}

Pipeline make_pipeline(const ToyWorld& world, const fs::path& run, PipelineOptions o,
                       std::shared_ptr<ImageCache> cache, const DatasetSplit& source) {
  return Pipeline(PipelineInputs{source, world.target, world.eval, {}}, std::move(o),
                  toy_factory(run, cache), cache);
}

PipelineOptions criterion_options(const fs::path& run) { return toy_options(run, 60, 20, 1, 5, 3, 0); }

// ---------------------------------------------------------------------------

Outcome toy_ordering(const Workspace& ws) {
  const auto start = std::chrono::steady_clock::now();
  ToyWorld world(ws.root() / "world", 200, 200, 50, 64, true, 0);
  auto cache = std::make_shared<ImageCache>();
  auto raw = make_pipeline(world, ws.root() / "c1_raw", criterion_options(ws.root() / "c1_raw"),
                           cache, world.raw_source);
  const double m_raw = raw.evaluate(raw.baseline())->miou * 100.0;
  auto p = make_pipeline(world, ws.root() / "c1", criterion_options(ws.root() / "c1"), cache,
                         world.source);
  const auto r = p.co_training();
  const double m_lab =
      p.evaluate(model_handle_from_json(read_json(ws.root() / "c1" / "baseline" / "record.json")["model"]))
          ->miou * 100.0;
  const double m_st = p.evaluate(r.W_02)->miou * 100.0;
  const double m_ct = p.evaluate(r.final_model)->miou * 100.0;
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Check c;
  c.expect(m_ct >= m_st, "co-training below self-training");
  c.expect(m_st >= m_lab, "self-training below LAB baseline");
  c.expect(m_lab >= m_raw, "LAB baseline below raw baseline");
  c.expect(m_ct - m_raw >= 5.0, "co-training gain over raw baseline below 5 points");
  c.expect(secs < 600.0, "wall clock " + fmt2(secs) + " s");
  return c.done("raw " + fmt2(m_raw) + " <= LAB " + fmt2(m_lab) + " <= self-t " + fmt2(m_st) +
                " <= co-t " + fmt2(m_ct) + " mIoU, " + fmt2(secs) + " s");
}

Outcome metric_oracle(const Workspace&) {
  std::mt19937_64 rng(2);
  Check c;
  for (int t = 0; t < 100; ++t) {
    const int C = std::uniform_int_distribution<int>(1, 19)(rng);
    const auto gt = random_labels(rng, 32, 32, C, 0.1);
    const auto pred = random_labels(rng, 32, 32, C, 0.05);
    ConfusionMatrix cm(C);
    cm.accumulate(pred, gt);
    const auto ious = iou_per_class(cm);
    const auto oracle = oracle_counts(pred, gt, C);
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < C; ++k) {
      std::uint64_t fp = 0, fn = cm.void_predictions(k);
      for (int j = 0; j < C; ++j)
        if (j != k) {
          fp += cm.count(j, k);
          fn += cm.count(k, j);
        }
      const auto tp = oracle.tp_fp_fn[k][0], ofp = oracle.tp_fp_fn[k][1], ofn = oracle.tp_fp_fn[k][2];
      c.expect(cm.count(k, k) == tp && fp == ofp && fn == ofn, "count mismatch");
      if (tp + ofp + ofn == 0) continue;
      const double iou = static_cast<double>(tp) / static_cast<double>(tp + ofp + ofn);
      c.expect(std::abs(ious[k].iou - iou) <= 1e-12, "IoU mismatch");
      sum += iou;
      ++present;
    }
    c.expect(std::abs(miou(ious) - sum / present) <= 1e-12, "mIoU mismatch");
  }
  return c.done("100 random 32x32 pairs, exact counts, IoU within 1e-12");
}

Outcome reference_desk_check(const Workspace&) {
  const std::vector<double> row16{78.14, 36.98, 84.07, 9.34, 0.28, 47.49, 49.2, 19.35,
                                  89.07, 89.62, 77.92, 52.32, 91.50, 60.37, 47.10, 64.76};
  const std::vector<double> row13{78.1, 36.9, 84.0, 49.2, 19.3, 89.0, 89.6,
                                  77.9, 52.3, 91.5, 60.3, 47.1, 64.7};
  std::vector<ClassIoU> a(19), b(19);
  const auto s16 = *cityscapes_subset(16), s13 = *cityscapes_subset(13);
  for (std::size_t i = 0; i < s16.size(); ++i) a[s16[i]] = {row16[i] / 100.0, true};
  for (std::size_t i = 0; i < s13.size(); ++i) b[s13[i]] = {row13[i] / 100.0, true};
  const double m16 = miou(a, s16) * 100.0, m13 = miou(b, s13) * 100.0;
  Check c;
  c.expect(std::abs(m16 - 56.09) <= 0.05, "16-class mIoU " + fmt2(m16));
  c.expect(std::abs(m13 - 64.6) <= 0.1, "13-class mIoU " + fmt2(m13));
  return c.done("16-class " + fmt2(m16) + ", 13-class " + fmt2(m13));
}

Outcome threshold_oracle(const Workspace&) {
  std::mt19937_64 rng(4);
  CurriculumParams T;  // C_m = 0.5, C_M = 0.9
  Check c;
  for (int t = 0; t < 1000; ++t) {
    const int size = std::uniform_int_distribution<int>(1, 10000)(rng);
    const bool ties = t % 2 == 0;
    std::vector<float> v(size);
    for (auto& x : v)
      x = ties ? static_cast<float>(std::uniform_int_distribution<int>(1, 100)(rng) / 100.0)
               : static_cast<float>(std::uniform_real_distribution<double>(0.001, 1.0)(rng));
    const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto s = ClassConfidenceSample::from_values({v});
    const float th = compute_class_thresholds(s, p, T).per_class[0];
    const auto idx = static_cast<std::size_t>(std::min<double>(std::floor(p * size + 1e-9), size - 1));
    // raw threshold: the value with at most idx entries strictly above it and
    // more than idx entries at or above it
    float raw = -1.0f;
    std::set<float> distinct(v.begin(), v.end());
    for (float cand : distinct) {
      std::size_t above = 0, at_or_above = 0;
      for (float x : v) {
        above += x > cand;
        at_or_above += x >= cand;
      }
      if (above <= idx && at_or_above > idx) raw = cand;
    }
    const float expected = std::clamp(raw, 0.5f, 0.9f);
    c.expect(th == expected, "size " + std::to_string(size) + " p " + fmt2(p));
    c.expect(th >= 0.5f && th <= 0.9f, "clamp violated");
  }
  return c.done("1000 random V_c (sizes 1-10000) match the count scan, clamps held");
}

Outcome curriculum(const Workspace&) {
  Check c;
  for (auto [pm, pM] : {std::pair{0.5, 0.6}, {0.3, 0.5}, {0.2, 0.9}}) {
    CurriculumParams T;
    T.p_m = pm;
    T.p_M = pM;
    double prev = -1.0;
    for (int k = 0; k < 50; ++k) {
      const double p = curriculum_fraction(k, T);
      c.expect(p >= prev && p <= pM, "fraction not monotone or above p_M");
      prev = p;
    }
    c.expect(curriculum_fraction(49, T) == pM, "fraction never reaches p_M");
  }
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 3.0);
  CurriculumParams open;
  open.C_m = 0.0;
  open.C_M = 1.0;
  for (int t = 0; t < 100; ++t) {
    const int C = std::uniform_int_distribution<int>(2, 6)(rng);
    ConfidenceStack s(16, 16, C);
    for (std::size_t px = 0; px < s.pixels(); ++px) {
      std::vector<double> e(C);
      double z = 0.0;
      for (int k = 0; k < C; ++k) z += e[k] = std::exp(g(rng));
      for (int k = 0; k < C; ++k) s.at(k, px) = static_cast<float>(e[k] / z);
    }
    ClassConfidenceSample sample(C);
    sample.add(s);
    sample.finalize();
    std::vector<std::size_t> prev(C, 0);
    for (int step = 0; step <= 20; ++step) {
      const auto v = compute_class_thresholds(sample, step / 20.0, open);
      const auto img = apply_thresholds(s, v, "x");
      std::vector<std::size_t> count(C, 0);
      for (ClassId l : img.labels().values())
        if (l != kVoidId) ++count[l];
      for (int k = 0; k < C; ++k) c.expect(count[k] >= prev[k], "accepted pixels shrank");
      prev = count;
    }
  }
  return c.done("p monotone and capped; per-class accepted pixels monotone on 100 stacks");
}

Outcome collaboration(const Workspace&) {
  Check c;
  std::mt19937_64 rng(6);
  auto ri = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int t = 0; t < 500; ++t) {
    const int C = ri(1, 4), images = ri(0, 6);
    PseudoLabelSet s1, s2;
    for (int i = 0; i < images; ++i) {
      const int w = ri(1, 3);
      s1.push_back(random_pseudo(rng, "img" + std::to_string(i), w, 1, C, 0.3));
      s2.push_back(random_pseudo(rng, "img" + std::to_string(i), w, 1, C, 0.3));
    }
    ThresholdVector v1, v2;
    for (int k = 0; k < C; ++k) {
      v1.per_class.push_back(static_cast<float>(ri(5, 9) / 10.0));
      v2.per_class.push_back(static_cast<float>(ri(5, 9) / 10.0));
    }
    const auto n = static_cast<std::size_t>(ri(0, 4));
    const double lambda = std::uniform_real_distribution<double>(0, 1)(rng);
    for (bool cross : {true, false}) {
      const auto [a, b] = collaboration_exchange(s1, v1, s2, v2, n, lambda,
                                                 cross ? CollabSource::cross : CollabSource::listing);
      const auto [oa, ob] = oracle_exchange(s1, v1, s2, v2, n, lambda, cross);
      c.expect(ids_of(a) == oa && ids_of(b) == ob, "differs from re-execution");
      const PseudoLabelSet* from[2] = {cross ? &s2 : &s1, cross ? &s1 : &s2};
      const PseudoLabelSet* out[2] = {&a, &b};
      for (int d = 0; d < 2; ++d) {
        c.expect(out[d]->size() <= n, "size above n");
        std::set<std::string> ids;
        for (const auto& p : *out[d]) {
          ids.insert(p.image_id());
          c.expect(std::find(from[d]->begin(), from[d]->end(), p) != from[d]->end(),
                   "output not drawn from the opposite input");
        }
        c.expect(ids.size() == out[d]->size(), "duplicate image");
      }
    }
  }
  const PseudoLabelSet g1{pseudo_from("A", {0, 1}, {0.9f, 0.9f}), pseudo_from("B", {1}, {0.7f}),
                          pseudo_from("C", {0}, {0.6f})};
  const PseudoLabelSet g2{pseudo_from("A", {0}, {0.8f}), pseudo_from("B", {0, 1}, {0.75f, 0.75f}),
                          pseudo_from("C", {1}, {0.5f})};
  const ThresholdVector gv1{{0.6f, 0.8f}, 0.5, 0}, gv2{{0.7f, 0.5f}, 0.5, 0};
  const auto [n1, n2] = collaboration_exchange(g1, gv1, g2, gv2, 2, 0.5);
  c.expect(ids_of(n1) == std::vector<std::string>{"A", "B"} &&
               ids_of(n2) == std::vector<std::string>{"A"} && n1[0] == g2[0] && n1[1] == g2[1] &&
               n2[0] == g1[0],
           "golden trace mismatch");
  return c.done("500 random instances match re-execution; golden trace exact");
}

Outcome fusion(const Workspace&) {
  Check c;
  std::mt19937_64 rng(7);
  auto ri = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int t = 0; t < 500; ++t) {
    PseudoLabelSet a, b;
    for (int i = ri(0, 8); i > 0; --i)
      a.push_back(random_pseudo(rng, "id" + std::to_string(ri(0, 9)), 3, 2, 3, 0.3));
    for (int i = ri(0, 8); i > 0; --i)
      b.push_back(random_pseudo(rng, "id" + std::to_string(ri(0, 9)), 3, 2, 3, 0.3));
    const auto f = fuse(a, b);
    c.expect(fuse(f, f) == f, "fuse(f, f) != f");
    c.expect(fuse(f, b) == f && fuse(f, a) == f, "fusing an input again changed the result");
    std::set<std::string> ids;
    for (const auto* s : {&a, &b})
      for (const auto& p : *s) ids.insert(p.image_id());
    c.expect(ids.size() == f.size(), "fused ids are not the union");
    for (const auto& p : f) {
      float best = -1.0f;
      for (const auto* s : {&a, &b})
        for (const auto& x : *s)
          if (x.image_id() == p.image_id()) best = std::max(best, x.image_confidence());
      c.expect(p.image_confidence() == best, "collision did not keep the maximum");
    }

    const int w = ri(1, 6), h = ri(1, 6);
    const auto x = random_pseudo(rng, "x", w, h, 4, std::uniform_real_distribution<double>(0, 1)(rng));
    const auto y = random_pseudo(rng, "x", w, h, 4, std::uniform_real_distribution<double>(0, 1)(rng));
    const auto [x2, y2] = combine_void(x, y);
    for (std::size_t i = 0; i < x.labels().size(); ++i) {
      const bool both = x.labels()[i] == kVoidId && y.labels()[i] == kVoidId;
      c.expect((x2.labels()[i] == kVoidId) == both && (y2.labels()[i] == kVoidId) == both,
               "void set is not the intersection");
    }
  }
  return c.done("500 random sets: idempotent, collision keeps max, void set = intersection");
}

Outcome lab(const Workspace& ws) {
  Check c;
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> byte(0, 255);
  int worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const Rgb px{static_cast<std::uint8_t>(byte(rng)), static_cast<std::uint8_t>(byte(rng)),
                 static_cast<std::uint8_t>(byte(rng))};
    const Rgb back = lab_to_rgb(rgb_to_lab(px));
    worst = std::max({worst, std::abs(back.r - px.r), std::abs(back.g - px.g), std::abs(back.b - px.b)});
  }
  c.expect(worst <= 1, "round-trip error " + std::to_string(worst));

  DomainSpec s = default_source_domain(), t = default_target_domain();
  const auto src = generate_split(s, 40, 0, false, ws.root() / "c8_src", "src");
  const auto tgt = generate_split(t, 40, 1, false, ws.root() / "c8_tgt", "tgt");
  std::vector<LabImage> src_lab, tgt_lab;
  for (const auto& e : src.entries) src_lab.push_back(to_lab(read_png_rgb(e.image_path)));
  for (const auto& e : tgt.entries) tgt_lab.push_back(to_lab(read_png_rgb(e.image_path)));
  const auto ss = lab_stats(src_lab), ts = lab_stats(tgt_lab);
  std::vector<LabImage> aligned;
  for (const auto& img : src_lab) aligned.push_back(lab_align(img, ss, ts));
  const auto as = lab_stats(aligned);
  double err = 0.0;
  for (int k = 0; k < 3; ++k)
    err = std::max({err, std::abs(as.mean[k] - ts.mean[k]), std::abs(as.stddev[k] - ts.stddev[k])});
  c.expect(err <= 1e-3, "aligned stats off by " + std::to_string(err));
  char buf[96];
  std::snprintf(buf, sizeof buf, "round-trip max error %d on 10000 pixels; aligned stats within %.1e", worst, err);
  return c.done(buf);
}

Outcome determinism_and_resume(const Workspace& ws) {
  ToyWorld world(ws.root() / "world9", 200, 200, 50, 64, true, 0);
  auto cache = std::make_shared<ImageCache>();
  for (const char* name : {"c9_a", "c9_b"}) {
    auto p = make_pipeline(world, ws.root() / name, criterion_options(ws.root() / name), cache, world.source);
    p.co_training();
  }
  auto o = criterion_options(ws.root() / "c9_resume");
  o.interrupt_after_cotrain_cycle = 1;
  bool interrupted = false;
  try {
    auto p = make_pipeline(world, ws.root() / "c9_resume", o, cache, world.source);
    p.co_training();
  } catch (const Interrupted&) {
    interrupted = true;
  }
  Check c;
  c.expect(interrupted, "run was not interrupted");
  c.expect(!fs::exists(ws.root() / "c9_resume" / "cycle_2"), "cycle 2 ran before the interruption");
  o.interrupt_after_cotrain_cycle.reset();
  o.resume = true;
  {
    auto p = make_pipeline(world, ws.root() / "c9_resume", o, cache, world.source);
    p.co_training();
  }
  const auto a = snapshot(ws.root() / "c9_a");
  c.expect(a == snapshot(ws.root() / "c9_b"), "two seed-0 runs differ");
  c.expect(a == snapshot(ws.root() / "c9_resume"), "resumed run differs from the uninterrupted run");
  return c.done(std::to_string(a.size()) + " files byte-identical across runs and after resume");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  Workspace ws;
  const std::vector<std::pair<std::string, std::function<Outcome(const Workspace&)>>> criteria{
      {"toy UDA ordering", toy_ordering},
      {"metric oracle", metric_oracle},
      {"reference-table desk check", reference_desk_check},
      {"threshold oracle", threshold_oracle},
      {"curriculum properties", curriculum},
      {"collaboration properties", collaboration},
      {"fusion and combination", fusion},
      {"LAB conversion and alignment", lab},
      {"determinism and resume", determinism_and_resume},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second(ws);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu [%s] %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL",
                criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
