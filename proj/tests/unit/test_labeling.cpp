#include <algorithm>
#include <random>

#include "../support.hpp"

using namespace cotrain;
using namespace cotrain::testing;

namespace {

CurriculumParams unclamped() {
  CurriculumParams T;
  T.C_m = 0.0;
  T.C_M = 1.0;
  return T;
}

std::size_t count_if_value(const std::vector<float>& v, auto pred) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), pred));
}

}  // namespace

TEST(Percentile, IndexExamples) {
  EXPECT_EQ(percentile_index(0.0, 10), 0u);
  EXPECT_EQ(percentile_index(0.5, 10), 5u);
  EXPECT_EQ(percentile_index(0.57, 100), 57u);
  EXPECT_EQ(percentile_index(1.0, 10), 9u);
  EXPECT_EQ(percentile_index(0.99, 1), 0u);
}

TEST(Thresholds, KnownListAndClamps) {
  const auto s = ClassConfidenceSample::from_values(
      {{0.95f, 0.9f, 0.8f, 0.7f, 0.6f, 0.55f, 0.52f, 0.51f, 0.4f, 0.3f}, {}, {0.99f, 0.98f}});
  const auto T = unclamped();
  const auto v = compute_class_thresholds(s, 0.5, T);
  EXPECT_FLOAT_EQ(v.per_class[0], 0.55f);
  EXPECT_FLOAT_EQ(v.per_class[1], 1.0f);  // absent class takes the upper clamp
  EXPECT_FLOAT_EQ(v.per_class[2], 0.98f);
  CurriculumParams clamped;
  const auto c = compute_class_thresholds(s, 0.9, clamped);
  EXPECT_FLOAT_EQ(c.per_class[0], 0.5f);
  EXPECT_FLOAT_EQ(c.per_class[2], 0.9f);
}

TEST(Thresholds, RandomListsAgainstCountScan) {
  std::mt19937_64 rng(41);
  const auto T = unclamped();
  for (int t = 0; t < 300; ++t) {
    const int size = rand_int(rng, 1, 3000);
    std::vector<float> v(size);
    for (auto& x : v) x = static_cast<float>(rand_int(rng, 1, 200) / 200.0);
    const double p = rand_real(rng, 0.0, 1.0);
    const auto s = ClassConfidenceSample::from_values({v});
    const float th = compute_class_thresholds(s, p, T).per_class[0];
    const auto idx = static_cast<std::size_t>(std::min<double>(std::floor(p * size + 1e-9), size - 1));
    ASSERT_NE(std::find(v.begin(), v.end(), th), v.end());
    EXPECT_LE(count_if_value(v, [&](float x) { return x > th; }), idx);
    EXPECT_GT(count_if_value(v, [&](float x) { return x >= th; }), idx);
  }
}

TEST(Thresholds, ReservoirKeepsCapAndIsSeeded) {
  ClassConfidenceSample a(1, 50, 7), b(1, 50, 7);
  for (int i = 1; i <= 1000; ++i) {
    a.add_value(0, i / 1000.0f);
    b.add_value(0, i / 1000.0f);
  }
  a.finalize();
  b.finalize();
  EXPECT_EQ(a.values(0).size(), 50u);
  EXPECT_TRUE(std::equal(a.values(0).begin(), a.values(0).end(), b.values(0).begin()));
}

TEST(Thresholds, SampleUsesArgmaxOnly) {
  ConfidenceStack s(2, 1, 2, std::vector<float>{0.7f, 0.2f, 0.3f, 0.8f});
  ClassConfidenceSample sample(2);
  sample.add(s);
  sample.finalize();
  ASSERT_EQ(sample.values(0).size(), 1u);
  EXPECT_FLOAT_EQ(sample.values(0)[0], 0.7f);
  EXPECT_FLOAT_EQ(sample.values(1)[0], 0.8f);
}

TEST(Curriculum, FractionGrowsAndCaps) {
  CurriculumParams T;
  T.p_m = 0.3;
  T.p_M = 0.5;
  double prev = 0.0;
  for (int k = 0; k < 20; ++k) {
    const double p = curriculum_fraction(k, T);
    EXPECT_GE(p, prev);
    EXPECT_LE(p, T.p_M);
    prev = p;
  }
  EXPECT_DOUBLE_EQ(curriculum_fraction(0, T), 0.3);
  EXPECT_DOUBLE_EQ(curriculum_fraction(10, T), 0.5);
}

TEST(Curriculum, AcceptedPixelsGrowWithFraction) {
  std::mt19937_64 rng(9);
  const auto T = unclamped();
  for (int t = 0; t < 30; ++t) {
    std::vector<ConfidenceStack> stacks;
    std::vector<std::string> ids;
    for (int i = 0; i < 3; ++i) {
      stacks.push_back(random_stack(rng, 8, 8, 4));
      ids.push_back("i" + std::to_string(i));
    }
    std::vector<std::size_t> prev(4, 0);
    for (double p = 0.0; p <= 1.0 + 1e-9; p += 0.1) {
      CurriculumParams Tp = T;
      Tp.p_m = Tp.p_M = std::min(p, 1.0);
      const auto r = pseudo_label_stacks(stacks, ids, 0, Tp, ModelTag::self);
      std::vector<std::size_t> accepted(4, 0);
      for (const auto& img : r.set)
        for (ClassId v : img.labels().values())
          if (v != kVoidId) ++accepted[v];
      for (int c = 0; c < 4; ++c) EXPECT_GE(accepted[c], prev[c]);
      prev = accepted;
    }
  }
}

TEST(ApplyThresholds, AcceptsAtOrAboveThreshold) {
  ConfidenceStack s(3, 1, 2, std::vector<float>{0.6f, 0.4f, 0.5f, 0.4f, 0.6f, 0.5f});
  ThresholdVector v{{0.6f, 0.7f}, 0.5, 0};
  const auto img = apply_thresholds(s, v, "x");
  EXPECT_EQ(img.labels()[0], 0);
  EXPECT_EQ(img.labels()[1], kVoidId);
  EXPECT_EQ(img.labels()[2], kVoidId);
  EXPECT_FLOAT_EQ(img.image_confidence(), 0.6f);
  EXPECT_FLOAT_EQ(img.pixel_confidence()[1], 0.0f);
}

TEST(ApplyThresholds, ClassCountMismatchIsAnError) {
  ConfidenceStack s(1, 1, 3);
  EXPECT_THROW(apply_thresholds(s, ThresholdVector{{0.5f, 0.5f}, 0.5, 0}, "x"), Error);
}

TEST(SelectTopN, OrdersByConfidenceThenId) {
  PseudoLabelSet set{pseudo_from("b", {0}, {0.5f}), pseudo_from("a", {0}, {0.5f}),
                     pseudo_from("c", {0}, {0.9f}), pseudo_from("d", {0}, {0.1f})};
  const auto top = select_top_n(set, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].image_id(), "c");
  EXPECT_EQ(top[1].image_id(), "a");
  EXPECT_EQ(top[2].image_id(), "b");
  EXPECT_EQ(select_top_n(set, 10).size(), 4u);
}

TEST(Fuse, CollisionKeepsHigherConfidence) {
  PseudoLabelSet prev{pseudo_from("a", {0}, {0.5f}), pseudo_from("b", {1}, {0.9f})};
  PseudoLabelSet inc{pseudo_from("a", {1}, {0.7f}), pseudo_from("b", {0}, {0.8f}),
                     pseudo_from("c", {0}, {0.4f})};
  const auto f = fuse(prev, inc);
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0].labels()[0], 1);
  EXPECT_EQ(f[1].labels()[0], 1);
  EXPECT_EQ(f[2].image_id(), "c");
  const auto tie = fuse({pseudo_from("a", {0}, {0.5f})}, {pseudo_from("a", {1}, {0.5f})});
  EXPECT_EQ(tie[0].labels()[0], 0);
}

TEST(Fuse, RandomSetsAreIdempotentAndTakeMaximum) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 200; ++t) {
    PseudoLabelSet a, b;
    for (int i = 0; i < rand_int(rng, 0, 8); ++i)
      a.push_back(random_pseudo(rng, "id" + std::to_string(rand_int(rng, 0, 9)), 3, 2, 3));
    for (int i = 0; i < rand_int(rng, 0, 8); ++i)
      b.push_back(random_pseudo(rng, "id" + std::to_string(rand_int(rng, 0, 9)), 3, 2, 3));
    a = fuse({}, a);
    b = fuse({}, b);
    EXPECT_EQ(fuse(a, a), a);
    const auto f = fuse(a, b);
    for (const auto& img : f) {
      float best = -1.0f;
      for (const auto* s : {&a, &b})
        for (const auto& x : *s)
          if (x.image_id() == img.image_id()) best = std::max(best, x.image_confidence());
      EXPECT_EQ(img.image_confidence(), best);
    }
    EXPECT_TRUE(std::is_sorted(f.begin(), f.end(), [](const auto& x, const auto& y) {
      return x.image_id() < y.image_id();
    }));
  }
}

TEST(CombineVoid, FillsFromTheOtherMap) {
  const auto a = pseudo_from("x", {0, kVoidId, kVoidId, 1}, {0.8f, 0.0f, 0.0f, 0.6f});
  const auto b = pseudo_from("x", {1, 2, kVoidId, kVoidId}, {0.7f, 0.9f, 0.0f, 0.0f});
  const auto [a2, b2] = combine_void(a, b);
  EXPECT_EQ(a2.labels(), LabelMap(4, 1, std::vector<ClassId>{0, 2, kVoidId, 1}));
  EXPECT_EQ(b2.labels(), LabelMap(4, 1, std::vector<ClassId>{1, 2, kVoidId, 1}));
  EXPECT_FLOAT_EQ(a2.pixel_confidence()[1], 0.9f);
  EXPECT_FLOAT_EQ(b2.pixel_confidence()[3], 0.6f);
}

TEST(CombineVoid, VoidSetIsIntersection) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 200; ++t) {
    const int w = rand_int(rng, 1, 6), h = rand_int(rng, 1, 6);
    const auto a = random_pseudo(rng, "x", w, h, 3, rand_real(rng, 0, 1));
    const auto b = random_pseudo(rng, "x", w, h, 3, rand_real(rng, 0, 1));
    const auto [a2, b2] = combine_void(a, b);
    for (std::size_t i = 0; i < a.labels().size(); ++i) {
      const bool both = a.labels()[i] == kVoidId && b.labels()[i] == kVoidId;
      EXPECT_EQ(a2.labels()[i] == kVoidId, both);
      EXPECT_EQ(b2.labels()[i] == kVoidId, both);
      if (a.labels()[i] != kVoidId) {
        EXPECT_EQ(a2.labels()[i], a.labels()[i]);
      }
    }
  }
}

TEST(CombineVoid, MismatchIsAnError) {
  EXPECT_THROW(combine_void(pseudo_from("x", {0}, {1.0f}), pseudo_from("y", {0}, {1.0f})), Error);
  EXPECT_THROW(combine_void(pseudo_from("x", {0}, {1.0f}), pseudo_from("x", {0, 1}, {1.0f, 1.0f})),
               Error);
}

TEST(Fuse, DuplicateIdsWithinOneInputKeepMaximum) {
  const PseudoLabelSet prev{pseudo_from("a", {0}, {0.9f}), pseudo_from("a", {1}, {0.3f})};
  const auto f = fuse(prev, {});
  ASSERT_EQ(f.size(), 1u);
  EXPECT_FLOAT_EQ(f[0].image_confidence(), 0.9f);
  EXPECT_EQ(fuse(prev, {pseudo_from("a", {1}, {0.5f})})[0].labels()[0], 0);
}
