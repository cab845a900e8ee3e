#include <random>

#include "../support.hpp"

using namespace cotrain;
using namespace cotrain::testing;

namespace {

LabelSpace space19() { return cityscapes_label_space(); }

}  // namespace

TEST(LabelMapValidation, AcceptsValidIdsAndVoid) {
  LabelMap m(2, 2, std::vector<ClassId>{0, 3, 18, 255});
  const auto r = validate_label_map(m, space19());
  EXPECT_TRUE(r.ok);
  EXPECT_EQ(r.offending_pixels, 0u);
}

TEST(LabelMapValidation, ReportsFirstOutOfRangeId) {
  LabelMap m(1, 1, std::vector<ClassId>{19});
  const auto r = validate_label_map(m, space19());
  ASSERT_FALSE(r.ok);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].x, 0);
  EXPECT_EQ(r.samples[0].y, 0);
  EXPECT_EQ(r.samples[0].value, 19);
}

TEST(LabelMapValidation, VoidAloneIsValid) {
  EXPECT_TRUE(validate_label_map(LabelMap(1, 1, ClassId{255}), space19()).ok);
}

TEST(LabelMapValidation, SampleListIsCapped) {
  LabelMap m(10, 10, ClassId{200});
  const auto r = validate_label_map(m, space19());
  EXPECT_EQ(r.offending_pixels, 100u);
  EXPECT_EQ(r.samples.size(), 16u);
}

TEST(LabelSpace, RejectsBadSizesAndSubsets) {
  EXPECT_THROW(LabelSpace("x", {}), Error);
  EXPECT_THROW(LabelSpace("x", std::vector<std::string>(255, "c")), Error);
  EXPECT_NO_THROW(LabelSpace("x", std::vector<std::string>(254, "c")));
  EXPECT_THROW(LabelSpace("x", {"a", "b"}, std::vector<int>{2}), Error);
  EXPECT_FALSE(LabelSpace("x", {"a", "b"}).is_valid(2));
}

TEST(ConfidenceStack, ArgmaxPrefersLowestIdOnTies) {
  ConfidenceStack s(1, 1, 3, std::vector<float>{0.4f, 0.4f, 0.2f});
  EXPECT_EQ(s.argmax(0).first, 0);
  EXPECT_FLOAT_EQ(s.argmax(0).second, 0.4f);
  EXPECT_THROW(ConfidenceStack(2, 2, 3, std::vector<float>(5)), Error);
}

TEST(PseudoLabeledImage, VoidPixelsCarryZeroConfidence) {
  auto p = pseudo_from("a", {0, 255, 1}, {0.8f, 0.9f, 0.6f});
  EXPECT_EQ(p.pixel_confidence()[1], 0.0f);
  EXPECT_FLOAT_EQ(p.image_confidence(), 0.7f);
  EXPECT_EQ(p.labeled_pixels(), 2u);
}

TEST(PseudoLabeledImage, AllVoidHasZeroImageConfidence) {
  auto p = pseudo_from("a", {255, 255}, {0.5f, 0.5f});
  EXPECT_EQ(p.image_confidence(), 0.0f);
}

TEST(PseudoLabeledImage, RejectsShapeMismatchAndOutOfRangeConfidence) {
  EXPECT_THROW(PseudoLabeledImage("a", LabelMap(2, 1), ConfidenceMap(1, 1), 0, ModelTag::self), Error);
  EXPECT_THROW(pseudo_from("a", {0}, {1.5f}), Error);
}

TEST(PseudoLabeledImage, ImageConfidenceIsReproducedBitExactly) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 200; ++t) {
    auto p = random_pseudo(rng, "x", rand_int(rng, 1, 9), rand_int(rng, 1, 9), 4, 0.5);
    auto q = PseudoLabeledImage(p.image_id(), p.labels(), p.pixel_confidence(), 0, ModelTag::self);
    EXPECT_EQ(std::bit_cast<std::uint32_t>(p.image_confidence()),
              std::bit_cast<std::uint32_t>(q.image_confidence()));
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < p.labels().size(); ++i)
      if (p.labels()[i] != kVoidId) {
        sum += p.pixel_confidence()[i];
        ++count;
      }
    EXPECT_FLOAT_EQ(p.image_confidence(), count ? static_cast<float>(sum / count) : 0.0f);
  }
}

TEST(ModelTag, StringRoundTrip) {
  for (auto t : {ModelTag::self, ModelTag::branch1, ModelTag::branch2, ModelTag::ensemble})
    EXPECT_EQ(model_tag_from_string(to_string(t)), t);
  EXPECT_THROW(model_tag_from_string("3"), Error);
}

TEST(Params, InvariantsAreChecked) {
  CurriculumParams T;
  EXPECT_NO_THROW(T.validate());
  T.p_m = 0.7;
  EXPECT_THROW(T.validate(), Error);
  T = {};
  T.C_m = 0.95;
  EXPECT_THROW(T.validate(), Error);
  T = {};
  T.delta_p = -0.1;
  EXPECT_THROW(T.validate(), Error);

  SelfTrainParams st;
  EXPECT_NO_THROW(st.validate());
  st.n = st.N + 1;
  EXPECT_THROW(st.validate(), Error);
  st = {};
  st.K_m = st.K_M;
  EXPECT_THROW(st.validate(), Error);

  CoTrainParams ct;
  EXPECT_NO_THROW(ct.validate());
  ct.lambda = 1.2;
  EXPECT_THROW(ct.validate(), Error);
  ct = {};
  ct.K = 0;
  EXPECT_THROW(ct.validate(), Error);

  MixParams mix{1.1, 0.5};
  EXPECT_THROW(mix.validate(), Error);
}

TEST(Params, DefaultsMatchTheHyperParameterTable) {
  const SelfTrainParams st;
  EXPECT_EQ(st.N, 500);
  EXPECT_EQ(st.n, 100);
  EXPECT_DOUBLE_EQ(st.T.delta_p, 0.05);
  EXPECT_DOUBLE_EQ(st.T.C_m, 0.5);
  EXPECT_DOUBLE_EQ(st.T.C_M, 0.9);
  EXPECT_DOUBLE_EQ(st.M_df.p_MB, 0.75);
  EXPECT_DOUBLE_EQ(st.M_df.p_CM, 0.5);
  EXPECT_DOUBLE_EQ(st.T.p_m, 0.5);
  EXPECT_DOUBLE_EQ(st.T.p_M, 0.6);
  EXPECT_EQ(st.K_m, 1);
  EXPECT_EQ(st.K_M, 10);
  const CoTrainParams ct;
  EXPECT_EQ(ct.K, 5);
  EXPECT_EQ(ct.w, FinalModel::branch1);
  EXPECT_DOUBLE_EQ(ct.lambda, 0.8);
}

TEST(DatasetSplit, KindInvariants) {
  DatasetSplit s;
  s.name = "s";
  s.kind = SplitKind::labeled;
  s.entries.push_back({"a", "a.png", std::nullopt, std::nullopt});
  EXPECT_THROW(s.validate(), Error);
  s.entries[0].label_path = "a_l.png";
  EXPECT_NO_THROW(s.validate());
  s.kind = SplitKind::unlabeled;
  EXPECT_THROW(s.validate(), Error);
  EXPECT_NO_THROW(s.as_unlabeled().validate());
}
