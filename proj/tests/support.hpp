#pragma once

#include <atomic>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "cotrain/cotrain.hpp"
#include "oracles.hpp"

namespace cotrain::testing {

// Keeps informational logging out of test output.
inline const bool kQuietLogs = [] {
  spdlog::set_level(spdlog::level::warn);
  return true;
}();

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("cotrain_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline int rand_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double rand_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Softmax-normalized random stack.
inline ConfidenceStack random_stack(std::mt19937_64& rng, int w, int h, int classes,
                                    double sharpness = 3.0) {
  ConfidenceStack s(w, h, classes);
  std::normal_distribution<double> g(0.0, sharpness);
  for (std::size_t p = 0; p < s.pixels(); ++p) {
    std::vector<double> e(classes);
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) sum += e[c] = std::exp(g(rng));
    for (int c = 0; c < classes; ++c) s.at(c, p) = static_cast<float>(e[c] / sum);
  }
  return s;
}

inline LabelMap random_labels(std::mt19937_64& rng, int w, int h, int classes,
                              double void_rate = 0.0) {
  LabelMap m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = rand_real(rng, 0, 1) < void_rate ? kVoidId : static_cast<ClassId>(rand_int(rng, 0, classes - 1));
  return m;
}

// Pseudo-labeled image with random labels and per-pixel confidences.
inline PseudoLabeledImage random_pseudo(std::mt19937_64& rng, const std::string& id, int w, int h,
                                        int classes, double void_rate = 0.3) {
  LabelMap labels = random_labels(rng, w, h, classes, void_rate);
  ConfidenceMap conf(w, h, 0.0f);
  for (std::size_t i = 0; i < conf.size(); ++i)
    if (labels[i] != kVoidId) conf[i] = static_cast<float>(rand_real(rng, 0.05, 1.0));
  return PseudoLabeledImage(id, std::move(labels), std::move(conf), 0, ModelTag::self);
}

// Image whose pixels all carry the given label and confidence.
inline PseudoLabeledImage pseudo_from(const std::string& id, std::vector<ClassId> labels,
                                      std::vector<float> conf) {
  const int w = static_cast<int>(labels.size());
  return PseudoLabeledImage(id, LabelMap(w, 1, std::move(labels)), ConfidenceMap(w, 1, std::move(conf)),
                            0, ModelTag::self);
}

}  // namespace cotrain::testing
