#pragma once

// The model boundary. The pipeline never looks inside a model: it hands a
// trainer session batches and image references and gets back opaque weight
// references and confidence stacks.

#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"
#include "cotrain/mixing.hpp"

namespace cotrain {

// Supervised-training schedule for external trainers. Carried verbatim; the
// toy trainer only looks at N_MB and seed.
inline json default_network_schedule() {
  return json{{"optimizer", "SGD"},
              {"base_lr", 0.002},
              {"momentum", 0.9},
              {"lr_decay", {{"factor", 0.1}, {"at_fractions", {1.0 / 3.0, 2.0 / 3.0}}}},
              {"baseline_iterations", 60000},
              {"cycle_iterations", 8000},
              {"crop", {1024, 512}},
              {"augment", {{"random_zoom", true}, {"horizontal_flip", true}}}};
}

struct TrainerConfig {
  json passthrough = default_network_schedule();
  int N_MB = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (N_MB < 1) fail(ErrorKind::config, "N_MB must be >= 1");
  }
};

class Trainer {
 public:
  virtual ~Trainer() = default;

  virtual const std::string& session_id() const = 0;

  // Trains from the trainer's initial weights.
  virtual ModelHandle baseline_train(const TrainerConfig& config, std::span<const Batch> schedule,
                                     const std::string& tag) = 0;

  // Continues from `base`; `base` stays usable afterwards.
  virtual ModelHandle finetune(const ModelHandle& base, const TrainerConfig& config,
                               std::span<const Batch> schedule, const std::string& tag) = 0;

  virtual std::vector<ConfidenceStack> predict(const ModelHandle& model,
                                               std::span<const DatasetEntry> images) = 0;
};

// At most one request in flight per session; a second one is rejected.
class SessionGate {
 public:
  explicit SessionGate(std::string session_id) : session_id_(std::move(session_id)) {}

  class Ticket {
   public:
    explicit Ticket(std::atomic<bool>* busy) : busy_(busy) {}
    Ticket(Ticket&& o) noexcept : busy_(std::exchange(o.busy_, nullptr)) {}
    Ticket(const Ticket&) = delete;
    Ticket& operator=(const Ticket&) = delete;
    Ticket& operator=(Ticket&&) = delete;
    ~Ticket() {
      if (busy_) busy_->store(false);
    }

   private:
    std::atomic<bool>* busy_;
  };

  Ticket enter() {
    bool expected = false;
    if (!busy_.compare_exchange_strong(expected, true))
      fail(ErrorKind::trainer, "session '" + session_id_ + "' already has a request in flight");
    return Ticket(&busy_);
  }

  bool busy() const noexcept { return busy_.load(); }

 private:
  std::string session_id_;
  std::atomic<bool> busy_{false};
};

// ---------------------------------------------------------------------------
// Toy trainer: weighted Gaussian naive Bayes over (R, G, B, x, y).

inline constexpr int kToyFeatures = 5;
inline constexpr double kToyVarianceFloor = 1e-4;
inline constexpr double kToyDefaultTemperature = 8.0;

using ToyFeatures = std::array<double, kToyFeatures>;

inline ToyFeatures toy_features(const Image& img, int x, int y) {
  const Rgb px = img(x, y);
  return {px.r / 255.0, px.g / 255.0, px.b / 255.0, (x + 0.5) / img.width(),
          (y + 0.5) / img.height()};
}

struct GaussianClassStats {
  double weight = 0.0;
  ToyFeatures sum{};
  ToyFeatures sumsq{};
  friend bool operator==(const GaussianClassStats&, const GaussianClassStats&) = default;
};

struct ToyModelState {
  std::vector<GaussianClassStats> classes;
  double temperature = kToyDefaultTemperature;

  ToyModelState() = default;
  explicit ToyModelState(int num_classes, double temp = kToyDefaultTemperature)
      : classes(num_classes), temperature(temp) {}

  int num_classes() const noexcept { return static_cast<int>(classes.size()); }

  void accumulate(const TrainingSample& sample) {
    const LabelMap& labels = sample.labels;
    for (int y = 0; y < labels.height(); ++y) {
      for (int x = 0; x < labels.width(); ++x) {
        const ClassId c = labels(x, y);
        const double w = sample.weights(x, y);
        if (c == kVoidId || w <= 0.0) continue;
        if (c >= num_classes()) fail(ErrorKind::data, "training label outside model classes");
        const ToyFeatures f = toy_features(sample.image, x, y);
        auto& s = classes[c];
        s.weight += w;
        for (int d = 0; d < kToyFeatures; ++d) {
          s.sum[d] += w * f[d];
          s.sumsq[d] += w * f[d] * f[d];
        }
      }
    }
  }

  friend bool operator==(const ToyModelState&, const ToyModelState&) = default;
};

// Per-class Gaussian parameters derived from the sufficient statistics.
struct ToyClassModel {
  double log_prior = 0.0;
  ToyFeatures mean{};
  ToyFeatures var{};
};

inline std::vector<ToyClassModel> toy_class_models(const ToyModelState& state) {
  const int n = state.num_classes();
  GaussianClassStats pooled;
  for (const auto& s : state.classes) {
    pooled.weight += s.weight;
    for (int d = 0; d < kToyFeatures; ++d) {
      pooled.sum[d] += s.sum[d];
      pooled.sumsq[d] += s.sumsq[d];
    }
  }
  auto moments = [](const GaussianClassStats& s, ToyFeatures& mean, ToyFeatures& var) {
    for (int d = 0; d < kToyFeatures; ++d) {
      if (s.weight > 0.0) {
        mean[d] = s.sum[d] / s.weight;
        var[d] = std::max(s.sumsq[d] / s.weight - mean[d] * mean[d], kToyVarianceFloor);
      } else {
        mean[d] = 0.5;
        var[d] = 1.0 / 12.0;
      }
    }
  };
  std::vector<ToyClassModel> out(n);
  for (int c = 0; c < n; ++c) {
    const auto& s = state.classes[c];
    // Empty classes fall back to the pooled statistics.
    moments(s.weight > 0.0 ? s : pooled, out[c].mean, out[c].var);
    out[c].log_prior = std::log((s.weight + 1.0) / (pooled.weight + n));
  }
  return out;
}

inline ConfidenceStack toy_predict(const ToyModelState& state, const Image& img) {
  const auto models = toy_class_models(state);
  const int n = state.num_classes();
  std::vector<double> log_norm(n, 0.0);
  for (int c = 0; c < n; ++c)
    for (int d = 0; d < kToyFeatures; ++d)
      log_norm[c] += -0.5 * std::log(2.0 * M_PI * models[c].var[d]);

  ConfidenceStack out(img.width(), img.height(), n);
  std::vector<double> score(n);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const ToyFeatures f = toy_features(img, x, y);
      double best = -INFINITY;
      for (int c = 0; c < n; ++c) {
        double s = models[c].log_prior + log_norm[c];
        for (int d = 0; d < kToyFeatures; ++d) {
          const double diff = f[d] - models[c].mean[d];
          s -= diff * diff / (2.0 * models[c].var[d]);
        }
        score[c] = s / state.temperature;
        best = std::max(best, score[c]);
      }
      double z = 0.0;
      for (int c = 0; c < n; ++c) {
        score[c] = std::exp(score[c] - best);
        z += score[c];
      }
      for (int c = 0; c < n; ++c) out.at(c, x, y) = static_cast<float>(score[c] / z);
    }
  }
  return out;
}

inline ToyModelState toy_fit(ToyModelState state, std::span<const TrainingSample> samples) {
  for (const auto& s : samples) state.accumulate(s);
  return state;
}

inline std::vector<ConfidenceStack> toy_predict(const ToyModelState& state,
                                                std::span<const Image> images) {
  std::vector<ConfidenceStack> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(toy_predict(state, img));
  return out;
}

inline json to_json(const ToyModelState& state) {
  json classes = json::array();
  for (const auto& s : state.classes)
    classes.push_back(json{{"weight", s.weight}, {"sum", s.sum}, {"sumsq", s.sumsq}});
  return json{{"kind", "toy-gaussian-nb"}, {"temperature", state.temperature}, {"classes", classes}};
}

inline ToyModelState toy_state_from_json(const json& j) {
  ToyModelState state;
  try {
    state.temperature = j.at("temperature").get<double>();
    for (const auto& c : j.at("classes")) {
      GaussianClassStats s;
      s.weight = c.at("weight").get<double>();
      s.sum = c.at("sum").get<ToyFeatures>();
      s.sumsq = c.at("sumsq").get<ToyFeatures>();
      state.classes.push_back(s);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::trainer, std::string("malformed toy model record: ") + e.what());
  }
  return state;
}

// In-process trainer session around the toy model. Weights are JSON files
// named after the caller's tag inside a model directory shared by all
// sessions of a run, so handles from one session load in another.
class ToyTrainer : public Trainer {
 public:
  ToyTrainer(std::string session_id, fs::path model_dir, int num_classes,
             std::shared_ptr<ImageCache> cache = std::make_shared<ImageCache>(),
             double temperature = kToyDefaultTemperature)
      : session_id_(std::move(session_id)),
        model_dir_(std::move(model_dir)),
        num_classes_(num_classes),
        temperature_(temperature),
        cache_(std::move(cache)),
        gate_(session_id_) {}

  const std::string& session_id() const override { return session_id_; }
  SessionGate& gate() { return gate_; }

  ModelHandle baseline_train(const TrainerConfig& config, std::span<const Batch> schedule,
                             const std::string& tag) override {
    auto ticket = gate_.enter();
    config.validate();
    if (schedule.empty()) fail(ErrorKind::trainer, "baseline_train with an empty schedule");
    return store(train(ToyModelState(num_classes_, temperature_), schedule), tag);
  }

  ModelHandle finetune(const ModelHandle& base, const TrainerConfig& config,
                       std::span<const Batch> schedule, const std::string& tag) override {
    auto ticket = gate_.enter();
    config.validate();
    return store(train(*load(base), schedule), tag);
  }

  std::vector<ConfidenceStack> predict(const ModelHandle& model,
                                       std::span<const DatasetEntry> images) override {
    auto ticket = gate_.enter();
    const auto state = load(model);
    std::vector<ConfidenceStack> out;
    out.reserve(images.size());
    for (const auto& e : images) out.push_back(toy_predict(*state, *cache_->rgb(e.image_path)));
    return out;
  }

  std::shared_ptr<const ToyModelState> load(const ModelHandle& handle) {
    {
      std::lock_guard lock(mutex_);
      if (auto it = states_.find(handle.weights); it != states_.end()) return it->second;
    }
    const fs::path path = model_dir_ / handle.weights;
    if (!fs::exists(path))
      fail(ErrorKind::trainer, "session '" + session_id_ + "': weights '" + handle.weights +
                                   "' not found in " + model_dir_.string());
    auto state = std::make_shared<const ToyModelState>(toy_state_from_json(read_json(path)));
    std::lock_guard lock(mutex_);
    return states_.emplace(handle.weights, std::move(state)).first->second;
  }

 private:
  static ToyModelState train(ToyModelState state, std::span<const Batch> schedule) {
    for (const auto& batch : schedule)
      for (const auto& sample : batch.samples) state.accumulate(sample);
    return state;
  }

  ModelHandle store(ToyModelState state, const std::string& tag) {
    const std::string weights = tag + ".json";
    write_json(model_dir_ / weights, to_json(state));
    std::lock_guard lock(mutex_);
    states_[weights] = std::make_shared<const ToyModelState>(std::move(state));
    return {tag, session_id_, weights};
  }

  std::string session_id_;
  fs::path model_dir_;
  int num_classes_;
  double temperature_;
  std::shared_ptr<ImageCache> cache_;
  SessionGate gate_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const ToyModelState>> states_;
};

}  // namespace cotrain
