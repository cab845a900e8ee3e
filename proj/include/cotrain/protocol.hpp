#pragma once

// File-based wire protocol between the orchestrator and an out-of-process
// trainer. One session directory per trainer session; the client writes
// NNNN.request, the trainer answers with NNNN.response. Both are canonical
// JSON written atomically (temp file + rename). Training samples travel as
// files under NNNN.samples/, prediction stacks come back under NNNN.out/.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"
#include "cotrain/mixing.hpp"
#include "cotrain/trainer.hpp"

extern char** environ;

namespace cotrain::protocol {

inline constexpr int kVersion = 1;

inline std::string seq_name(int seq, std::string_view suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", seq);
  return std::string(buf) + std::string(suffix);
}

inline fs::path request_path(const fs::path& dir, int seq) { return dir / seq_name(seq, ".request"); }
inline fs::path response_path(const fs::path& dir, int seq) { return dir / seq_name(seq, ".response"); }

inline SampleOrigin sample_origin_from_string(const std::string& s) {
  if (s == "source") return SampleOrigin::source;
  if (s == "target") return SampleOrigin::target;
  if (s == "collaged-target") return SampleOrigin::collaged_target;
  fail(ErrorKind::data, "unknown sample origin '" + s + "'");
}

inline json encode_config(const TrainerConfig& c) {
  return json{{"N_MB", c.N_MB}, {"seed", c.seed}, {"passthrough", c.passthrough}};
}

inline TrainerConfig decode_config(const json& j) {
  TrainerConfig c;
  c.N_MB = j.at("N_MB").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.passthrough = j.value("passthrough", json::object());
  return c;
}

// Writes every sample under `dir`/`folder` and returns the batch records
// with paths relative to `dir`.
inline json encode_schedule(std::span<const Batch> schedule, const fs::path& dir,
                            const std::string& folder) {
  fs::create_directories(dir / folder);
  json batches = json::array();
  for (std::size_t b = 0; b < schedule.size(); ++b) {
    json samples = json::array();
    for (std::size_t s = 0; s < schedule[b].samples.size(); ++s) {
      const auto& sample = schedule[b].samples[s];
      char stem[48];
      std::snprintf(stem, sizeof stem, "b%04zu_s%02zu", b, s);
      const std::string base = folder + "/" + stem;
      write_png_rgb(dir / (base + ".png"), sample.image);
      write_label_png(dir / (base + ".labels.png"), sample.labels);
      write_confidence_map(dir / (base + ".weights.f32"), sample.weights);
      samples.push_back(json{{"origin", to_string(sample.origin)},
                             {"provenance", sample.provenance},
                             {"image", base + ".png"},
                             {"labels", base + ".labels.png"},
                             {"weights", base + ".weights.f32"}});
    }
    batches.push_back(json{{"collage", schedule[b].collage},
                           {"target_count", schedule[b].target_count},
                           {"source_count", schedule[b].source_count},
                           {"samples", std::move(samples)}});
  }
  return batches;
}

inline std::vector<Batch> decode_schedule(const json& batches, const fs::path& dir) {
  std::vector<Batch> out;
  for (const auto& jb : batches) {
    Batch b;
    b.collage = jb.at("collage").get<bool>();
    b.target_count = jb.at("target_count").get<int>();
    b.source_count = jb.at("source_count").get<int>();
    for (const auto& js : jb.at("samples")) {
      TrainingSample s{read_png_rgb(dir / js.at("image").get<std::string>()),
                       read_label_png(dir / js.at("labels").get<std::string>()),
                       read_confidence_map(dir / js.at("weights").get<std::string>()),
                       sample_origin_from_string(js.at("origin").get<std::string>()),
                       js.value("provenance", std::vector<std::string>{})};
      if (!s.labels.same_shape(s.image) || !s.weights.same_shape(s.image))
        fail(ErrorKind::data, "sample " + js.at("image").get<std::string>() +
                                  ": image, labels and weights differ in shape");
      b.samples.push_back(std::move(s));
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client side

struct ExternalTrainerOptions {
  fs::path executable;
  std::vector<std::string> args;
  double timeout_s = 3600.0;
};

// Spawns `executable args... <session_dir>` on first use. The child's stdout
// and stderr go to <session_dir>/trainer.log.
class ExternalTrainer : public Trainer {
 public:
  ExternalTrainer(std::string session_id, fs::path session_dir, fs::path model_dir,
                  int num_classes, ExternalTrainerOptions options)
      : session_id_(std::move(session_id)),
        session_dir_(fs::absolute(session_dir)),
        model_dir_(fs::absolute(model_dir)),
        num_classes_(num_classes),
        options_(std::move(options)),
        gate_(session_id_) {}

  ExternalTrainer(const ExternalTrainer&) = delete;
  ExternalTrainer& operator=(const ExternalTrainer&) = delete;

  ~ExternalTrainer() override {
    if (pid_ <= 0) return;
    try {
      options_.timeout_s = std::min(options_.timeout_s, 10.0);
      exchange(json{{"command", "shutdown"}});
    } catch (const std::exception& e) {
      spdlog::warn("trainer session '{}' did not shut down cleanly: {}", session_id_, e.what());
    }
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }

  const std::string& session_id() const override { return session_id_; }
  const fs::path& session_dir() const noexcept { return session_dir_; }
  pid_t pid() const noexcept { return pid_; }

  ModelHandle baseline_train(const TrainerConfig& config, std::span<const Batch> schedule,
                             const std::string& tag) override {
    ensure_started();
    const int seq = seq_ + 1;
    json req{{"command", "baseline_train"}, {"tag", tag}, {"config", encode_config(config)}};
    req["batches"] = encode_schedule(schedule, session_dir_, seq_name(seq, ".samples"));
    return model_handle_from_json(exchange(std::move(req)).at("model"));
  }

  ModelHandle finetune(const ModelHandle& base, const TrainerConfig& config,
                       std::span<const Batch> schedule, const std::string& tag) override {
    ensure_started();
    const int seq = seq_ + 1;
    json req{{"command", "finetune"},
             {"tag", tag},
             {"base", to_json(base)},
             {"config", encode_config(config)}};
    req["batches"] = encode_schedule(schedule, session_dir_, seq_name(seq, ".samples"));
    return model_handle_from_json(exchange(std::move(req)).at("model"));
  }

  std::vector<ConfidenceStack> predict(const ModelHandle& model,
                                       std::span<const DatasetEntry> images) override {
    json list = json::array();
    for (const auto& e : images)
      list.push_back(json{{"image_id", e.image_id},
                          {"image_path", fs::absolute(e.image_path).generic_string()}});
    const json resp = exchange(json{{"command", "predict"}, {"model", to_json(model)}, {"images", list}});
    const auto& stacks = resp.at("stacks");
    if (stacks.size() != images.size())
      fail(ErrorKind::trainer, "session '" + session_id_ + "' returned " +
                                   std::to_string(stacks.size()) + " stacks for " +
                                   std::to_string(images.size()) + " images");
    std::vector<ConfidenceStack> out;
    out.reserve(stacks.size());
    for (const auto& p : stacks) out.push_back(read_confidence_stack(session_dir_ / p.get<std::string>()));
    fs::remove_all(session_dir_ / seq_name(seq_, ".out"));
    return out;
  }

 private:
  void ensure_started() {
    if (pid_ > 0) return;
    if (started_)
      fail(ErrorKind::trainer, "trainer process of session '" + session_id_ + "' is gone");
    start();
    started_ = true;
  }

  void start() {
    std::error_code ec;
    fs::remove_all(session_dir_, ec);
    fs::create_directories(session_dir_, ec);
    if (ec) fail(ErrorKind::trainer, "cannot create session dir " + session_dir_.string());
    const std::string log = (session_dir_ / "trainer.log").string();
    std::vector<std::string> argv_s{options_.executable.string()};
    argv_s.insert(argv_s.end(), options_.args.begin(), options_.args.end());
    argv_s.push_back(session_dir_.string());
    std::vector<char*> argv;
    for (auto& a : argv_s) argv.push_back(a.data());
    argv.push_back(nullptr);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, 1, log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    posix_spawn_file_actions_adddup2(&actions, 1, 2);
    const int rc = ::posix_spawnp(&pid_, argv[0], &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) {
      pid_ = 0;
      fail(ErrorKind::trainer, "cannot start trainer '" + options_.executable.string() +
                                   "': " + std::strerror(rc));
    }
  }

  json exchange(json req) {
    auto ticket = gate_.enter();
    ensure_started();
    const int seq = ++seq_;
    const std::string command = req.value("command", "");
    req["protocol"] = kVersion;
    req["seq"] = seq;
    req["session"] = session_id_;
    req["num_classes"] = num_classes_;
    req["model_dir"] = relative_to(model_dir_, session_dir_);
    write_json(request_path(session_dir_, seq), req);

    const fs::path resp_path = response_path(session_dir_, seq);
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration<double>(options_.timeout_s);
    auto delay = std::chrono::milliseconds(1);
    while (!fs::exists(resp_path)) {
      int status = 0;
      if (::waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = 0;
        fail(ErrorKind::trainer,
             "trainer process of session '" + session_id_ + "' exited (" + describe(status) +
                 ") before answering request " + std::to_string(seq) + " (" + command +
                 "); see " + (session_dir_ / "trainer.log").string());
      }
      if (std::chrono::steady_clock::now() > deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, nullptr, 0);
        pid_ = 0;
        fail(ErrorKind::trainer, "trainer session '" + session_id_ + "' timed out on request " +
                                     std::to_string(seq) + " (" + command + ")");
      }
      std::this_thread::sleep_for(delay);
      delay = std::min(delay * 2, std::chrono::milliseconds(20));
    }
    json resp;
    try {
      resp = read_json(resp_path);
    } catch (const Error& e) {
      fail(ErrorKind::trainer, std::string("unreadable trainer response: ") + e.what());
    }
    fs::remove_all(session_dir_ / seq_name(seq, ".samples"));
    if (resp.value("seq", -1) != seq)
      fail(ErrorKind::trainer, "trainer response " + resp_path.string() + " carries the wrong seq");
    if (resp.value("status", "") != "ok")
      fail(ErrorKind::trainer, "trainer session '" + session_id_ + "' failed on " + command +
                                   ": " + resp.value("message", std::string("no message")));
    if (command == "shutdown") {
      ::waitpid(pid_, nullptr, 0);
      pid_ = 0;
    }
    return resp;
  }

  static std::string describe(int status) {
    if (WIFEXITED(status)) return "exit status " + std::to_string(WEXITSTATUS(status));
    if (WIFSIGNALED(status)) return "signal " + std::to_string(WTERMSIG(status));
    return "status " + std::to_string(status);
  }

  std::string session_id_;
  fs::path session_dir_;
  fs::path model_dir_;
  int num_classes_;
  ExternalTrainerOptions options_;
  SessionGate gate_;
  pid_t pid_ = 0;
  bool started_ = false;
  int seq_ = 0;
};

// ---------------------------------------------------------------------------
// Server side

using TrainerBuilder = std::function<std::unique_ptr<Trainer>(
    const std::string& session_id, const fs::path& model_dir, int num_classes)>;

// Answers one request; throws on anything malformed.
inline json handle_request(const json& req, const fs::path& dir, std::unique_ptr<Trainer>& trainer,
                           const TrainerBuilder& build) {
  const int seq = req.at("seq").get<int>();
  const std::string command = req.at("command").get<std::string>();
  json resp{{"seq", seq}, {"status", "ok"}};
  if (command == "shutdown") return resp;
  if (!trainer)
    trainer = build(req.at("session").get<std::string>(),
                    dir / req.at("model_dir").get<std::string>(), req.at("num_classes").get<int>());
  if (command == "baseline_train" || command == "finetune") {
    const auto schedule = decode_schedule(req.at("batches"), dir);
    const auto config = decode_config(req.at("config"));
    const std::string tag = req.at("tag").get<std::string>();
    const ModelHandle h =
        command == "finetune"
            ? trainer->finetune(model_handle_from_json(req.at("base")), config, schedule, tag)
            : trainer->baseline_train(config, schedule, tag);
    resp["model"] = to_json(h);
  } else if (command == "predict") {
    std::vector<DatasetEntry> images;
    for (const auto& j : req.at("images"))
      images.push_back({j.at("image_id").get<std::string>(), j.at("image_path").get<std::string>(),
                        std::nullopt, std::nullopt});
    const auto stacks = trainer->predict(model_handle_from_json(req.at("model")), images);
    const std::string folder = seq_name(seq, ".out");
    json paths = json::array();
    for (std::size_t i = 0; i < stacks.size(); ++i) {
      const std::string rel = folder + "/" + seq_name(static_cast<int>(i), ".f32");
      write_confidence_stack(dir / rel, stacks[i]);
      paths.push_back(rel);
    }
    resp["stacks"] = std::move(paths);
  } else {
    fail(ErrorKind::data, "unknown command '" + command + "'");
  }
  return resp;
}

// Serves requests in `dir` until a shutdown request or until the parent
// process goes away. Malformed requests get an error response.
inline int serve(const fs::path& dir, const TrainerBuilder& build) {
  std::unique_ptr<Trainer> trainer;
  const pid_t parent = ::getppid();
  for (int seq = 1;; ++seq) {
    const fs::path path = request_path(dir, seq);
    auto delay = std::chrono::milliseconds(1);
    while (!fs::exists(path)) {
      if (::getppid() != parent) return 1;
      std::this_thread::sleep_for(delay);
      delay = std::min(delay * 2, std::chrono::milliseconds(20));
    }
    json resp;
    bool shutdown = false;
    try {
      const json req = read_json(path);
      if (req.value("seq", -1) != seq)
        fail(ErrorKind::data, "request " + path.filename().string() + " carries seq " +
                                  std::to_string(req.value("seq", -1)));
      shutdown = req.value("command", "") == "shutdown";
      resp = handle_request(req, dir, trainer, build);
    } catch (const std::exception& e) {
      spdlog::error("request {}: {}", seq, e.what());
      resp = json{{"seq", seq}, {"status", "error"}, {"message", e.what()}};
      shutdown = false;
    }
    write_json(response_path(dir, seq), resp);
    if (shutdown) return 0;
  }
}

}  // namespace cotrain::protocol
