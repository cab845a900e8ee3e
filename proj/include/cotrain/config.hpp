#pragma once

// Run configuration: every hyper-parameter under its symbol name, plus paths,
// trainer selection and preprocessing switches. JSON round trip, dataset
// presets and validation that names the offending key.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cotrain/core.hpp"
#include "cotrain/io.hpp"
#include "cotrain/pipeline.hpp"
#include "cotrain/trainer.hpp"

namespace cotrain {

struct TrainerSpec {
  std::string kind = "toy";  // toy | external
  std::string executable;
  std::vector<std::string> args;
  double timeout_s = 3600.0;
  double temperature = kToyDefaultTemperature;
  friend bool operator==(const TrainerSpec&, const TrainerSpec&) = default;
};

struct DataPaths {
  std::string source;  // manifests
  std::string target;
  std::string eval;
  friend bool operator==(const DataPaths&, const DataPaths&) = default;
};

struct RunConfig {
  SelfTrainParams st;
  CoTrainParams ct;
  int N_MB = 4;
  std::uint64_t seed = 0;
  CollabSource collab = CollabSource::cross;
  bool class_balance = false;
  bool lab = true;
  std::size_t lab_sample_size = 500;
  int jobs = 1;
  std::size_t reservoir_cap = 0;
  TrainerSpec trainer;
  json passthrough = default_network_schedule();
  DataPaths paths;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    st.validate();
    ct.validate();
    if (N_MB < 1) fail(ErrorKind::config, "N_MB must be >= 1");
    if (jobs < 1) fail(ErrorKind::config, "jobs must be >= 1");
    if (lab_sample_size < 1) fail(ErrorKind::config, "lab_sample_size must be >= 1");
    if (trainer.kind != "toy" && trainer.kind != "external")
      fail(ErrorKind::config, "trainer.kind must be 'toy' or 'external', got '" + trainer.kind + "'");
    if (trainer.kind == "external" && trainer.executable.empty())
      fail(ErrorKind::config, "trainer.executable is required for an external trainer");
    if (!(trainer.timeout_s > 0.0)) fail(ErrorKind::config, "trainer.timeout_s must be > 0");
    if (!(trainer.temperature > 0.0)) fail(ErrorKind::config, "trainer.temperature must be > 0");
    if (!passthrough.is_object()) fail(ErrorKind::config, "passthrough must be an object");
  }

  TrainerConfig trainer_config() const {
    TrainerConfig c;
    c.passthrough = passthrough;
    c.N_MB = N_MB;
    c.seed = seed;
    return c;
  }

  PipelineOptions pipeline_options(const fs::path& run_dir) const {
    PipelineOptions o;
    o.trainer = trainer_config();
    o.st = st;
    o.ct = ct;
    o.collab = collab;
    o.seed = seed;
    o.run_dir = run_dir;
    o.jobs = jobs;
    o.reservoir_cap = reservoir_cap;
    return o;
  }
};

inline json to_json(const RunConfig& c) {
  return json{{"N", c.st.N},
              {"n", c.st.n},
              {"delta_p", c.st.T.delta_p},
              {"C_m", c.st.T.C_m},
              {"C_M", c.st.T.C_M},
              {"N_MB", c.N_MB},
              {"p_MB", c.st.M_df.p_MB},
              {"p_CM", c.st.M_df.p_CM},
              {"p_m", c.st.T.p_m},
              {"p_M", c.st.T.p_M},
              {"K_m", c.st.K_m},
              {"K_M", c.st.K_M},
              {"K", c.ct.K},
              {"w", static_cast<int>(c.ct.w)},
              {"lambda", c.ct.lambda},
              {"ct_p_m", c.ct.p_m},
              {"ct_p_M", c.ct.p_M},
              {"seed", c.seed},
              {"collab_source", to_string(c.collab)},
              {"class_balance", c.class_balance},
              {"lab", c.lab},
              {"lab_sample_size", c.lab_sample_size},
              {"jobs", c.jobs},
              {"reservoir_cap", c.reservoir_cap},
              {"trainer",
               {{"kind", c.trainer.kind},
                {"executable", c.trainer.executable},
                {"args", c.trainer.args},
                {"timeout_s", c.trainer.timeout_s},
                {"temperature", c.trainer.temperature}}},
              {"passthrough", c.passthrough},
              {"paths",
               {{"source", c.paths.source}, {"target", c.paths.target}, {"eval", c.paths.eval}}}};
}

namespace detail {

template <typename T>
void read_key(const json& j, const std::string& key, T& out, const std::string& prefix = "") {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::config, "config key '" + prefix + key + "' has the wrong type");
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known,
                           const std::string& prefix) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      fail(ErrorKind::config, "unknown config key '" + prefix + it.key() + "'");
}

}  // namespace detail

// Keys absent from `j` keep the values of `base`.
inline RunConfig run_config_from_json(const json& j, RunConfig base = {}) {
  if (!j.is_object()) fail(ErrorKind::config, "config must be a JSON object");
  detail::reject_unknown(
      j,
      {"N", "n", "delta_p", "C_m", "C_M", "N_MB", "p_MB", "p_CM", "p_m", "p_M", "K_m", "K_M", "K",
       "w", "lambda", "ct_p_m", "ct_p_M", "seed", "collab_source", "class_balance", "lab",
       "lab_sample_size", "jobs", "reservoir_cap", "trainer", "passthrough", "paths", "preset"},
      "");
  RunConfig c = std::move(base);
  using detail::read_key;
  read_key(j, "N", c.st.N);
  read_key(j, "n", c.st.n);
  read_key(j, "delta_p", c.st.T.delta_p);
  read_key(j, "C_m", c.st.T.C_m);
  read_key(j, "C_M", c.st.T.C_M);
  read_key(j, "N_MB", c.N_MB);
  read_key(j, "p_MB", c.st.M_df.p_MB);
  read_key(j, "p_CM", c.st.M_df.p_CM);
  read_key(j, "p_m", c.st.T.p_m);
  read_key(j, "p_M", c.st.T.p_M);
  read_key(j, "K_m", c.st.K_m);
  read_key(j, "K_M", c.st.K_M);
  read_key(j, "K", c.ct.K);
  int w = static_cast<int>(c.ct.w);
  read_key(j, "w", w);
  if (w < 0 || w > 2) fail(ErrorKind::config, "w must be 0 (ensemble), 1 or 2");
  c.ct.w = static_cast<FinalModel>(w);
  read_key(j, "lambda", c.ct.lambda);
  read_key(j, "ct_p_m", c.ct.p_m);
  read_key(j, "ct_p_M", c.ct.p_M);
  read_key(j, "seed", c.seed);
  std::string collab = to_string(c.collab);
  read_key(j, "collab_source", collab);
  c.collab = collab_source_from_string(collab);
  read_key(j, "class_balance", c.class_balance);
  read_key(j, "lab", c.lab);
  read_key(j, "lab_sample_size", c.lab_sample_size);
  read_key(j, "jobs", c.jobs);
  read_key(j, "reservoir_cap", c.reservoir_cap);
  if (auto it = j.find("trainer"); it != j.end()) {
    if (!it->is_object()) fail(ErrorKind::config, "config key 'trainer' must be an object");
    detail::reject_unknown(*it, {"kind", "executable", "args", "timeout_s", "temperature"},
                           "trainer.");
    read_key(*it, "kind", c.trainer.kind, "trainer.");
    read_key(*it, "executable", c.trainer.executable, "trainer.");
    read_key(*it, "args", c.trainer.args, "trainer.");
    read_key(*it, "timeout_s", c.trainer.timeout_s, "trainer.");
    read_key(*it, "temperature", c.trainer.temperature, "trainer.");
  }
  if (auto it = j.find("passthrough"); it != j.end()) c.passthrough = *it;
  if (auto it = j.find("paths"); it != j.end()) {
    if (!it->is_object()) fail(ErrorKind::config, "config key 'paths' must be an object");
    detail::reject_unknown(*it, {"source", "target", "eval"}, "paths.");
    read_key(*it, "source", c.paths.source, "paths.");
    read_key(*it, "target", c.paths.target, "paths.");
    read_key(*it, "eval", c.paths.eval, "paths.");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Presets, one per hyper-parameter row; the default is the GTAV+Synscapes to
// Cityscapes row.

inline json network_schedule_for(const std::string& target) {
  json s = default_network_schedule();
  if (target == "mapillary") {
    s["crop"] = {816, 608};
  } else if (target == "bdd") {
    s["crop"] = {1280, 720};
    s["baseline_iterations"] = 120000;
    s["cycle_iterations"] = 16000;
  }
  return s;
}

inline const std::map<std::string, std::string>& preset_descriptions() {
  static const std::map<std::string, std::string> d{
      {"gs-cityscapes", "GTAV+Synscapes -> Cityscapes (default)"},
      {"synscapes-cityscapes", "Synscapes -> Cityscapes"},
      {"synthia-cityscapes", "SYNTHIA -> Cityscapes"},
      {"synscapes-mapillary", "Synscapes -> Mapillary Vistas"},
      {"gs-mapillary", "GTAV+Synscapes -> Mapillary Vistas"},
      {"gta-cityscapes", "GTAV -> Cityscapes (class balance on)"},
      {"gs-bdd", "GTAV+Synscapes -> BDD100K"},
  };
  return d;
}

inline RunConfig preset(const std::string& name) {
  if (!preset_descriptions().count(name))
    fail(ErrorKind::config, "unknown preset '" + name + "'");
  RunConfig c;
  if (name == "synscapes-mapillary" || name == "gs-mapillary")
    c.passthrough = network_schedule_for("mapillary");
  if (name == "gta-cityscapes") {
    c.st.T.p_m = 0.3;
    c.st.T.p_M = 0.5;
    c.class_balance = true;
  }
  if (name == "gs-bdd") {
    c.N_MB = 2;
    c.st.M_df.p_MB = 0.5;
    c.st.T.p_m = 0.3;
    c.st.T.p_M = 0.5;
    c.passthrough = network_schedule_for("bdd");
  }
  return c;
}

// A config file may name a preset; its own keys then override the preset.
inline RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::config, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
  RunConfig base;
  if (j.is_object() && j.contains("preset")) {
    if (!j["preset"].is_string()) fail(ErrorKind::config, "config key 'preset' must be a string");
    base = preset(j["preset"].get<std::string>());
  }
  return run_config_from_json(j, std::move(base));
}

}  // namespace cotrain
