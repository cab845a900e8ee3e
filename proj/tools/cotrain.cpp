// cotrain: command-line entry point for data generation, preprocessing, the
// self-training and co-training pipelines, pseudo-labeling and evaluation.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "cotrain/cotrain.hpp"

using namespace cotrain;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTrainer = 4;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return kExitConfig;
    case ErrorKind::data: return kExitData;
    case ErrorKind::trainer: return kExitTrainer;
  }
  return 1;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

struct GlobalOptions {
  std::string config_file;
  std::string preset_name = "gs-cityscapes";
  std::vector<std::string> overrides;
  std::string run_root;
  std::string trainer_exe;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  std::string source, target, eval;
  bool print_config = false;
  bool verbose = false;
  bool quiet = false;
};

// --set key=value; the value is parsed as JSON and taken as a string if that
// fails. Dotted keys address nested records (trainer.kind).
void add_override(json& patch, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(ErrorKind::config, "--set expects key=value, got '" + item + "'");
  const std::string key = item.substr(0, eq);
  const std::string raw = item.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &patch;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1)
    node = &(*node)[key.substr(start, dot - start)];
  (*node)[key.substr(start)] = value;
}

std::string resolve_against(const std::string& p, const fs::path& base) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig cfg = preset(g.preset_name);
  if (!g.config_file.empty()) {
    if (!fs::exists(g.config_file))
      fail(ErrorKind::config, "config file not found: " + g.config_file);
    json j;
    try {
      j = json::parse(read_file(g.config_file));
    } catch (const json::exception& e) {
      fail(ErrorKind::config, g.config_file + ": " + e.what());
    }
    if (j.is_object() && j.contains("preset")) {
      if (!j["preset"].is_string()) fail(ErrorKind::config, "config key 'preset' must be a string");
      cfg = preset(j["preset"].get<std::string>());
    }
    cfg = run_config_from_json(j, cfg);
    const fs::path base = fs::absolute(g.config_file).parent_path();
    cfg.paths.source = resolve_against(cfg.paths.source, base);
    cfg.paths.target = resolve_against(cfg.paths.target, base);
    cfg.paths.eval = resolve_against(cfg.paths.eval, base);
    if (!cfg.trainer.executable.empty() && cfg.trainer.executable.find('/') != std::string::npos)
      cfg.trainer.executable = resolve_against(cfg.trainer.executable, base);
  }
  if (!g.overrides.empty()) {
    json patch = json::object();
    for (const auto& o : g.overrides) add_override(patch, o);
    json merged = to_json(cfg);
    merged.merge_patch(patch);
    cfg = run_config_from_json(merged);
  }
  std::string exe = g.trainer_exe;
  if (exe.empty()) exe = env("COTRAIN_TRAINER").value_or("");
  if (!exe.empty()) {
    cfg.trainer.kind = "external";
    cfg.trainer.executable = exe;
  }
  if (g.jobs) cfg.jobs = *g.jobs;
  if (g.seed) cfg.seed = *g.seed;
  if (!g.source.empty()) cfg.paths.source = fs::absolute(g.source).lexically_normal().string();
  if (!g.target.empty()) cfg.paths.target = fs::absolute(g.target).lexically_normal().string();
  if (!g.eval.empty()) cfg.paths.eval = fs::absolute(g.eval).lexically_normal().string();
  cfg.validate();
  return cfg;
}

fs::path run_root(const GlobalOptions& g) {
  if (!g.run_root.empty()) return g.run_root;
  return env("COTRAIN_RUN_ROOT").value_or("runs");
}

TrainerFactory make_factory(const RunConfig& cfg, const fs::path& run_dir, int num_classes,
                            std::shared_ptr<ImageCache> cache) {
  if (cfg.trainer.kind == "toy") {
    const double temperature = cfg.trainer.temperature;
    return [=](const std::string& id) -> std::unique_ptr<Trainer> {
      return std::make_unique<ToyTrainer>(id, run_dir / "models", num_classes, cache, temperature);
    };
  }
  protocol::ExternalTrainerOptions opts{cfg.trainer.executable, cfg.trainer.args,
                                        cfg.trainer.timeout_s};
  return [=](const std::string& id) -> std::unique_ptr<Trainer> {
    return std::make_unique<protocol::ExternalTrainer>(id, run_dir / "sessions" / id,
                                                       run_dir / "models", num_classes, opts);
  };
}

LabelSpace builtin_label_space(const std::string& name) {
  if (name == "toy8") return toy_label_space();
  if (name == "cityscapes19") return cityscapes_label_space();
  fail(ErrorKind::config, "unknown label space '" + name + "' (toy8 or cityscapes19)");
}

std::optional<std::vector<int>> class_setting(const LabelSpace& space, int setting) {
  if (space.name() == "cityscapes19") return cityscapes_subset(setting);
  if (setting != 19 && setting != space.num_classes())
    fail(ErrorKind::config, "--classes " + std::to_string(setting) +
                                " applies only to the cityscapes19 label space");
  return space.eval_subset();
}

void report(const LabelSpace& space, const std::vector<ClassIoU>& ious,
            const std::optional<std::vector<int>>& subset, const std::string& csv) {
  const double m = miou(ious, subset);
  const std::string caption = subset ? "mIoU(" + std::to_string(subset->size()) + ")" : "mIoU";
  std::cout << format_iou_table(space, ious, m, caption);
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) fail(ErrorKind::data, "cannot write " + csv);
    write_iou_csv(os, space, ious);
  }
}

// ---------------------------------------------------------------------------
// Pipeline commands

struct RunSetup {
  RunConfig cfg;
  fs::path run_dir;
  std::unique_ptr<Pipeline> pipeline;
};

RunSetup prepare_run(const GlobalOptions& g, const std::string& run_name, bool resume,
                     std::optional<int> stop_after, const std::string& dump_collages) {
  RunConfig cfg = resolve_config(g);
  if (cfg.paths.source.empty()) fail(ErrorKind::config, "paths.source is not set");
  if (cfg.paths.target.empty()) fail(ErrorKind::config, "paths.target is not set");
  if (run_name.empty()) fail(ErrorKind::config, "--run is required");
  const fs::path run_dir = run_root(g) / run_name;
  const fs::path config_copy = run_dir / "config.json";
  if (fs::exists(config_copy)) {
    if (!resume)
      fail(ErrorKind::config, "run directory " + run_dir.string() +
                                  " already holds a run; pass --resume or pick another --run");
    const RunConfig stored = run_config_from_json(read_json(config_copy));
    json a = to_json(stored), b = to_json(cfg);
    a.erase("jobs");
    b.erase("jobs");
    if (a != b)
      fail(ErrorKind::config, "resolved config differs from " + config_copy.string());
  }
  fs::create_directories(run_dir);
  json stored = to_json(cfg);
  stored.erase("jobs");
  write_json(config_copy, stored);

  auto cache = std::make_shared<ImageCache>();
  PipelineInputs in;
  in.source = load_manifest(cfg.paths.source);
  if (in.source.kind != SplitKind::labeled)
    fail(ErrorKind::data, "source manifest " + cfg.paths.source + " is not labeled");
  in.target = load_manifest(cfg.paths.target).as_unlabeled();
  if (!cfg.paths.eval.empty()) in.eval = load_manifest(cfg.paths.eval);

  if (cfg.lab) {
    const fs::path lab_dir = run_dir / "lab";
    if (resume && fs::exists(lab_dir / "source" / "manifest.json")) {
      in.source = load_manifest(lab_dir / "source" / "manifest.json");
    } else {
      const auto src = dataset_lab_stats(in.source, cfg.lab_sample_size, cfg.seed);
      const auto tgt = dataset_lab_stats(in.target, cfg.lab_sample_size, cfg.seed + 1);
      write_json(lab_dir / "lab_stats.json", json{{"source", to_json(src)}, {"target", to_json(tgt)}});
      in.source = lab_align_split(in.source, src, tgt, lab_dir / "source", in.source.name + "_lab");
    }
  }
  if (cfg.class_balance) {
    const auto w = class_balance_weights(in.source);
    for (const auto& e : in.source.entries) in.source_weights.push_back(w.weights.at(e.image_id));
  }

  PipelineOptions opt = cfg.pipeline_options(run_dir);
  opt.resume = resume;
  opt.interrupt_after_cotrain_cycle = stop_after;
  if (!dump_collages.empty()) opt.dump_collages = fs::path(dump_collages);
  const int num_classes = in.source.label_space.num_classes();
  auto factory = make_factory(cfg, run_dir, num_classes, cache);
  auto p = std::make_unique<Pipeline>(std::move(in), opt, std::move(factory), cache);
  return {std::move(cfg), run_dir, std::move(p)};
}

void print_model(Pipeline& p, const std::string& label, const ModelHandle& model) {
  std::cout << label << ": " << model.weights;
  if (auto ev = p.evaluate(model)) std::cout << std::fixed << std::setprecision(2) << "  mIoU "
                                             << ev->miou * 100.0;
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training and co-training orchestration for synth-to-real segmentation"};
  app.require_subcommand(0, 1);
  GlobalOptions g;
  app.add_option("--config", g.config_file, "JSON run configuration");
  app.add_option("--preset", g.preset_name, "hyper-parameter preset")
      ->check(CLI::IsMember([] {
        std::vector<std::string> names;
        for (const auto& [k, v] : preset_descriptions()) names.push_back(k);
        return names;
      }()));
  app.add_option("--set", g.overrides, "override a config key (key=value)");
  app.add_option("--run-root", g.run_root, "directory holding runs (env COTRAIN_RUN_ROOT)");
  app.add_option("--trainer", g.trainer_exe, "external trainer executable (env COTRAIN_TRAINER)");
  app.add_option("--jobs", g.jobs, "worker cap")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--source", g.source, "labeled source manifest");
  app.add_option("--target", g.target, "unlabeled target manifest");
  app.add_option("--eval", g.eval, "labeled target manifest for metrics");
  app.add_flag("--print-config", g.print_config, "print the resolved config and exit");
  app.add_flag("-v,--verbose", g.verbose);
  app.add_flag("-q,--quiet", g.quiet);

  // toygen
  auto* toygen = app.add_subcommand("toygen", "generate synthetic source/target domains");
  std::string gen_out;
  int gen_source = 200, gen_target = 200, gen_eval = 50, gen_size = 64;
  std::uint64_t gen_seed = 0;
  toygen->add_option("--out", gen_out)->required();
  toygen->add_option("--source-count", gen_source);
  toygen->add_option("--target-count", gen_target);
  toygen->add_option("--eval-count", gen_eval);
  toygen->add_option("--size", gen_size);
  toygen->add_option("--gen-seed", gen_seed);

  // lab-align
  auto* lab = app.add_subcommand("lab-align", "align source images to target LAB statistics");
  std::string lab_src, lab_tgt, lab_out;
  std::size_t lab_sample = 500;
  std::uint64_t lab_seed = 0;
  lab->add_option("--from", lab_src, "source manifest")->required();
  lab->add_option("--to", lab_tgt, "target manifest")->required();
  lab->add_option("--out", lab_out)->required();
  lab->add_option("--sample-size", lab_sample);
  lab->add_option("--lab-seed", lab_seed);

  // pipeline stages
  std::string run_name, dump_collages;
  bool resume = false;
  std::optional<int> stop_after;
  auto add_run = [&](CLI::App* sub) {
    sub->add_option("--run", run_name, "run name under the run root")->required();
    sub->add_flag("--resume", resume, "continue from the last persisted cycle");
    sub->add_option("--dump-collages", dump_collages, "write collaged samples here");
  };
  auto* baseline = app.add_subcommand("baseline", "train the source-only model");
  add_run(baseline);
  auto* selftrain = app.add_subcommand("selftrain", "run the self-training stage");
  add_run(selftrain);
  auto* cotrain = app.add_subcommand("cotrain", "run self-training, co-training and final training");
  add_run(cotrain);
  cotrain->add_option("--stop-after-cycle", stop_after, "stop once this co-training cycle is saved");

  // pseudolabel
  auto* pseudo = app.add_subcommand("pseudolabel", "pseudo-label images with a stored model");
  std::string pl_model, pl_images, pl_out;
  int pl_cycle = 0;
  bool pl_ct = false;
  pseudo->add_option("--run", run_name)->required();
  pseudo->add_option("--model", pl_model, "weights tag inside the run, e.g. final")->required();
  pseudo->add_option("--images", pl_images, "manifest of images")->required();
  pseudo->add_option("--out", pl_out)->required();
  pseudo->add_option("--cycle", pl_cycle, "curriculum cycle k");
  pseudo->add_flag("--cotrain-curriculum", pl_ct, "use ct_p_m/ct_p_M");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "per-class IoU and mIoU");
  std::string ev_pred, ev_gt, ev_labels, ev_csv, ev_model;
  int ev_classes = 19;
  evaluate->add_option("--pred", ev_pred, "directory of predicted label PNGs");
  evaluate->add_option("--gt", ev_gt, "directory of ground-truth label PNGs");
  evaluate->add_option("--run", run_name, "run holding --model");
  evaluate->add_option("--model", ev_model, "weights tag inside the run");
  evaluate->add_option("--labels", ev_labels, "toy8 | cityscapes19");
  evaluate->add_option("--classes", ev_classes, "19, 16 or 13 (cityscapes19)");
  evaluate->add_option("--csv", ev_csv, "also write class,iou CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  spdlog::set_level(g.verbose ? spdlog::level::debug
                              : g.quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (g.print_config) {
      std::cout << canonical_dump(to_json(resolve_config(g)));
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cout << app.help();
      return 0;
    }

    if (toygen->parsed()) {
      DomainSpec src = default_source_domain(), tgt = default_target_domain();
      src.width = src.height = tgt.width = tgt.height = gen_size;
      const fs::path out = gen_out;
      generate_split(src, gen_source, gen_seed, true, out / "source", "source");
      generate_split(tgt, gen_target, gen_seed + 1, false, out / "target", "target");
      if (gen_eval > 0) generate_split(tgt, gen_eval, gen_seed + 2, true, out / "eval", "eval");
      write_palette(out / "palette.json", toy_label_space());
      std::cout << "wrote " << out.string() << "/{source,target,eval}/manifest.json\n";
      return 0;
    }

    if (lab->parsed()) {
      const auto src = load_manifest(lab_src);
      const auto tgt = load_manifest(lab_tgt);
      const auto s = dataset_lab_stats(src, lab_sample, lab_seed);
      const auto t = dataset_lab_stats(tgt, lab_sample, lab_seed + 1);
      write_json(fs::path(lab_out) / "lab_stats.json", json{{"source", to_json(s)}, {"target", to_json(t)}});
      lab_align_split(src, s, t, lab_out, src.name + "_lab");
      std::cout << "wrote " << (fs::path(lab_out) / "manifest.json").string() << '\n';
      return 0;
    }

    if (baseline->parsed() || selftrain->parsed() || cotrain->parsed()) {
      auto run = prepare_run(g, run_name, resume, stop_after, dump_collages);
      Pipeline& p = *run.pipeline;
      if (baseline->parsed()) {
        print_model(p, "W_0", p.baseline());
      } else if (selftrain->parsed()) {
        const auto r = p.self_training_stage();
        print_model(p, "W_Km", r.W_Km);
        print_model(p, "W_KM", r.W_KM);
      } else {
        try {
          const auto r = p.co_training();
          print_model(p, "W_1", r.W_1);
          print_model(p, "W_2", r.W_2);
          print_model(p, "final", r.final_model);
        } catch (const Interrupted& e) {
          std::cout << e.what() << "; continue with --resume\n";
        }
      }
      return 0;
    }

    if (pseudo->parsed()) {
      const RunConfig cfg = resolve_config(g);
      const fs::path run_dir = run_root(g) / run_name;
      const auto images = load_manifest(pl_images);
      auto cache = std::make_shared<ImageCache>();
      auto factory = make_factory(cfg, run_dir, images.label_space.num_classes(), cache);
      auto trainer = factory("pseudolabel");
      std::string weights = pl_model;
      if (fs::path(weights).extension() != ".json") weights += ".json";
      CurriculumParams T = cfg.st.T;
      if (pl_ct) {
        T.p_m = cfg.ct.p_m;
        T.p_M = cfg.ct.p_M;
      }
      auto result = run_pseudolabel(*trainer, ModelHandle{pl_model, "pseudolabel", weights},
                                    images.entries, pl_cycle, T, ModelTag::self, cfg.reservoir_cap,
                                    cfg.seed);
      save_pseudo_label_set(pl_out, result.set, result.thresholds);
      std::cout << "wrote " << result.set.size() << " pseudo-labels to " << pl_out << '\n';
      return 0;
    }

    if (evaluate->parsed()) {
      if (!ev_pred.empty()) {
        if (ev_gt.empty()) fail(ErrorKind::config, "--pred needs --gt");
        const LabelSpace space = builtin_label_space(ev_labels.empty() ? "toy8" : ev_labels);
        if (!fs::is_directory(ev_gt)) fail(ErrorKind::data, "not a directory: " + ev_gt);
        std::vector<fs::path> gts;
        for (const auto& e : fs::directory_iterator(ev_gt))
          if (e.path().extension() == ".png") gts.push_back(e.path());
        std::sort(gts.begin(), gts.end());
        if (gts.empty()) fail(ErrorKind::data, "no label PNGs in " + ev_gt);
        ConfusionMatrix cm(space.num_classes());
        for (const auto& gt : gts) {
          const fs::path pred = fs::path(ev_pred) / gt.filename();
          if (!fs::exists(pred)) fail(ErrorKind::data, "missing prediction: " + pred.string());
          cm = confusion_accumulate(read_label_png(pred), read_label_png(gt), space, std::move(cm));
        }
        report(space, iou_per_class(cm), class_setting(space, ev_classes), ev_csv);
        return 0;
      }
      if (ev_model.empty() || run_name.empty())
        fail(ErrorKind::config, "evaluate needs --pred/--gt or --run/--model");
      const RunConfig cfg = resolve_config(g);
      if (cfg.paths.eval.empty()) fail(ErrorKind::config, "paths.eval is not set");
      const auto eval = load_manifest(cfg.paths.eval);
      const LabelSpace space = ev_labels.empty() ? eval.label_space : builtin_label_space(ev_labels);
      const fs::path run_dir = run_root(g) / run_name;
      auto cache = std::make_shared<ImageCache>();
      auto trainer = make_factory(cfg, run_dir, space.num_classes(), cache)("evaluate");
      std::string weights = ev_model;
      if (fs::path(weights).extension() != ".json") weights += ".json";
      const auto ev = evaluate_model(*trainer, ModelHandle{ev_model, "evaluate", weights}, eval, *cache);
      report(space, ev.ious, class_setting(space, ev_classes), ev_csv);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
