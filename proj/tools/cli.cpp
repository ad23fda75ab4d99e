#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "rin/evaluation.hpp"
#include "rin/serialize.hpp"

namespace rin::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string output;
  int verbose = 0;
  bool quiet = false;
};

fs::path output_dir(const Common& c, const std::string& sub) {
  return c.output.empty() ? fs::path(output_root()) / sub : fs::path(c.output);
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void snapshot(const fs::path& dir, const std::string& sub, const Common& c, json body) {
  fs::create_directories(dir);
  body["subcommand"] = sub;
  body["seed_override"] = c.seed ? json(*c.seed) : json(nullptr);
  write_text(dir / "resolved_config.json", body.dump(2) + "\n");
}

std::vector<IntrinsicSample> load_samples(const std::vector<std::string>& dirs, std::size_t& image_size) {
  std::vector<IntrinsicSample> all;
  for (const auto& d : dirs) {
    auto ds = load_dataset(d);
    if (image_size != 0 && ds.manifest.image_size != image_size) {
      throw std::invalid_argument(d + ": images are " + std::to_string(ds.manifest.image_size) + "x" +
                                  std::to_string(ds.manifest.image_size) + ", expected " +
                                  std::to_string(image_size) + "x" + std::to_string(image_size));
    }
    image_size = ds.manifest.image_size;
    all.insert(all.end(), std::make_move_iterator(ds.samples.begin()), std::make_move_iterator(ds.samples.end()));
  }
  return all;
}

void require_size(const Model& model, std::size_t image_size, const std::string& what) {
  if (image_size != 0 && image_size != model.config().image_size) {
    throw std::invalid_argument(what + " has " + std::to_string(image_size) + "x" + std::to_string(image_size) +
                                " images but the model expects " + std::to_string(model.config().image_size) +
                                "x" + std::to_string(model.config().image_size));
  }
}

// ---- gen-data ----

struct GenDataArgs {
  std::string manifest;
};

void cmd_gen_data(const Common& c, const GenDataArgs& a) {
  DatasetManifest m = load_manifest(a.manifest);
  if (c.seed) m.seed = *c.seed;
  m.validate();
  const auto dir = output_dir(c, "gen-data");
  save_dataset(dir, m, generate_dataset(m));
  snapshot(dir, "gen-data", c, {{"manifest_path", a.manifest}, {"manifest", m}});
  if (!c.quiet) std::printf("wrote %zu samples to %s\n", m.count, dir.string().c_str());
}

// ---- train-shader / train / transfer ----

struct TrainArgs {
  std::string plan;
  std::string checkpoint_in;
  std::string checkpoint_out;
  std::string model_config;
  std::vector<std::string> labeled;
  std::string unlabeled;
  std::string test;
  std::optional<std::size_t> epochs;
  bool resume = false;
};

void cmd_train(const Common& c, const TrainArgs& a, Phase phase) {
  json pj = read_json_file(a.plan);
  if (!pj.contains("phase")) {
    pj["phase"] = phase_name(phase);
  } else if (parse_phase(pj["phase"].get<std::string>()) != phase) {
    throw std::invalid_argument("plan phase \"" + pj["phase"].get<std::string>() + "\" does not match this command (" +
                                phase_name(phase) + ")");
  }
  TrainPlan plan;
  try {
    plan = pj.get<TrainPlan>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(a.plan + ": " + e.what());
  }
  if (c.seed) plan.seed = *c.seed;
  if (a.epochs) plan.epochs = *a.epochs;
  if (!a.labeled.empty()) plan.labeled = a.labeled;
  if (!a.unlabeled.empty()) plan.unlabeled = a.unlabeled;
  if (!a.test.empty()) plan.test = a.test;
  plan.validate();

  const bool needs_labeled = phase != Phase::Transfer || plan.labeled_fraction > 0.0;
  if (needs_labeled && plan.labeled.empty()) throw std::invalid_argument("plan names no labeled dataset");
  if (phase == Phase::Transfer && plan.unlabeled.empty()) throw std::invalid_argument("plan names no unlabeled dataset");
  if (phase == Phase::Transfer && a.checkpoint_in.empty()) {
    throw std::invalid_argument("transfer starts from a trained model: pass --checkpoint-in");
  }
  if (a.resume && a.checkpoint_in.empty()) throw std::invalid_argument("--resume needs --checkpoint-in");

  std::size_t size = 0;
  const auto labeled = needs_labeled ? load_samples(plan.labeled, size) : std::vector<IntrinsicSample>{};
  const auto unlabeled =
      phase == Phase::Transfer ? load_samples({plan.unlabeled}, size) : std::vector<IntrinsicSample>{};
  const auto test = plan.test.empty() ? std::vector<IntrinsicSample>{} : load_samples({plan.test}, size);

  std::optional<LoadedCheckpoint> loaded;
  if (!a.checkpoint_in.empty()) loaded = load_checkpoint(a.checkpoint_in);
  RinConfig config;
  if (!a.model_config.empty()) {
    try {
      config = read_json_file(a.model_config).get<RinConfig>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(a.model_config + ": " + e.what());
    }
    if (loaded && !(loaded->model.config() == config)) {
      throw std::invalid_argument("--model-config does not match the checkpoint's configuration");
    }
  } else if (!loaded) {
    config.image_size = size;
  }
  config.validate();
  Model model = loaded ? std::move(loaded->model) : Model(config, mix_seed(plan.seed, 20));
  require_size(model, size, "the plan's data");

  AdamState adam(plan.adam);
  std::size_t first_epoch = 0;
  if (a.resume) {
    const auto& meta = loaded->extras.meta;
    if (!meta.contains("training") || meta["training"].value("phase", "") != phase_name(phase)) {
      throw std::invalid_argument("checkpoint was not written by a " + phase_name(phase) + " run; cannot resume");
    }
    auto restored = restore_adam_state(loaded->extras);
    if (!restored) throw std::invalid_argument("checkpoint holds no optimizer state; cannot resume");
    adam = std::move(*restored);
    first_epoch = meta["training"].at("epochs").get<std::size_t>();
  }

  const auto dir = output_dir(c, phase_name(phase));
  fs::create_directories(dir);
  const fs::path ckpt_out = a.checkpoint_out.empty() ? dir / "model.ckpt" : fs::path(a.checkpoint_out);
  snapshot(dir, phase_name(phase), c,
           {{"plan", plan},
            {"model", model.config()},
            {"checkpoint_in", a.checkpoint_in},
            {"checkpoint_out", ckpt_out.string()},
            {"resume", a.resume},
            {"first_epoch", first_epoch}});

  TrainLog log(dir / (phase_name(phase) + ".jsonl"), a.resume);
  TrainData data;
  if (needs_labeled) data.labeled = &labeled;
  if (phase == Phase::Transfer) data.unlabeled = &unlabeled;
  if (!test.empty()) {
    data.test = &test;
    if (phase == Phase::Transfer) data.probe = &test;
  }
  run_phase(model, plan, data, adam, log, first_epoch, [&](const EpochRecord& r) {
    if (c.verbose > 0) std::printf("%s epoch %zu loss %.6f\n", phase_name(phase).c_str(), r.epoch, r.loss.total);
  });

  CheckpointExtras extras;
  extras.meta["training"] = {{"phase", phase_name(phase)}, {"epochs", first_epoch + plan.epochs}};
  append_adam_state(extras, adam);
  if (ckpt_out.has_parent_path()) fs::create_directories(ckpt_out.parent_path());
  save_checkpoint(ckpt_out, model, extras);
  if (!c.quiet) {
    const auto& recs = log.records();
    std::printf("%s: %zu epochs (through epoch %zu), step %llu, final loss %.6f\ncheckpoint: %s\n",
                phase_name(phase).c_str(), plan.epochs, first_epoch + plan.epochs,
                static_cast<unsigned long long>(adam.step), recs.empty() ? 0.0 : recs.back().loss.total,
                ckpt_out.string().c_str());
  }
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string test;
  bool passthrough = false;
};

std::string metrics_text(const Metrics& m) {
  const char* names[5] = {"Reflectance", "Shape", "Lights", "Shading", "Render"};
  const double v[5] = {m.reflectance, m.normals, m.lights, m.shading, m.render};
  char buf[64];
  std::string head, row;
  std::snprintf(buf, sizeof buf, "%-18s", "");
  head = buf;
  std::snprintf(buf, sizeof buf, "%-18s", "MSE");
  row = buf;
  for (int k = 0; k < 5; ++k) {
    std::snprintf(buf, sizeof buf, "%13s", names[k]);
    head += buf;
    std::snprintf(buf, sizeof buf, "%13.4f", v[k]);
    row += buf;
  }
  return head + "\n" + row + "\n";
}

void cmd_eval(const Common& c, const EvalArgs& a) {
  std::size_t size = 0;
  const auto test = load_samples({a.test}, size);
  json report = {{"test", a.test}, {"passthrough", a.passthrough}};
  Metrics m;
  if (a.passthrough) {
    m = evaluate_passthrough(test);
  } else {
    if (a.checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint (or --passthrough)");
    auto loaded = load_checkpoint(a.checkpoint);
    require_size(loaded.model, size, a.test);
    m = evaluate(loaded.model, test);
    report["checkpoint"] = a.checkpoint;
    report["shader_mse"] = evaluate_shader(loaded.model, test);
  }
  report["metrics"] = m;

  const auto dir = output_dir(c, "eval");
  snapshot(dir, "eval", c, {{"checkpoint", a.checkpoint}, {"test", a.test}, {"passthrough", a.passthrough}});
  write_text(dir / "report.json", report.dump(2) + "\n");
  char csv[256];
  std::snprintf(csv, sizeof csv, "reflectance,shape,lights,shading,render\n%.9g,%.9g,%.9g,%.9g,%.9g\n", m.reflectance,
                m.normals, m.lights, m.shading, m.render);
  write_text(dir / "report.csv", csv);
  write_text(dir / "report.txt", metrics_text(m));
  if (!c.quiet) std::fputs(metrics_text(m).c_str(), stdout);
}

// ---- render ----

struct RenderArgs {
  std::string checkpoint;
  std::vector<std::string> images;
  std::string dataset;
  std::size_t count = 4;
};

void cmd_render(const Common& c, const RenderArgs& a) {
  if (a.images.empty() && a.dataset.empty()) throw std::invalid_argument("render needs PNG inputs or --dataset");
  auto loaded = load_checkpoint(a.checkpoint);
  Model& model = loaded.model;
  const std::size_t n = model.config().image_size;

  std::vector<std::pair<IntrinsicSample, std::string>> work;
  for (const auto& path : a.images) {
    const Image8 img = read_png(path);
    if (img.width != n || img.height != n) {
      throw std::invalid_argument(path + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                  ", expected " + std::to_string(n) + "x" + std::to_string(n));
    }
    IntrinsicSample s;
    s.image = image_to_tensor(img);
    s.labeled = false;
    work.emplace_back(std::move(s), fs::path(path).stem().string() + "_panel.png");
  }
  if (!a.dataset.empty()) {
    std::size_t size = 0;
    auto samples = load_samples({a.dataset}, size);
    require_size(model, size, a.dataset);
    for (std::size_t i = 0; i < std::min(a.count, samples.size()); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "sample_%06zu_panel.png", i);
      work.emplace_back(std::move(samples[i]), name);
    }
  }

  const auto dir = output_dir(c, "render");
  snapshot(dir, "render", c,
           {{"checkpoint", a.checkpoint}, {"images", a.images}, {"dataset", a.dataset}, {"count", a.count}});
  model.set_train_groups({});
  NoGradGuard no_grad;
  for (const auto& [sample, name] : work) {
    const auto pred = model.reconstruct(make_batch({sample}).images);
    write_png(dir / name, panel(sample, pred, 0));
    if (c.verbose > 0) std::printf("wrote %s\n", (dir / name).string().c_str());
  }
  if (!c.quiet) std::printf("wrote %zu panels to %s\n", work.size(), dir.string().c_str());
}

// ---- experiment ----

struct ExperimentArgs {
  std::string spec;
  std::optional<std::size_t> shader_epochs;
  std::optional<std::size_t> supervised_epochs;
  std::optional<std::size_t> transfer_epochs;
  std::size_t panels = 4;
};

void cmd_experiment(const Common& c, const ExperimentArgs& a) {
  ExperimentSpec spec;
  const bool known_id =
      a.spec == experiment::kShape || a.spec == experiment::kLighting || a.spec == experiment::kCategory;
  if (known_id && !fs::exists(a.spec)) {
    spec = ExperimentSpec::defaults(a.spec, c.seed.value_or(0));
  } else if (!fs::exists(a.spec)) {
    throw std::invalid_argument("\"" + a.spec + "\" is neither a known experiment nor a spec file");
  } else {
    json j = read_json_file(a.spec);
    if (c.seed) j["seed"] = *c.seed;
    try {
      spec = j.get<ExperimentSpec>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(a.spec + ": " + e.what());
    }
  }
  if (a.shader_epochs) spec.shader_plan.epochs = *a.shader_epochs;
  if (a.supervised_epochs) spec.supervised_plan.epochs = *a.supervised_epochs;
  if (a.transfer_epochs) {
    spec.transfer_plan.epochs = *a.transfer_epochs;
    if (spec.negative_plan) spec.negative_plan->epochs = *a.transfer_epochs;
  }
  if (!c.output.empty() || spec.report_dir.empty()) spec.report_dir = output_dir(c, spec.id).string();
  spec.validate();
  snapshot(spec.report_dir, "experiment", c, {{"spec", spec}});

  RunOptions options;
  options.panels = a.panels;
  if (c.verbose > 0) options.progress = [](const std::string& line) { std::printf("%s\n", line.c_str()); };
  const Report report = run_experiment(spec, options);
  if (!c.quiet) {
    std::fputs(report_table(report).c_str(), stdout);
    std::printf("report: %s\n", (fs::path(spec.report_dir) / "report.txt").string().c_str());
  }
}

}  // namespace

std::string output_root() {
  const char* env = std::getenv("RIN_OUTPUT_ROOT");
  return env && *env ? env : "rin_runs";
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Rendered intrinsics network lab: data generation, training, transfer and evaluation", "rin"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Override the seed of the config");
  app.add_option("-o,--output", common.output, "Output directory (default: $RIN_OUTPUT_ROOT/<command>)");
  app.add_flag("-v,--verbose", common.verbose, "Print per-epoch progress");
  app.add_flag("-q,--quiet", common.quiet, "Print nothing on success");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a dataset from a manifest");
  gen_cmd->add_option("manifest", gen.manifest, "Dataset manifest JSON")->required();

  TrainArgs train;
  auto add_train_options = [&](CLI::App* cmd) {
    cmd->add_option("plan", train.plan, "Training plan JSON")->required();
    cmd->add_option("-i,--checkpoint-in", train.checkpoint_in, "Start from this checkpoint");
    cmd->add_option("--checkpoint-out", train.checkpoint_out, "Checkpoint to write (default: <output>/model.ckpt)");
    cmd->add_option("--model-config", train.model_config, "Model configuration JSON for a fresh model");
    cmd->add_option("--labeled", train.labeled, "Labeled dataset directories (override the plan)");
    cmd->add_option("--unlabeled", train.unlabeled, "Unlabeled dataset directory (overrides the plan)");
    cmd->add_option("--test", train.test, "Labeled test dataset evaluated every epoch");
    cmd->add_option("--epochs", train.epochs, "Override the plan's epoch count");
    cmd->add_flag("--resume", train.resume, "Continue the checkpoint's run: optimizer state, step and epoch count");
  };
  auto* shader_cmd = app.add_subcommand("train-shader", "Fit the shader to rendered shading");
  add_train_options(shader_cmd);
  auto* train_cmd = app.add_subcommand("train", "Supervised training of the decomposition");
  add_train_options(train_cmd);
  auto* transfer_cmd = app.add_subcommand("transfer", "Self-supervised transfer with the shader frozen");
  add_train_options(transfer_cmd);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Per-channel MSE report on a labeled test set");
  eval_cmd->add_option("test", eval.test, "Labeled dataset directory")->required();
  eval_cmd->add_option("-c,--checkpoint", eval.checkpoint, "Model checkpoint");
  eval_cmd->add_flag("--passthrough", eval.passthrough, "Score the ground truth as the prediction (all zeros)");

  RenderArgs render;
  auto* render_cmd = app.add_subcommand("render", "Write decomposition panels");
  render_cmd->add_option("images", render.images, "Input PNG images at the model's size");
  render_cmd->add_option("-c,--checkpoint", render.checkpoint, "Model checkpoint")->required();
  render_cmd->add_option("--dataset", render.dataset, "Dataset directory; labeled samples get a ground-truth row");
  render_cmd->add_option("--count", render.count, "Samples taken from --dataset");

  ExperimentArgs exp;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a full transfer study and write its report");
  exp_cmd->add_option("spec", exp.spec, "shape-transfer, lighting-transfer, category-transfer, or a spec JSON")
      ->required();
  exp_cmd->add_option("--shader-epochs", exp.shader_epochs, "Override the shader phase epochs");
  exp_cmd->add_option("--supervised-epochs", exp.supervised_epochs, "Override the supervised phase epochs");
  exp_cmd->add_option("--transfer-epochs", exp.transfer_epochs, "Override the transfer (and control) epochs");
  exp_cmd->add_option("--panels", exp.panels, "Before/after panels to render");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidationFailure;
  }

  try {
    if (gen_cmd->parsed()) cmd_gen_data(common, gen);
    if (shader_cmd->parsed()) cmd_train(common, train, Phase::Shader);
    if (train_cmd->parsed()) cmd_train(common, train, Phase::Supervised);
    if (transfer_cmd->parsed()) cmd_train(common, train, Phase::Transfer);
    if (eval_cmd->parsed()) cmd_eval(common, eval);
    if (render_cmd->parsed()) cmd_render(common, render);
    if (exp_cmd->parsed()) cmd_experiment(common, exp);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidationFailure;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidationFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failed: %s\n", e.what());
    return kRuntimeFailure;
  }
  return kOk;
}

}  // namespace rin::cli
