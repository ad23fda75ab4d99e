#include "rin/evaluation.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rin/serialize.hpp"

namespace rin {

namespace {

DatasetManifest manifest(std::size_t count, std::vector<ShapeFamily> families, ReflectanceDist refl, LightBox box,
                         std::uint64_t seed, bool labeled) {
  DatasetManifest m;
  m.count = count;
  m.families = std::move(families);
  m.reflectance = refl;
  m.light_box = box;
  m.seed = seed;
  m.labeled = labeled;
  return m;
}

}  // namespace

ExperimentSpec ExperimentSpec::defaults(const std::string& id, std::uint64_t seed) {
  ExperimentSpec s;
  s.id = id;
  s.seed = seed;
  const auto prim = primitive_families();
  const auto uc = ReflectanceDist::UniformColor;
  const LightBox left = LightBox::left();
  // Epoch counts are cut per study so each run fits in 30 minutes on one core.
  s.shader_plan = TrainPlan::shader_default();
  s.supervised_plan = TrainPlan::supervised_default();
  if (id == experiment::kShape) {
    s.train = manifest(2000, prim, uc, left, mix_seed(seed, 1), true);
    s.transfer = manifest(500, novel_families(), uc, left, mix_seed(seed, 2), false);
    s.test_train = manifest(200, prim, uc, left, mix_seed(seed, 3), true);
    s.test_transfer = manifest(200, novel_families(), uc, left, mix_seed(seed, 4), true);
    s.shader_sets = {s.train};
    s.transfer_plan = TrainPlan::transfer_default({group::kNormals});
    s.shader_plan.epochs = 20;
  } else if (id == experiment::kLighting) {
    const LightBox right = LightBox::right();
    s.train = manifest(2000, prim, uc, left, mix_seed(seed, 1), true);
    s.transfer = manifest(500, prim, uc, right, mix_seed(seed, 2), false);
    s.test_train = manifest(200, prim, uc, left, mix_seed(seed, 3), true);
    s.test_transfer = manifest(200, prim, uc, right, mix_seed(seed, 4), true);
    // the shader sees lights from both sides; the decomposition net only left
    s.shader_sets = {s.train, manifest(2000, prim, uc, right, mix_seed(seed, 5), true)};
    s.transfer_plan = TrainPlan::transfer_default({group::kLight});
    s.shader_plan.epochs = 15;
  } else if (id == experiment::kCategory) {
    const auto white = ReflectanceDist::NearWhite;
    s.train = manifest(2000, prim, white, left, mix_seed(seed, 1), true);
    s.transfer = manifest(500, prim, uc, left, mix_seed(seed, 2), false);
    s.test_train = manifest(200, prim, white, left, mix_seed(seed, 3), true);
    s.test_transfer = manifest(200, prim, uc, left, mix_seed(seed, 4), true);
    s.shader_sets = {s.train};
    s.transfer_plan = TrainPlan::transfer_default({group::kReflectance, group::kNormals, group::kLight});
    s.shader_plan.epochs = 20;
    s.supervised_plan.epochs = 40;
    TrainPlan negative = s.transfer_plan;
    negative.labeled_fraction = 0.0;
    negative.seed = mix_seed(seed, 14);
    s.negative_plan = negative;
  } else {
    throw std::invalid_argument("unknown experiment \"" + id + "\"");
  }
  s.shader_plan.seed = mix_seed(seed, 11);
  s.supervised_plan.seed = mix_seed(seed, 12);
  s.transfer_plan.seed = mix_seed(seed, 13);
  return s;
}

void ExperimentSpec::validate() const {
  if (id != experiment::kShape && id != experiment::kLighting && id != experiment::kCategory) {
    throw std::invalid_argument("unknown experiment \"" + id + "\"");
  }
  config.validate();
  auto check_set = [&](const DatasetManifest& m, const char* role, bool labeled) {
    try {
      m.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(role) + ": " + e.what());
    }
    if (m.labeled != labeled) {
      throw std::invalid_argument(std::string(role) + " manifest must be " + (labeled ? "labeled" : "unlabeled"));
    }
    if (m.image_size != config.image_size) {
      throw std::invalid_argument(std::string(role) + " image size " + std::to_string(m.image_size) +
                                  " does not match model image size " + std::to_string(config.image_size));
    }
  };
  check_set(train, "train", true);
  check_set(transfer, "transfer", false);
  check_set(test_train, "test_train", true);
  check_set(test_transfer, "test_transfer", true);
  if (shader_sets.empty()) throw std::invalid_argument("shader_sets is empty");
  for (const auto& m : shader_sets) check_set(m, "shader set", true);
  auto check_plan = [](const TrainPlan& p, Phase phase, const char* role) {
    if (p.phase != phase) {
      throw std::invalid_argument(std::string(role) + " plan must have phase " + phase_name(phase));
    }
    try {
      p.validate();
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(role) + " plan: " + e.what());
    }
  };
  check_plan(shader_plan, Phase::Shader, "shader");
  check_plan(supervised_plan, Phase::Supervised, "supervised");
  check_plan(transfer_plan, Phase::Transfer, "transfer");
  if (negative_plan) check_plan(*negative_plan, Phase::Transfer, "negative");
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{{"id", s.id},
                     {"seed", s.seed},
                     {"config", s.config},
                     {"train", s.train},
                     {"shader_sets", s.shader_sets},
                     {"transfer", s.transfer},
                     {"test_train", s.test_train},
                     {"test_transfer", s.test_transfer},
                     {"shader_plan", s.shader_plan},
                     {"supervised_plan", s.supervised_plan},
                     {"transfer_plan", s.transfer_plan},
                     {"report_dir", s.report_dir}};
  j["negative_plan"] = s.negative_plan ? nlohmann::json(*s.negative_plan) : nlohmann::json(nullptr);
}

// Fields not given keep the defaults of the experiment id and seed.
void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  s = ExperimentSpec::defaults(j.at("id").get<std::string>(), j.value("seed", std::uint64_t(0)));
  if (j.contains("config")) s.config = j["config"].get<RinConfig>();
  if (j.contains("train")) s.train = j["train"].get<DatasetManifest>();
  if (j.contains("shader_sets")) s.shader_sets = j["shader_sets"].get<std::vector<DatasetManifest>>();
  if (j.contains("transfer")) s.transfer = j["transfer"].get<DatasetManifest>();
  if (j.contains("test_train")) s.test_train = j["test_train"].get<DatasetManifest>();
  if (j.contains("test_transfer")) s.test_transfer = j["test_transfer"].get<DatasetManifest>();
  if (j.contains("shader_plan")) s.shader_plan = j["shader_plan"].get<TrainPlan>();
  if (j.contains("supervised_plan")) s.supervised_plan = j["supervised_plan"].get<TrainPlan>();
  if (j.contains("transfer_plan")) s.transfer_plan = j["transfer_plan"].get<TrainPlan>();
  if (j.contains("negative_plan")) {
    s.negative_plan = j["negative_plan"].is_null() ? std::nullopt
                                                   : std::optional<TrainPlan>(j["negative_plan"].get<TrainPlan>());
  }
  s.report_dir = j.value("report_dir", s.report_dir);
}

Metrics relative_improvement(const Metrics& b, const Metrics& a) {
  auto rel = [](double before, double after) { return before == 0.0 ? 0.0 : (before - after) / before; };
  return {rel(b.reflectance, a.reflectance), rel(b.normals, a.normals), rel(b.lights, a.lights),
          rel(b.shading, a.shading), rel(b.render, a.render)};
}

namespace {

nlohmann::json probe_json(const std::vector<ProbePoint>& probe) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : probe) {
    arr.push_back({{"epoch", p.epoch},
                   {"reflectance_vs_image", p.probe.reflectance_vs_image},
                   {"reflectance_vs_truth", p.probe.reflectance_vs_truth}});
  }
  return arr;
}

std::vector<ProbePoint> probe_from_json(const nlohmann::json& arr) {
  std::vector<ProbePoint> out;
  for (const auto& p : arr) {
    out.push_back({p.at("epoch").get<std::size_t>(),
                   {p.at("reflectance_vs_image").get<double>(), p.at("reflectance_vs_truth").get<double>()}});
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const Report& r) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : r.domains) {
    domains.push_back({{"name", d.name},
                       {"before", d.before},
                       {"after", d.after},
                       {"improvement", relative_improvement(d.before, d.after)}});
  }
  j = nlohmann::json{{"experiment", r.experiment},
                     {"seed", r.seed},
                     {"update_groups", r.update_groups},
                     {"shader_mse", r.shader_mse},
                     {"domains", std::move(domains)},
                     {"degenerate_probe",
                      {{"half_half", probe_json(r.probe_standard)},
                       {"reconstruction_only", probe_json(r.probe_reconstruction)}}}};
}

void from_json(const nlohmann::json& j, Report& r) {
  r.experiment = j.at("experiment").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.update_groups = j.at("update_groups").get<std::vector<std::string>>();
  r.shader_mse = j.at("shader_mse").get<double>();
  r.domains.clear();
  for (const auto& d : j.at("domains")) {
    r.domains.push_back({d.at("name").get<std::string>(), d.at("before").get<Metrics>(), d.at("after").get<Metrics>()});
  }
  const auto& probe = j.at("degenerate_probe");
  r.probe_standard = probe_from_json(probe.at("half_half"));
  r.probe_reconstruction = probe_from_json(probe.at("reconstruction_only"));
}

const DomainResult& find_domain(const Report& r, const std::string& name) {
  for (const auto& d : r.domains) {
    if (d.name == name) return d;
  }
  throw std::invalid_argument("report has no domain \"" + name + "\"");
}

namespace {

constexpr const char* kColumns[] = {"Reflectance", "Shape", "Lights", "Shading", "Render"};

std::array<double, 5> values(const Metrics& m) { return {m.reflectance, m.normals, m.lights, m.shading, m.render}; }

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

void row(std::ostringstream& os, const std::string& label, const std::array<std::string, 5>& cells) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%-18s", label.c_str());
  os << buf;
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%13s", c.c_str());
    os << buf;
  }
  os << '\n';
}

}  // namespace

std::string report_table(const Report& r) {
  std::ostringstream os;
  os << "experiment: " << r.experiment << "  seed: " << r.seed << "  updated:";
  for (const auto& g : r.update_groups) os << ' ' << g;
  os << '\n';
  for (const auto& d : r.domains) {
    os << '\n' << d.name << '\n';
    row(os, "", {kColumns[0], kColumns[1], kColumns[2], kColumns[3], kColumns[4]});
    std::array<std::string, 5> before, after, gain;
    const auto b = values(d.before), a = values(d.after), g = values(relative_improvement(d.before, d.after));
    for (std::size_t k = 0; k < 5; ++k) {
      before[k] = format("%.4f", b[k]);
      after[k] = format("%.4f", a[k]);
      gain[k] = format("%.1f%%", 100.0 * g[k]);
    }
    row(os, "Direct transfer", before);
    row(os, "Self-supervised", after);
    row(os, "Improvement", gain);
  }
  return os.str();
}

std::string report_csv(const Report& r) {
  std::ostringstream os;
  os << "experiment,domain,row,reflectance,shape,lights,shading,render\n";
  for (const auto& d : r.domains) {
    auto line = [&](const char* name, const std::array<double, 5>& v) {
      os << r.experiment << ',' << d.name << ',' << name;
      for (double x : v) os << ',' << format("%.9g", x);
      os << '\n';
    };
    line("before", values(d.before));
    line("after", values(d.after));
    line("improvement", values(relative_improvement(d.before, d.after)));
  }
  return os.str();
}

void write_report(const std::filesystem::path& dir, const Report& r) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + (dir / name).string());
    os << text;
  };
  write("report.json", nlohmann::json(r).dump(2) + "\n");
  write("report.csv", report_csv(r));
  write("report.txt", report_table(r));
}

std::optional<std::size_t> degenerate_epoch(const std::vector<ProbePoint>& probe) {
  for (const auto& p : probe) {
    if (p.probe.reflectance_vs_image < p.probe.reflectance_vs_truth) return p.epoch;
  }
  return std::nullopt;
}

Tensor<float> batch_item(const Tensor<float>& batch, std::size_t index) {
  if (batch.rank() != 4 || index >= batch.dim(0)) throw ShapeError("batch_item: bad index or shape");
  const std::size_t each = batch.numel() / batch.dim(0);
  const auto d = batch.data().subspan(index * each, each);
  return Tensor<float>(Shape{batch.dim(1), batch.dim(2), batch.dim(3)}, std::vector<float>(d.begin(), d.end()));
}

Image8 normals_to_rgb(const Tensor<float>& normals, const Tensor<float>& mask) {
  if (normals.rank() != 3 || normals.dim(0) != 3 || mask.rank() != 3 || mask.dim(0) != 1 ||
      mask.dim(1) != normals.dim(1) || mask.dim(2) != normals.dim(2)) {
    throw ShapeError("normals_to_rgb: expected [3,H,W] normals and [1,H,W] mask, got " +
                     shape_str(normals.shape()) + " and " + shape_str(mask.shape()));
  }
  const std::size_t h = normals.dim(1), w = normals.dim(2), plane = h * w;
  Image8 img(w, h, 128);
  for (std::size_t p = 0; p < plane; ++p) {
    if (mask[p] == 0.0f) continue;
    for (std::size_t k = 0; k < 3; ++k) img.rgb[p * 3 + k] = to_byte((double(normals[k * plane + p]) + 1.0) / 2.0);
  }
  return img;
}

Image8 panel(const IntrinsicSample& sample, const Prediction<float>& p, std::size_t index) {
  const Tensor<float>& image = sample.image;
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (p.reflectance.dim(2) != h || p.reflectance.dim(3) != w) {
    throw ShapeError("panel: prediction size does not match the sample");
  }
  const Tensor<float> mask = sample.mask.defined()
                                 ? sample.mask
                                 : batch_item(foreground_mask(reshape(image, Shape{1, 3, h, w})), 0);
  Image8 out(5 * w, sample.labeled ? 2 * h : h);
  auto put = [&](std::size_t r, std::size_t c, const Image8& tile) { blit(out, tile, r * h, c * w); };
  put(0, 0, tensor_to_image(image));
  put(0, 1, tensor_to_image(batch_item(p.reflectance, index)));
  put(0, 2, normals_to_rgb(batch_item(p.normals, index), mask));
  put(0, 3, tensor_to_image(batch_item(p.shading, index)));
  put(0, 4, tensor_to_image(batch_item(p.reconstruction, index)));
  if (sample.labeled) {
    put(1, 0, tensor_to_image(image));
    put(1, 1, tensor_to_image(sample.reflectance));
    put(1, 2, normals_to_rgb(sample.normals, sample.mask));
    put(1, 3, tensor_to_image(sample.shading));
    put(1, 4, tensor_to_image(compose(sample.reflectance, sample.shading)));
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::vector<IntrinsicSample> generate_all(const std::vector<DatasetManifest>& sets) {
  std::vector<IntrinsicSample> out;
  for (const auto& m : sets) {
    auto part = generate_dataset(m);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

void render_panels(Model& model, const std::vector<IntrinsicSample>& test, std::size_t count,
                   const std::filesystem::path& dir, const std::string& prefix) {
  count = std::min(count, test.size());
  if (count == 0) return;
  std::filesystem::create_directories(dir);
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  const auto saved = model.train_groups();
  model.set_train_groups({});
  NoGradGuard no_grad;
  const auto pred = model.reconstruct(make_batch(test, idx).images);
  model.set_train_groups(saved);
  for (std::size_t i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%02zu.png", prefix.c_str(), i);
    write_png(dir / name, panel(test[i], pred, i));
  }
}

}  // namespace

Report run_experiment(const ExperimentSpec& spec, const RunOptions& options) {
  spec.validate();
  const auto start = Clock::now();
  nlohmann::json timing = nlohmann::json::object();
  auto say = [&](const std::string& msg) {
    if (options.progress) options.progress(msg);
  };
  const bool to_disk = !spec.report_dir.empty();
  const std::filesystem::path dir = spec.report_dir;
  if (to_disk) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "experiment.json") << nlohmann::json(spec).dump(2) << '\n';
  }
  auto log_for = [&](const char* name) { return to_disk ? TrainLog(dir / name) : TrainLog(); };

  auto t = Clock::now();
  const auto shader_data = generate_all(spec.shader_sets);
  const auto train = generate_dataset(spec.train);
  const auto transfer = generate_dataset(spec.transfer);
  const auto test_train = generate_dataset(spec.test_train);
  const auto test_transfer = generate_dataset(spec.test_transfer);
  timing["generate"] = seconds_since(t);

  Model model(spec.config, mix_seed(spec.seed, 20));
  auto epoch_note = [&](const EpochRecord& r) {
    say(phase_name(r.phase) + " epoch " + std::to_string(r.epoch) + " loss " + std::to_string(r.loss.total));
  };

  t = Clock::now();
  {
    AdamState adam{spec.shader_plan.adam};
    TrainLog log = log_for("shader.jsonl");
    run_phase(model, spec.shader_plan, {&shader_data, nullptr, &test_train, nullptr}, adam, log, 0, epoch_note);
  }
  timing["shader"] = seconds_since(t);

  t = Clock::now();
  {
    AdamState adam{spec.supervised_plan.adam};
    TrainLog log = log_for("supervised.jsonl");
    run_phase(model, spec.supervised_plan, {&train, nullptr, &test_train, nullptr}, adam, log, 0, epoch_note);
  }
  timing["supervised"] = seconds_since(t);

  Report report;
  report.experiment = spec.id;
  report.seed = spec.seed;
  report.update_groups.assign(spec.transfer_plan.update_groups.begin(), spec.transfer_plan.update_groups.end());
  report.shader_mse = evaluate_shader(model, test_train);
  const Metrics train_before = evaluate(model, test_train);
  const Metrics transfer_before = evaluate(model, test_transfer);
  if (to_disk && options.save_checkpoints) save_checkpoint(dir / "pre_transfer.ckpt", model);
  if (to_disk) render_panels(model, test_transfer, options.panels, dir / "panels", "before");

  if (spec.negative_plan) {
    t = Clock::now();
    Model control = model.clone();
    AdamState adam{spec.negative_plan->adam};
    TrainLog log = log_for("reconstruction_only.jsonl");
    run_phase(control, *spec.negative_plan, {nullptr, &transfer, nullptr, &test_transfer}, adam, log, 0,
              [&](const EpochRecord& r) {
                report.probe_reconstruction.push_back({r.epoch, *r.probe});
                epoch_note(r);
              });
    timing["reconstruction_only"] = seconds_since(t);
  }

  t = Clock::now();
  {
    AdamState adam{spec.transfer_plan.adam};
    TrainLog log = log_for("transfer.jsonl");
    run_phase(model, spec.transfer_plan, {&train, &transfer, nullptr, &test_transfer}, adam, log, 0,
              [&](const EpochRecord& r) {
                report.probe_standard.push_back({r.epoch, *r.probe});
                epoch_note(r);
              });
  }
  timing["transfer"] = seconds_since(t);

  report.domains.push_back({"train-domain", train_before, evaluate(model, test_train)});
  report.domains.push_back({"transfer-domain", transfer_before, evaluate(model, test_transfer)});
  if (to_disk) {
    if (options.save_checkpoints) save_checkpoint(dir / "post_transfer.ckpt", model);
    render_panels(model, test_transfer, options.panels, dir / "panels", "after");
    write_report(dir, report);
    timing["total"] = seconds_since(start);
    std::ofstream(dir / "timing.json") << timing.dump(2) << '\n';
  }
  return report;
}

}  // namespace rin
