#include "rin/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "rin/rng.hpp"
#include "rin/serialize.hpp"

namespace rin {

void to_json(nlohmann::json& j, const AdamConfig& c) {
  j = nlohmann::json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

// Missing keys keep the values already in `c`.
void from_json(const nlohmann::json& j, AdamConfig& c) {
  const AdamConfig d = c;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
}

void adam_step(AdamState& state, const std::vector<NamedTensor<float>>& params) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::invalid_argument("adam: parameter " + p.name + " has no gradient");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = double(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& p : params) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    const std::size_t n = p.tensor.numel();
    if (m.empty()) {
      m.assign(n, 0.0f);
      v.assign(n, 0.0f);
    }
    if (m.size() != n) throw std::invalid_argument("adam: moment size mismatch for " + p.name);
    auto value = Tensor<float>(p.tensor).mutable_data();
    const auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = float(mi);
      v[i] = float(vi);
      value[i] = float(value[i] - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
    }
  }
}

std::vector<NamedTensor<float>> group_parameters(const Model& model, const std::set<std::string>& groups) {
  std::vector<NamedTensor<float>> out;
  for (const auto& g : model.parameter_groups()) {
    if (!groups.contains(g.name)) continue;
    out.insert(out.end(), g.params.begin(), g.params.end());
  }
  return out;
}

void append_adam_state(CheckpointExtras& extras, const AdamState& state) {
  extras.meta["adam"] = {{"step", state.step}, {"config", state.config}};
  for (const auto& [name, m] : state.m) {
    const auto& v = state.v.at(name);
    extras.tensors.push_back({"adam.m." + name, Tensor<float>(Shape{m.size()}, m)});
    extras.tensors.push_back({"adam.v." + name, Tensor<float>(Shape{v.size()}, v)});
  }
}

std::optional<AdamState> restore_adam_state(const CheckpointExtras& extras) {
  if (!extras.meta.contains("adam")) return std::nullopt;
  AdamState s;
  s.step = extras.meta["adam"].at("step").get<std::uint64_t>();
  s.config = extras.meta["adam"].at("config").get<AdamConfig>();
  for (const auto& t : extras.tensors) {
    const auto data = t.tensor.data();
    if (t.name.starts_with("adam.m.")) s.m[t.name.substr(7)].assign(data.begin(), data.end());
    if (t.name.starts_with("adam.v.")) s.v[t.name.substr(7)].assign(data.begin(), data.end());
  }
  return s;
}

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::Supervised:
      return "supervised";
    case Phase::Shader:
      return "shader";
    case Phase::Transfer:
      return "transfer";
  }
  return "?";
}

Phase parse_phase(const std::string& name) {
  if (name == "supervised") return Phase::Supervised;
  if (name == "shader") return Phase::Shader;
  if (name == "transfer") return Phase::Transfer;
  throw std::invalid_argument("unknown phase \"" + name + "\"");
}

void TrainPlan::validate() const {
  if (batch_size < 2) throw std::invalid_argument("plan: batch_size must be at least 2");
  if (update_groups.empty()) throw std::invalid_argument("plan: update_groups is empty");
  for (const auto& g : update_groups) {
    if (std::find(group::kAll.begin(), group::kAll.end(), g) == group::kAll.end()) {
      throw std::invalid_argument("plan: unknown parameter group \"" + g + "\"");
    }
  }
  for (double w : {weights.reflectance, weights.normals, weights.lights, weights.reconstruction}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("plan: loss weights must be finite and >= 0");
  }
  if (!(adam.lr > 0.0)) throw std::invalid_argument("plan: learning rate must be positive");
  switch (phase) {
    case Phase::Supervised:
      if (update_groups.contains(group::kShader)) {
        throw std::invalid_argument("plan: the supervised phase does not train the shader");
      }
      break;
    case Phase::Shader:
      if (update_groups != std::set<std::string>{group::kShader}) {
        throw std::invalid_argument("plan: the shader phase updates exactly {shader}");
      }
      break;
    case Phase::Transfer:
      if (update_groups.contains(group::kShader)) {
        throw std::invalid_argument("plan: transfer must not update the shader");
      }
      if (batch_size % 2 != 0) throw std::invalid_argument("plan: transfer batch_size must be even");
      if (labeled_fraction != 0.5 && labeled_fraction != 0.0) {
        throw std::invalid_argument("plan: labeled_fraction must be 0.5 (half/half) or 0 (reconstruction only)");
      }
      break;
  }
}

TrainPlan TrainPlan::supervised_default() {
  TrainPlan p;
  p.phase = Phase::Supervised;
  p.update_groups = {group::kEncoder, group::kReflectance, group::kNormals, group::kLight};
  p.epochs = 50;
  return p;
}

TrainPlan TrainPlan::shader_default() {
  TrainPlan p;
  p.phase = Phase::Shader;
  p.update_groups = {group::kShader};
  p.epochs = 50;
  return p;
}

TrainPlan TrainPlan::transfer_default(std::set<std::string> groups) {
  TrainPlan p;
  p.phase = Phase::Transfer;
  p.update_groups = std::move(groups);
  p.epochs = 30;
  p.adam.lr = 3e-4;
  return p;
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"reflectance", w.reflectance},
                     {"normals", w.normals},
                     {"lights", w.lights},
                     {"reconstruction", w.reconstruction}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.reflectance = j.value("reflectance", d.reflectance);
  w.normals = j.value("normals", d.normals);
  w.lights = j.value("lights", d.lights);
  w.reconstruction = j.value("reconstruction", d.reconstruction);
}

void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = nlohmann::json{{"phase", phase_name(p.phase)},
                     {"weights", p.weights},
                     {"update_groups", p.update_groups},
                     {"epochs", p.epochs},
                     {"batch_size", p.batch_size},
                     {"seed", p.seed},
                     {"adam", p.adam},
                     {"labeled_fraction", p.labeled_fraction},
                     {"labeled", p.labeled},
                     {"unlabeled", p.unlabeled},
                     {"test", p.test}};
}

// Missing fields take the phase's defaults.
void from_json(const nlohmann::json& j, TrainPlan& p) {
  const Phase phase = parse_phase(j.at("phase").get<std::string>());
  switch (phase) {
    case Phase::Supervised:
      p = TrainPlan::supervised_default();
      break;
    case Phase::Shader:
      p = TrainPlan::shader_default();
      break;
    case Phase::Transfer:
      p = TrainPlan::transfer_default({group::kNormals});
      break;
  }
  if (j.contains("weights")) p.weights = j["weights"].get<LossWeights>();
  if (j.contains("update_groups")) p.update_groups = j["update_groups"].get<std::set<std::string>>();
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.seed = j.value("seed", p.seed);
  if (j.contains("adam")) from_json(j["adam"], p.adam);
  p.labeled_fraction = j.value("labeled_fraction", p.labeled_fraction);
  if (j.contains("labeled")) {
    if (j["labeled"].is_string()) {
      p.labeled = {j["labeled"].get<std::string>()};
    } else {
      p.labeled = j["labeled"].get<std::vector<std::string>>();
    }
  }
  p.unlabeled = j.value("unlabeled", p.unlabeled);
  p.test = j.value("test", p.test);
}

Tensor<float> light_tensor(const std::vector<LightParams>& lights) {
  Tensor<float> t(Shape{lights.size(), 4});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < lights.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) d[i * 4 + k] = float(lights[i].position[k]);
    d[i * 4 + 3] = float(lights[i].intensity);
  }
  return t;
}

namespace {

Tensor<float> stack(const std::vector<IntrinsicSample>& samples, const std::vector<std::size_t>& indices,
                    Tensor<float> IntrinsicSample::*field) {
  const Tensor<float>& first = samples[indices[0]].*field;
  Shape shape{indices.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  const std::size_t each = first.numel();
  Tensor<float> out(shape);
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor<float>& t = samples[indices[i]].*field;
    if (!t.defined() || t.shape() != first.shape()) throw ShapeError("make_batch: inconsistent sample shapes");
    std::copy(t.data().begin(), t.data().end(), d.begin() + std::ptrdiff_t(i * each));
  }
  return out;
}

double sse(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s;
}

void zero_grads(const std::vector<NamedTensor<float>>& params) {
  for (auto p : params) p.tensor.zero_grad();
}

std::vector<NamedTensor<float>> prepare(Model& model, const std::set<std::string>& groups) {
  model.set_trainable(groups);
  model.set_train_groups(groups);
  auto params = group_parameters(model, groups);
  zero_grads(params);
  return params;
}

Tensor<float> supervised_loss(Model& model, const Batch& batch, const LossWeights& w, StepLosses& out) {
  if (!batch.labeled) throw std::invalid_argument("supervised loss: batch contains unlabeled samples");
  const auto d = model.decompose(batch.images);
  const auto lr = mse(d.reflectance, batch.reflectance);
  const auto ln = mse(d.normals, batch.normals);
  const auto ll = mse(d.light, batch.lights);
  out.reflectance = lr.item();
  out.normals = ln.item();
  out.lights = ll.item();
  return add(add(scale(lr, float(w.reflectance)), scale(ln, float(w.normals))), scale(ll, float(w.lights)));
}

}  // namespace

Batch make_batch(const std::vector<IntrinsicSample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no samples");
  Batch b;
  b.labeled = true;
  for (std::size_t i : indices) b.labeled = b.labeled && samples.at(i).labeled;
  b.images = stack(samples, indices, &IntrinsicSample::image);
  if (b.labeled) {
    b.reflectance = stack(samples, indices, &IntrinsicSample::reflectance);
    b.normals = stack(samples, indices, &IntrinsicSample::normals);
    b.shading = stack(samples, indices, &IntrinsicSample::shading);
    std::vector<LightParams> lights;
    for (std::size_t i : indices) lights.push_back(samples[i].light);
    b.lights = light_tensor(lights);
  }
  return b;
}

Batch make_batch(const std::vector<IntrinsicSample>& samples) {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  return make_batch(samples, idx);
}

StepLosses supervised_step(Model& model, const Batch& batch, const TrainPlan& plan, AdamState& adam) {
  const auto params = prepare(model, plan.update_groups);
  StepLosses out;
  const auto total = supervised_loss(model, batch, plan.weights, out);
  out.total = total.item();
  total.backward();
  adam_step(adam, params);
  return out;
}

StepLosses shader_step(Model& model, const Batch& batch, AdamState& adam) {
  if (!batch.labeled) throw std::invalid_argument("shader_step: batch needs ground-truth normals and lights");
  const auto params = prepare(model, {group::kShader});
  const auto loss = mse(model.shade(batch.normals, batch.lights), batch.shading);
  StepLosses out;
  out.shading = out.total = loss.item();
  loss.backward();
  adam_step(adam, params);
  return out;
}

StepLosses transfer_step(Model& model, const Batch& labeled, const Batch& unlabeled, const TrainPlan& plan,
                         AdamState& adam) {
  if (plan.update_groups.contains(group::kShader)) {
    throw std::invalid_argument("transfer_step: the shader must stay frozen");
  }
  const bool mixed = labeled.images.defined();
  if (mixed && labeled.size() != unlabeled.size()) {
    throw std::invalid_argument("transfer_step: labeled and unlabeled halves differ in size (" +
                                std::to_string(labeled.size()) + " vs " + std::to_string(unlabeled.size()) + ")");
  }
  const auto params = prepare(model, plan.update_groups);
  StepLosses out;
  Tensor<float> total;
  if (mixed) total = supervised_loss(model, labeled, plan.weights, out);
  const auto pred = model.reconstruct(unlabeled.images);
  const auto rec = mse(pred.reconstruction, unlabeled.images);
  out.reconstruction = rec.item();
  const auto weighted = scale(rec, float(plan.weights.reconstruction));
  total = mixed ? add(total, weighted) : weighted;
  out.total = total.item();
  total.backward();
  adam_step(adam, params);
  return out;
}

void to_json(nlohmann::json& j, const Metrics& m) {
  j = nlohmann::json{{"reflectance", m.reflectance},
                     {"shape", m.normals},
                     {"lights", m.lights},
                     {"shading", m.shading},
                     {"render", m.render}};
}

void from_json(const nlohmann::json& j, Metrics& m) {
  m.reflectance = j.at("reflectance").get<double>();
  m.normals = j.at("shape").get<double>();
  m.lights = j.at("lights").get<double>();
  m.shading = j.at("shading").get<double>();
  m.render = j.at("render").get<double>();
}

namespace {

// Evaluation runs every group in eval mode without recording a tape, then
// restores the caller's modes.
class EvalScope {
 public:
  explicit EvalScope(Model& model) : model_(model), saved_(model.train_groups()) { model_.set_train_groups({}); }
  ~EvalScope() { model_.set_train_groups(saved_); }

 private:
  Model& model_;
  std::set<std::string> saved_;
  NoGradGuard no_grad_;
};

template <typename F>
void for_each_batch(const std::vector<IntrinsicSample>& test, F&& f) {
  for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + kEvalBatch); ++i) idx.push_back(i);
    f(make_batch(test, idx));
  }
}

void require_labeled(const std::vector<IntrinsicSample>& test, const char* what) {
  if (test.empty()) throw std::invalid_argument(std::string(what) + ": empty test set");
  for (const auto& s : test) {
    if (!s.labeled) throw std::invalid_argument(std::string(what) + ": test set must be labeled");
  }
}

struct SseAccumulator {
  double r = 0, n = 0, l = 0, s = 0, i = 0;
  std::size_t image_count = 0, light_count = 0;

  void add(const Batch& b, const Tensor<float>& r_hat, const Tensor<float>& n_hat, const Tensor<float>& l_hat,
           const Tensor<float>& s_hat, const Tensor<float>& i_hat) {
    r += sse(r_hat.data(), b.reflectance.data());
    n += sse(n_hat.data(), b.normals.data());
    l += sse(l_hat.data(), b.lights.data());
    s += sse(s_hat.data(), b.shading.data());
    i += sse(i_hat.data(), b.images.data());
    image_count += b.images.numel();
    light_count += b.lights.numel();
  }

  Metrics result() const {
    const double ni = double(image_count), nl = double(light_count);
    return {r / ni, n / ni, l / nl, s / ni, i / ni};
  }
};

}  // namespace

Metrics evaluate(Model& model, const std::vector<IntrinsicSample>& test) {
  require_labeled(test, "evaluate");
  EvalScope scope(model);
  SseAccumulator acc;
  for_each_batch(test, [&](const Batch& b) {
    const auto p = model.reconstruct(b.images);
    acc.add(b, p.reflectance, p.normals, p.light, p.shading, p.reconstruction);
  });
  return acc.result();
}

Metrics evaluate_passthrough(const std::vector<IntrinsicSample>& test) {
  require_labeled(test, "evaluate");
  SseAccumulator acc;
  for_each_batch(test, [&](const Batch& b) {
    const auto rec = clamp01(multiply(b.reflectance, b.shading));
    acc.add(b, b.reflectance, b.normals, b.lights, b.shading, rec);
  });
  return acc.result();
}

double evaluate_shader(Model& model, const std::vector<IntrinsicSample>& test) {
  require_labeled(test, "evaluate_shader");
  EvalScope scope(model);
  double total = 0.0;
  std::size_t count = 0;
  for_each_batch(test, [&](const Batch& b) {
    total += sse(model.shade(b.normals, b.lights).data(), b.shading.data());
    count += b.shading.numel();
  });
  return total / double(count);
}

DegenerateProbe probe_degenerate(Model& model, const std::vector<IntrinsicSample>& test) {
  require_labeled(test, "probe_degenerate");
  EvalScope scope(model);
  double vs_image = 0.0, vs_truth = 0.0;
  std::size_t count = 0;
  for_each_batch(test, [&](const Batch& b) {
    const auto d = model.decompose(b.images);
    vs_image += sse(d.reflectance.data(), b.images.data());
    vs_truth += sse(d.reflectance.data(), b.reflectance.data());
    count += b.images.numel();
  });
  return {vs_image / double(count), vs_truth / double(count)};
}

void to_json(nlohmann::json& j, const StepLosses& l) {
  j = nlohmann::json{{"reflectance", l.reflectance}, {"normals", l.normals},
                     {"lights", l.lights},           {"reconstruction", l.reconstruction},
                     {"shading", l.shading},         {"total", l.total}};
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"phase", phase_name(r.phase)}, {"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}};
  if (r.test) j["test"] = *r.test;
  if (r.shader_test) j["shader_test"] = *r.shader_test;
  if (r.probe) {
    j["probe"] = {{"reflectance_vs_image", r.probe->reflectance_vs_image},
                  {"reflectance_vs_truth", r.probe->reflectance_vs_truth}};
  }
}

TrainLog::TrainLog(std::filesystem::path path, bool append) : path_(std::move(path)) {
  if (!append) {
    std::ofstream os(*path_, std::ios::trunc);
    if (!os) throw FormatError("cannot open log " + path_->string());
  }
}

void TrainLog::append(const EpochRecord& record) {
  records_.push_back(record);
  if (!path_) return;
  std::ofstream os(*path_, std::ios::app);
  if (!os) throw FormatError("cannot open log " + path_->string());
  os << nlohmann::json(record).dump() << '\n';
}

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t(0));
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

std::vector<std::size_t> take(const std::vector<std::size_t>& perm, std::size_t start, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = perm[(start + i) % perm.size()];
  return out;
}

void accumulate(StepLosses& sum, const StepLosses& s) {
  sum.reflectance += s.reflectance;
  sum.normals += s.normals;
  sum.lights += s.lights;
  sum.reconstruction += s.reconstruction;
  sum.shading += s.shading;
  sum.total += s.total;
}

StepLosses mean(StepLosses s, std::size_t steps) {
  const double k = steps ? 1.0 / double(steps) : 0.0;
  return {s.reflectance * k, s.normals * k, s.lights * k, s.reconstruction * k, s.shading * k, s.total * k};
}

}  // namespace

void run_phase(Model& model, const TrainPlan& plan, const TrainData& data, AdamState& adam, TrainLog& log,
               std::size_t first_epoch, const EpochCallback& on_epoch) {
  plan.validate();
  const bool needs_labeled = plan.phase != Phase::Transfer || plan.labeled_fraction > 0.0;
  if (needs_labeled && (!data.labeled || data.labeled->empty())) {
    throw std::invalid_argument(phase_name(plan.phase) + " phase needs a labeled dataset");
  }
  if (needs_labeled) require_labeled(*data.labeled, "training");
  if (plan.phase == Phase::Transfer && (!data.unlabeled || data.unlabeled->empty())) {
    throw std::invalid_argument("transfer phase needs an unlabeled dataset");
  }

  for (std::size_t e = first_epoch; e < first_epoch + plan.epochs; ++e) {
    Rng rng(mix_seed(plan.seed, e));
    StepLosses sum;
    std::size_t steps = 0;
    if (plan.phase == Phase::Transfer) {
      const auto& unl = *data.unlabeled;
      const std::size_t half = plan.labeled_fraction > 0.0 ? plan.batch_size / 2 : plan.batch_size;
      const auto perm_u = permutation(unl.size(), rng);
      const auto perm_l = needs_labeled ? permutation(data.labeled->size(), rng) : std::vector<std::size_t>{};
      for (std::size_t start = 0; start < unl.size(); start += half) {
        const std::size_t n = std::min(half, unl.size() - start);
        if (n < 2) break;
        const Batch u = make_batch(unl, take(perm_u, start, n));
        const Batch l = needs_labeled ? make_batch(*data.labeled, take(perm_l, start, n)) : Batch{};
        accumulate(sum, transfer_step(model, l, u, plan, adam));
        ++steps;
      }
    } else {
      const auto& lab = *data.labeled;
      const auto perm = permutation(lab.size(), rng);
      for (std::size_t start = 0; start < lab.size(); start += plan.batch_size) {
        const std::size_t n = std::min(plan.batch_size, lab.size() - start);
        if (n < 2) break;
        const Batch b = make_batch(lab, take(perm, start, n));
        accumulate(sum, plan.phase == Phase::Shader ? shader_step(model, b, adam)
                                                    : supervised_step(model, b, plan, adam));
        ++steps;
      }
    }
    EpochRecord rec;
    rec.phase = plan.phase;
    rec.epoch = e + 1;
    rec.step = adam.step;
    rec.loss = mean(sum, steps);
    if (data.test) {
      if (plan.phase == Phase::Shader) {
        rec.shader_test = evaluate_shader(model, *data.test);
      } else {
        rec.test = evaluate(model, *data.test);
      }
    }
    if (data.probe) rec.probe = probe_degenerate(model, *data.probe);
    log.append(rec);
    if (on_epoch) on_epoch(rec);
  }
}

}  // namespace rin
