#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rin/training.hpp"
#include "support/reconstruct_check.hpp"

using namespace rin;

namespace {

std::vector<IntrinsicSample> small_set(std::size_t count, std::uint64_t seed, bool labeled = true,
                                       LightBox box = LightBox::left()) {
  DatasetManifest m;
  m.count = count;
  m.image_size = rin::testing::reduced_config().image_size;
  m.families = primitive_families();
  m.light_box = box;
  m.seed = seed;
  m.labeled = labeled;
  return generate_dataset(m);
}

Model small_model(std::uint64_t seed) { return Model(rin::testing::reduced_config(), seed); }

struct Snapshot {
  std::map<std::string, std::vector<float>> params, buffers;
};

Snapshot snapshot(const Model& model) {
  Snapshot s;
  for (const auto& g : model.parameter_groups()) {
    for (const auto& p : g.params) s.params[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
    for (const auto& b : g.buffers) s.buffers[b.name].assign(b.tensor.data().begin(), b.tensor.data().end());
  }
  return s;
}

// Names of parameters of `group` that changed between two snapshots.
std::size_t changed_in_group(const Model& model, const std::string& group, const Snapshot& a, const Snapshot& b,
                             bool buffers = false) {
  std::size_t n = 0;
  for (const auto& g : model.parameter_groups()) {
    if (g.name != group) continue;
    for (const auto& p : buffers ? g.buffers : g.params) {
      const auto& m = buffers ? a.buffers : a.params;
      const auto& o = buffers ? b.buffers : b.params;
      n += m.at(p.name) != o.at(p.name);
    }
  }
  return n;
}

NamedTensor<float> scalar_param(float value) {
  Tensor<float> t(Shape{1}, value);
  t.set_requires_grad(true);
  return {"x", t};
}

void set_grad(NamedTensor<float>& p, float g) {
  p.tensor.zero_grad();
  p.tensor.mutable_grad()[0] = g;
}

TrainPlan transfer_plan(std::set<std::string> groups) {
  auto p = TrainPlan::transfer_default(std::move(groups));
  p.batch_size = 8;
  p.epochs = 1;
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState state;
  auto p = scalar_param(0.5f);
  set_grad(p, 1.0f);
  adam_step(state, {p});
  EXPECT_NEAR(p.tensor[0] - 0.5f, -1e-3, 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  AdamState state;
  auto p = scalar_param(0.5f);
  for (int i = 0; i < 10; ++i) {
    set_grad(p, 0.0f);
    adam_step(state, {p});
  }
  EXPECT_EQ(p.tensor[0], 0.5f);
  EXPECT_EQ(state.step, 10u);
}

TEST(Adam, UpdatesDecayAfterGradientVanishes) {
  AdamState state;
  auto p = scalar_param(0.0f);
  for (int i = 0; i < 20; ++i) {
    set_grad(p, 1.0f);
    adam_step(state, {p});
  }
  double previous = INFINITY;
  for (int i = 0; i < 30; ++i) {
    const float before = p.tensor[0];
    set_grad(p, 0.0f);
    adam_step(state, {p});
    const double update = std::abs(double(p.tensor[0]) - before);
    EXPECT_LT(update, previous);
    EXPECT_GT(update, 0.0);
    previous = update;
  }
}

TEST(Adam, MatchesClosedFormRecurrence) {
  AdamState state;
  auto p = scalar_param(1.0f);
  double x = 1.0, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -1.2, 0.7, 2.0, -0.1};
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    set_grad(p, float(g));
    adam_step(state, {p});
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p.tensor[0], x, 1e-6);
  }
}

TEST(Adam, MissingGradientRejected) {
  AdamState state;
  auto p = scalar_param(0.0f);
  EXPECT_THROW(adam_step(state, {p}), std::invalid_argument);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, StateSurvivesCheckpointExtras) {
  AdamState state(AdamConfig{2e-3, 0.8, 0.99, 1e-7});
  auto p = scalar_param(0.0f);
  set_grad(p, 0.5f);
  adam_step(state, {p});
  CheckpointExtras extras;
  append_adam_state(extras, state);
  const auto back = restore_adam_state(extras);
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(back->step, 1u);
  EXPECT_EQ(back->config.lr, 2e-3);
  EXPECT_EQ(back->m, state.m);
  EXPECT_EQ(back->v, state.v);
  EXPECT_FALSE(restore_adam_state(CheckpointExtras{}).has_value());
}

TEST(Plan, DefaultsValidate) {
  EXPECT_NO_THROW(TrainPlan::supervised_default().validate());
  EXPECT_NO_THROW(TrainPlan::shader_default().validate());
  EXPECT_NO_THROW(TrainPlan::transfer_default({group::kNormals}).validate());
  const auto s = TrainPlan::supervised_default();
  EXPECT_EQ(s.weights.lights, 0.1);
  EXPECT_EQ(s.weights.reflectance, 1.0);
  EXPECT_EQ(s.adam.lr, 1e-3);
  EXPECT_EQ(s.epochs, 50u);
  EXPECT_EQ(TrainPlan::transfer_default({group::kNormals}).epochs, 30u);
  EXPECT_EQ(TrainPlan::transfer_default({group::kNormals}).adam.lr, 3e-4);
}

TEST(Plan, PartialAdamJsonKeepsPhaseDefaults) {
  const auto p = nlohmann::json{{"phase", "transfer"}, {"adam", {{"beta1", 0.8}}}}.get<TrainPlan>();
  EXPECT_EQ(p.adam.lr, 3e-4);
  EXPECT_EQ(p.adam.beta1, 0.8);
  const auto supervised = nlohmann::json{{"phase", "supervised"}}.get<TrainPlan>();
  EXPECT_EQ(supervised.adam.lr, 1e-3);
}

TEST(Plan, TransferMustNotUpdateShader) {
  EXPECT_THROW(TrainPlan::transfer_default({group::kNormals, group::kShader}).validate(), std::invalid_argument);
}

TEST(Plan, InvalidPlansRejected) {
  auto p = TrainPlan::transfer_default({group::kNormals});
  p.batch_size = 7;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::transfer_default({group::kNormals});
  p.labeled_fraction = 0.25;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::transfer_default({});
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::transfer_default({"decoder"});
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::supervised_default();
  p.update_groups.insert(group::kShader);
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::shader_default();
  p.update_groups.insert(group::kNormals);
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::supervised_default();
  p.weights.lights = -1.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::supervised_default();
  p.batch_size = 1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = TrainPlan::supervised_default();
  p.adam.lr = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Plan, JsonRoundTripAndPhaseDefaults) {
  auto p = TrainPlan::transfer_default({group::kLight});
  p.seed = 42;
  p.labeled = {"a", "b"};
  p.unlabeled = "u";
  const auto back = nlohmann::json(p).get<TrainPlan>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(p));
  const auto partial = nlohmann::json::parse(R"({"phase": "supervised", "epochs": 3, "labeled": "d"})").get<TrainPlan>();
  EXPECT_EQ(partial.epochs, 3u);
  EXPECT_EQ(partial.update_groups, TrainPlan::supervised_default().update_groups);
  EXPECT_EQ(partial.labeled, std::vector<std::string>{"d"});
  EXPECT_THROW(nlohmann::json::parse(R"({"phase": "pretrain"})").get<TrainPlan>(), std::invalid_argument);
}

TEST(Batch, StacksSamplesAndLights) {
  const auto data = small_set(4, 1);
  const auto b = make_batch(data, {2, 0});
  EXPECT_TRUE(b.labeled);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_EQ(b.lights.shape(), (Shape{2, 4}));
  EXPECT_EQ(b.images[0], data[2].image[0]);
  EXPECT_EQ(b.lights[4], float(data[0].light.position[0]));
  EXPECT_EQ(b.lights[7], float(data[0].light.intensity));
  const auto u = make_batch(small_set(2, 2, false));
  EXPECT_FALSE(u.labeled);
  EXPECT_FALSE(u.reflectance.defined());
}

TEST(SupervisedStep, PerfectPredictionsGiveZeroLoss) {
  auto model = small_model(3);
  auto plan = TrainPlan::supervised_default();
  model.set_train_groups(plan.update_groups);
  auto batch = make_batch(small_set(4, 4));
  {
    NoGradGuard guard;
    const auto clone = model.clone();
    auto d = model.decompose(batch.images);
    model.copy_from(clone);  // undo the running-statistics update
    batch.reflectance = d.reflectance;
    batch.normals = d.normals;
    batch.lights = d.light;
  }
  AdamState adam;
  const auto losses = supervised_step(model, batch, plan, adam);
  EXPECT_EQ(losses.reflectance, 0.0);
  EXPECT_EQ(losses.normals, 0.0);
  EXPECT_EQ(losses.lights, 0.0);
  EXPECT_EQ(losses.total, 0.0);
}

TEST(SupervisedStep, RejectsUnlabeledBatch) {
  auto model = small_model(5);
  AdamState adam;
  EXPECT_THROW(supervised_step(model, make_batch(small_set(4, 6, false)), TrainPlan::supervised_default(), adam),
               std::invalid_argument);
}

TEST(SupervisedStep, ZeroLightWeightGivesZeroLightGradients) {
  auto model = small_model(7);
  auto plan = TrainPlan::supervised_default();
  plan.weights.lights = 0.0;
  const auto before = snapshot(model);
  AdamState adam;
  supervised_step(model, make_batch(small_set(4, 8)), plan, adam);
  for (const auto& t : model.parameters(group::kLight)) {
    ASSERT_TRUE(t.has_grad());
    for (float g : t.grad()) EXPECT_EQ(g, 0.0f);
  }
  const auto after = snapshot(model);
  EXPECT_EQ(changed_in_group(model, group::kLight, before, after), 0u);
  EXPECT_GT(changed_in_group(model, group::kNormals, before, after), 0u);
}

TEST(SupervisedStep, UpdatesEveryGroupInThePlanAndNothingElse) {
  auto model = small_model(9);
  const auto before = snapshot(model);
  AdamState adam;
  supervised_step(model, make_batch(small_set(4, 10)), TrainPlan::supervised_default(), adam);
  const auto after = snapshot(model);
  for (const auto& g : {group::kEncoder, group::kReflectance, group::kNormals, group::kLight})
    EXPECT_GT(changed_in_group(model, g, before, after), 0u) << g;
  EXPECT_EQ(changed_in_group(model, group::kShader, before, after), 0u);
  EXPECT_EQ(changed_in_group(model, group::kShader, before, after, true), 0u);
}

TEST(ShaderStep, UpdatesOnlyTheShader) {
  auto model = small_model(11);
  const auto before = snapshot(model);
  AdamState adam;
  const auto losses = shader_step(model, make_batch(small_set(4, 12)), adam);
  EXPECT_GT(losses.shading, 0.0);
  const auto after = snapshot(model);
  for (const auto& g : group::kAll) {
    EXPECT_EQ(changed_in_group(model, g, before, after) > 0, g == group::kShader) << g;
    EXPECT_EQ(changed_in_group(model, g, before, after, true) > 0, g == group::kShader) << g;
  }
}

TEST(TransferStep, FreezingIsBitExact) {
  for (const auto& groups : std::vector<std::set<std::string>>{
           {group::kNormals}, {group::kLight}, {group::kReflectance, group::kNormals, group::kLight}}) {
    auto model = small_model(13);
    const auto before = snapshot(model);
    AdamState adam;
    transfer_step(model, make_batch(small_set(4, 14)), make_batch(small_set(4, 15, false, LightBox::right())),
                  transfer_plan(groups), adam);
    const auto after = snapshot(model);
    for (const auto& g : group::kAll) {
      if (groups.contains(g)) {
        EXPECT_GT(changed_in_group(model, g, before, after), 0u) << g;
      } else {
        EXPECT_EQ(changed_in_group(model, g, before, after), 0u) << g;
        EXPECT_EQ(changed_in_group(model, g, before, after, true), 0u) << g;
      }
    }
  }
}

TEST(TransferStep, ZeroReconstructionWeightEqualsSupervisedStep) {
  const auto labeled = make_batch(small_set(4, 16));
  const auto unlabeled = make_batch(small_set(4, 17, false));
  auto plan = transfer_plan({group::kNormals, group::kLight});
  plan.weights.reconstruction = 0.0;
  auto a = small_model(18), b = small_model(18);
  AdamState adam_a, adam_b;
  transfer_step(a, labeled, unlabeled, plan, adam_a);
  auto sup = plan;
  sup.phase = Phase::Supervised;
  supervised_step(b, labeled, sup, adam_b);
  EXPECT_EQ(snapshot(a).params, snapshot(b).params);
}

TEST(TransferStep, RejectsShaderAndMismatchedHalves) {
  auto model = small_model(19);
  AdamState adam;
  auto plan = transfer_plan({group::kNormals});
  plan.update_groups.insert(group::kShader);
  EXPECT_THROW(transfer_step(model, make_batch(small_set(4, 20)), make_batch(small_set(4, 21, false)), plan, adam),
               std::invalid_argument);
  EXPECT_THROW(transfer_step(model, make_batch(small_set(4, 20)), make_batch(small_set(2, 21, false)),
                             transfer_plan({group::kNormals}), adam),
               std::invalid_argument);
}

TEST(TransferStep, ReconstructionOnlyNeedsNoLabels) {
  auto model = small_model(22);
  AdamState adam;
  auto plan = transfer_plan({group::kReflectance});
  plan.labeled_fraction = 0.0;
  const auto losses = transfer_step(model, Batch{}, make_batch(small_set(4, 23, false)), plan, adam);
  EXPECT_GT(losses.reconstruction, 0.0);
  EXPECT_EQ(losses.reflectance, 0.0);
}

TEST(Evaluate, PassthroughIsAllZero) {
  const auto m = evaluate_passthrough(small_set(60, 24));
  EXPECT_EQ(m.reflectance, 0.0);
  EXPECT_EQ(m.normals, 0.0);
  EXPECT_EQ(m.lights, 0.0);
  EXPECT_EQ(m.shading, 0.0);
  EXPECT_EQ(m.render, 0.0);
}

TEST(Evaluate, RejectsUnlabeledSetsAndRestoresModes) {
  auto model = small_model(25);
  EXPECT_THROW(evaluate(model, small_set(3, 26, false)), std::invalid_argument);
  model.set_train_groups({group::kNormals});
  const auto before = snapshot(model);
  const auto m = evaluate(model, small_set(3, 27));
  EXPECT_GT(m.render, 0.0);
  EXPECT_EQ(model.train_groups(), std::set<std::string>{group::kNormals});
  EXPECT_EQ(snapshot(model).buffers, before.buffers);
}

TEST(Evaluate, MatchesDirectComputation) {
  auto model = small_model(28);
  const auto data = small_set(70, 29);  // spans two evaluation batches
  const auto m = evaluate(model, data);
  model.set_train_groups({});
  NoGradGuard guard;
  const auto b = make_batch(data);
  const auto p = model.reconstruct(b.images);
  EXPECT_NEAR(m.reflectance, mse(p.reflectance, b.reflectance).item(), 1e-6);
  EXPECT_NEAR(m.normals, mse(p.normals, b.normals).item(), 1e-6);
  EXPECT_NEAR(m.lights, mse(p.light, b.lights).item(), 1e-5);
  EXPECT_NEAR(m.shading, mse(p.shading, b.shading).item(), 1e-6);
  EXPECT_NEAR(m.render, mse(p.reconstruction, b.images).item(), 1e-6);
}

TEST(RunPhase, MissingDataRejected) {
  auto model = small_model(30);
  AdamState adam;
  TrainLog log;
  const auto labeled = small_set(8, 31);
  EXPECT_THROW(run_phase(model, transfer_plan({group::kNormals}), {&labeled, nullptr}, adam, log),
               std::invalid_argument);
  EXPECT_THROW(run_phase(model, TrainPlan::supervised_default(), {}, adam, log), std::invalid_argument);
}

TEST(RunPhase, SameSeedGivesIdenticalLogs) {
  const auto labeled = small_set(40, 32);
  const auto unlabeled = small_set(24, 33, false, LightBox::right());
  const auto test = small_set(10, 34);
  auto run = [&](const std::filesystem::path& path, std::uint64_t seed) {
    auto model = small_model(35);
    AdamState adam;
    TrainLog log(path);
    auto sup = TrainPlan::supervised_default();
    sup.epochs = 2;
    sup.batch_size = 8;
    sup.seed = seed;
    run_phase(model, sup, {&labeled, nullptr, &test}, adam, log);
    auto tr = transfer_plan({group::kNormals});
    tr.epochs = 2;
    tr.seed = seed;
    AdamState adam2;
    run_phase(model, tr, {&labeled, &unlabeled, &test, &test}, adam2, log);
    return read_file(path);
  };
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = run(dir / "rin_test_log_a.jsonl", 1);
  const auto b = run(dir / "rin_test_log_b.jsonl", 1);
  const auto c = run(dir / "rin_test_log_c.jsonl", 2);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  // one JSON record per epoch, each with the same schema
  std::istringstream lines(a), other(c);
  std::string la, lc;
  std::size_t n = 0;
  while (std::getline(lines, la) && std::getline(other, lc)) {
    auto ja = nlohmann::json::parse(la), jc = nlohmann::json::parse(lc);
    std::vector<std::string> ka, kc;
    for (auto& [k, v] : ja.items()) ka.push_back(k);
    for (auto& [k, v] : jc.items()) kc.push_back(k);
    EXPECT_EQ(ka, kc);
    ++n;
  }
  EXPECT_EQ(n, 4u);
  for (const auto* name : {"rin_test_log_a.jsonl", "rin_test_log_b.jsonl", "rin_test_log_c.jsonl"})
    std::filesystem::remove(dir / name);
}

TEST(RunPhase, ResumeMatchesUninterruptedRun) {
  const auto labeled = small_set(30, 36);
  auto plan = TrainPlan::supervised_default();
  plan.batch_size = 8;
  plan.seed = 5;

  auto straight = small_model(37);
  AdamState adam_s;
  TrainLog log_s;
  plan.epochs = 3;
  run_phase(straight, plan, {&labeled}, adam_s, log_s);

  auto first = small_model(37);
  AdamState adam_f;
  TrainLog log_f;
  plan.epochs = 1;
  run_phase(first, plan, {&labeled}, adam_f, log_f);
  CheckpointExtras extras;
  append_adam_state(extras, adam_f);
  const auto path = std::filesystem::temp_directory_path() / "rin_test_resume.ckpt";
  save_checkpoint(path, first, extras);
  auto loaded = load_checkpoint(path);
  auto adam_r = *restore_adam_state(loaded.extras);
  plan.epochs = 2;
  run_phase(loaded.model, plan, {&labeled}, adam_r, log_f, 1);
  std::filesystem::remove(path);

  EXPECT_EQ(adam_r.step, adam_s.step);
  EXPECT_EQ(log_f.records().back().epoch, 3u);
  EXPECT_EQ(log_f.records().back().step, log_s.records().back().step);
  EXPECT_EQ(snapshot(loaded.model).params, snapshot(straight).params);
  EXPECT_EQ(snapshot(loaded.model).buffers, snapshot(straight).buffers);
}

TEST(RunPhase, DropsTrailingSingletonBatch) {
  const auto labeled = small_set(9, 38);
  auto model = small_model(39);
  AdamState adam;
  TrainLog log;
  auto plan = TrainPlan::supervised_default();
  plan.batch_size = 4;
  plan.epochs = 1;
  run_phase(model, plan, {&labeled}, adam, log);
  EXPECT_EQ(adam.step, 2u);
}

TEST(ShaderTraining, LearnsAmbientOnlyOracle) {
  LightBox dark = LightBox::left();
  dark.intensity = {0.0, 0.0};
  const auto train = small_set(200, 40, true, dark);
  const auto test = small_set(50, 41, true, dark);
  auto model = small_model(42);
  const double untrained = evaluate_shader(model, test);
  AdamState adam;
  TrainLog log;
  auto plan = TrainPlan::shader_default();
  plan.epochs = 20;
  run_phase(model, plan, {&train}, adam, log);
  const double trained = evaluate_shader(model, test);
  EXPECT_LT(trained, untrained);
  EXPECT_LT(trained, 0.02);
}

// Full-size shader trained on lights whose intensity range includes 0.
TEST(ShaderTraining, RespondsToLightAndZeroIntensityGivesAmbient) {
  DatasetManifest m;
  m.count = 400;
  m.families = primitive_families();
  m.light_box.intensity = {0.0, 1.4};
  m.seed = 46;
  const auto train = generate_dataset(m);
  m.count = 50;
  m.seed = 48;
  const auto test = generate_dataset(m);
  Model model(RinConfig{}, 47);
  AdamState adam;
  TrainLog log;
  auto plan = TrainPlan::shader_default();
  plan.epochs = 10;
  run_phase(model, plan, {&train}, adam, log);
  EXPECT_LT(evaluate_shader(model, test), 0.01);

  model.set_train_groups({});
  NoGradGuard guard;
  const auto b = make_batch(test);
  auto dark = b.lights.detach();
  auto moved = b.lights.detach();
  for (std::size_t n = 0; n < test.size(); ++n) {
    dark.mutable_data()[n * 4 + 3] = 0.0f;
    moved.mutable_data()[n * 4 + 0] = -moved[n * 4 + 0];  // mirror the light to the right side
  }
  const auto s_dark = model.shade(b.normals, dark);
  double total = 0;
  std::size_t fg = 0;
  for (std::size_t i = 0; i < s_dark.numel(); ++i)
    if (b.shading[i] > 0) {
      total += s_dark[i];
      ++fg;
    }
  EXPECT_NEAR(total / fg, kAmbient, 0.05);
  EXPECT_GT(mse(model.shade(b.normals, b.lights), model.shade(b.normals, moved)).item(), 0.0f);
}
