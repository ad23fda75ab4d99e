#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "rin/evaluation.hpp"
#include "support/reconstruct_check.hpp"

using namespace rin;

namespace {

Report sample_report() {
  Report r;
  r.experiment = experiment::kCategory;
  r.seed = 7;
  r.update_groups = {group::kLight, group::kNormals, group::kReflectance};
  r.shader_mse = 0.0031;
  r.domains.push_back({"train-domain", {0.01, 0.02, 0.3, 0.004, 0.005}, {0.011, 0.021, 0.31, 0.0041, 0.0052}});
  r.domains.push_back({"transfer-domain", {0.074, 0.035, 0.2, 0.02, 0.035}, {0.048, 0.035, 0.1, 0.01, 0.006}});
  r.probe_standard = {{1, {0.02, 0.01}}, {2, {0.021, 0.009}}};
  r.probe_reconstruction = {{1, {0.02, 0.01}}, {2, {0.008, 0.012}}};
  return r;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Tiny end-to-end experiment: reduced model, 8x8 scenes, a few samples.
ExperimentSpec tiny_spec(const std::string& id, const std::filesystem::path& dir) {
  auto s = ExperimentSpec::defaults(id, 3);
  s.config = rin::testing::reduced_config();
  auto shrink = [](DatasetManifest& m, std::size_t n) {
    m.image_size = 8;
    m.count = n;
  };
  shrink(s.train, 24);
  shrink(s.transfer, 16);
  shrink(s.test_train, 10);
  shrink(s.test_transfer, 10);
  for (auto& m : s.shader_sets) shrink(m, 24);
  for (auto* p : {&s.shader_plan, &s.supervised_plan, &s.transfer_plan}) {
    p->epochs = 2;
    p->batch_size = 8;
  }
  if (s.negative_plan) {
    s.negative_plan->epochs = 2;
    s.negative_plan->batch_size = 8;
  }
  s.report_dir = dir.string();
  return s;
}

}  // namespace

TEST(NormalsToRgb, MapsUnitAxesAndBackground) {
  Tensor<float> n(Shape{3, 1, 3}, std::vector<float>{0, 1, 0, 0, 0, 0, 1, 0, 0});
  Tensor<float> mask(Shape{1, 1, 3}, std::vector<float>{1, 1, 0});
  const auto img = normals_to_rgb(n, mask);
  EXPECT_EQ(std::vector<int>(img.at(0, 0), img.at(0, 0) + 3), (std::vector<int>{128, 128, 255}));
  EXPECT_EQ(std::vector<int>(img.at(0, 1), img.at(0, 1) + 3), (std::vector<int>{255, 128, 128}));
  EXPECT_EQ(std::vector<int>(img.at(0, 2), img.at(0, 2) + 3), (std::vector<int>{128, 128, 128}));
  EXPECT_THROW(normals_to_rgb(mask, mask), ShapeError);
}

TEST(NormalsToRgb, DistinctFrontHemisphereNormalsStayDistinct) {
  // Normals a few quantization steps apart on the front hemisphere map to
  // different colours.
  std::vector<float> v;
  const std::size_t n = 50;
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = 1.5 * double(i) / n, x = std::sin(theta), z = std::cos(theta);
    v.push_back(float(x));
  }
  for (std::size_t i = 0; i < n; ++i) v.push_back(0.0f);
  for (std::size_t i = 0; i < n; ++i) v.push_back(float(std::cos(1.5 * double(i) / n)));
  const auto img = normals_to_rgb(Tensor<float>(Shape{3, 1, n}, v), Tensor<float>(Shape{1, 1, n}, 1.0f));
  std::set<std::array<std::uint8_t, 3>> colours;
  for (std::size_t i = 0; i < n; ++i) colours.insert({img.at(0, i)[0], img.at(0, i)[1], img.at(0, i)[2]});
  EXPECT_EQ(colours.size(), n);
}

TEST(Report, ImprovementFormatting) {
  const auto r = sample_report();
  const auto g = relative_improvement(r.domains[1].before, r.domains[1].after);
  EXPECT_NEAR(g.reflectance, (0.074 - 0.048) / 0.074, 1e-12);
  const auto table = report_table(r);
  EXPECT_NE(table.find("35.1%"), std::string::npos);
  EXPECT_NE(table.find("0.0%"), std::string::npos);  // shape 0.035 -> 0.035
  EXPECT_NE(table.find("82.9%"), std::string::npos);  // render 0.035 -> 0.006
  EXPECT_EQ(relative_improvement(Metrics{}, Metrics{}).render, 0.0);
}

TEST(Report, TableHasFiveChannelColumnsAndBothRows) {
  const auto table = report_table(sample_report());
  for (const char* col : {"Reflectance", "Shape", "Lights", "Shading", "Render"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
  for (const char* rowname : {"Direct transfer", "Self-supervised", "Improvement", "train-domain", "transfer-domain"})
    EXPECT_NE(table.find(rowname), std::string::npos) << rowname;
  // fixed width: every data row has the same length
  std::istringstream lines(table);
  std::string line;
  std::set<std::size_t> widths;
  while (std::getline(lines, line))
    if (line.rfind("Direct", 0) == 0 || line.rfind("Self", 0) == 0 || line.rfind("Improvement", 0) == 0)
      widths.insert(line.size());
  EXPECT_EQ(widths.size(), 1u);
}

TEST(Report, CsvHasOneLinePerRow) {
  const auto csv = report_csv(sample_report());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3);
  EXPECT_EQ(csv.rfind("experiment,domain,row,reflectance,shape,lights,shading,render\n", 0), 0u);
}

TEST(Report, JsonRoundTripAndRewriteIsBitIdentical) {
  const auto r = sample_report();
  const auto back = nlohmann::json(r).get<Report>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(r));
  const auto dir = std::filesystem::temp_directory_path() / "rin_test_report";
  std::filesystem::remove_all(dir);
  write_report(dir / "a", r);
  write_report(dir / "b", nlohmann::json::parse(read_file(dir / "a" / "report.json")).get<Report>());
  for (const char* f : {"report.json", "report.csv", "report.txt"})
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  std::filesystem::remove_all(dir);
  EXPECT_THROW(find_domain(r, "nowhere"), std::invalid_argument);
  EXPECT_EQ(find_domain(r, "transfer-domain").after.render, 0.006);
}

TEST(Report, DegenerateEpochIsFirstCrossing) {
  const auto r = sample_report();
  EXPECT_FALSE(degenerate_epoch(r.probe_standard).has_value());
  EXPECT_EQ(degenerate_epoch(r.probe_reconstruction), 2u);
}

TEST(Panel, LayoutForLabeledAndUnlabeledSamples) {
  DatasetManifest m;
  m.count = 2;
  m.families = primitive_families();
  m.seed = 5;
  auto samples = generate_dataset(m);
  Model model(RinConfig{}, 6);
  const auto pred = model.reconstruct(make_batch(samples).images);
  const auto labeled = panel(samples[1], pred, 1);
  EXPECT_EQ(labeled.width, 160u);
  EXPECT_EQ(labeled.height, 64u);
  auto unlabeled = samples[1];
  unlabeled.labeled = false;
  const auto single = panel(unlabeled, pred, 1);
  EXPECT_EQ(single.width, 160u);
  EXPECT_EQ(single.height, 32u);
  // shading tile is grey: equal channels
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 96; c < 128; ++c) {
      EXPECT_EQ(labeled.at(r + 32, c)[0], labeled.at(r + 32, c)[1]);
      EXPECT_EQ(labeled.at(r + 32, c)[0], labeled.at(r + 32, c)[2]);
    }
  // first tile is the input image itself
  const auto input = tensor_to_image(samples[1].image);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(labeled.at(r, c)[1], input.at(r, c)[1]);
}

TEST(ExperimentSpec, DefaultsFollowTheThreeStudies) {
  const auto shape = ExperimentSpec::defaults(experiment::kShape);
  EXPECT_EQ(shape.train.families, primitive_families());
  EXPECT_EQ(shape.transfer.families, novel_families());
  EXPECT_EQ(shape.transfer_plan.update_groups, std::set<std::string>{group::kNormals});
  EXPECT_FALSE(shape.transfer.labeled);
  EXPECT_EQ(shape.train.count, 2000u);
  EXPECT_EQ(shape.transfer.count, 500u);
  EXPECT_EQ(shape.test_transfer.count, 200u);

  const auto light = ExperimentSpec::defaults(experiment::kLighting);
  EXPECT_LT(light.train.light_box.x.hi, 0.0);
  EXPECT_GT(light.transfer.light_box.x.lo, 0.0);
  EXPECT_GT(light.test_transfer.light_box.x.lo, 0.0);
  EXPECT_EQ(light.transfer_plan.update_groups, std::set<std::string>{group::kLight});

  const auto cat = ExperimentSpec::defaults(experiment::kCategory);
  EXPECT_EQ(cat.train.reflectance, ReflectanceDist::NearWhite);
  EXPECT_EQ(cat.transfer.reflectance, ReflectanceDist::UniformColor);
  EXPECT_EQ(cat.transfer_plan.update_groups,
            (std::set<std::string>{group::kReflectance, group::kNormals, group::kLight}));
  ASSERT_TRUE(cat.negative_plan.has_value());
  EXPECT_EQ(cat.negative_plan->labeled_fraction, 0.0);

  for (const auto* id : {experiment::kShape, experiment::kLighting, experiment::kCategory}) {
    const auto s = ExperimentSpec::defaults(id);
    EXPECT_NO_THROW(s.validate());
    EXPECT_FALSE(s.transfer_plan.update_groups.contains(group::kShader));
  }
  EXPECT_THROW(ExperimentSpec::defaults("style-transfer"), std::invalid_argument);
}

TEST(ExperimentSpec, RejectsInconsistentSpecs) {
  auto s = ExperimentSpec::defaults(experiment::kShape);
  s.transfer.labeled = true;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ExperimentSpec::defaults(experiment::kShape);
  s.test_transfer.labeled = false;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ExperimentSpec::defaults(experiment::kShape);
  s.train.image_size = 64;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ExperimentSpec::defaults(experiment::kShape);
  s.transfer_plan.update_groups.insert(group::kShader);
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = ExperimentSpec::defaults(experiment::kShape);
  s.supervised_plan.phase = Phase::Transfer;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(ExperimentSpec, JsonOverridesOnTopOfDefaults) {
  const auto j = nlohmann::json::parse(R"({"id": "lighting-transfer", "seed": 9, "transfer_plan": {"phase": "transfer", "update_groups": ["light_dec"], "epochs": 4}})");
  const auto s = j.get<ExperimentSpec>();
  EXPECT_EQ(s.seed, 9u);
  EXPECT_EQ(s.transfer_plan.epochs, 4u);
  EXPECT_EQ(s.train.seed, ExperimentSpec::defaults(experiment::kLighting, 9).train.seed);
  const auto full = nlohmann::json(s).get<ExperimentSpec>();
  EXPECT_EQ(nlohmann::json(full), nlohmann::json(s));
}

TEST(RunExperiment, WritesOutputsAndIsReproducible) {
  const auto base = std::filesystem::temp_directory_path() / "rin_test_experiment";
  std::filesystem::remove_all(base);
  const auto a = run_experiment(tiny_spec(experiment::kCategory, base / "a"));
  const auto b = run_experiment(tiny_spec(experiment::kCategory, base / "b"));
  for (const char* f : {"experiment.json", "report.json", "report.csv", "report.txt", "timing.json", "shader.jsonl",
                        "supervised.jsonl", "transfer.jsonl", "reconstruction_only.jsonl", "pre_transfer.ckpt",
                        "post_transfer.ckpt", "panels/before_00.png", "panels/after_03.png"})
    EXPECT_TRUE(std::filesystem::exists(base / "a" / f)) << f;
  for (const char* f : {"report.json", "report.csv", "report.txt", "transfer.jsonl", "reconstruction_only.jsonl",
                        "post_transfer.ckpt", "panels/after_00.png"})
    EXPECT_EQ(read_file(base / "a" / f), read_file(base / "b" / f)) << f;
  EXPECT_EQ(nlohmann::json(a), nlohmann::json(b));
  EXPECT_EQ(a.domains.size(), 2u);
  EXPECT_EQ(a.probe_standard.size(), 2u);
  EXPECT_EQ(a.probe_reconstruction.size(), 2u);
  // the report never carries wall-clock time
  EXPECT_EQ(read_file(base / "a" / "report.json").find("second"), std::string::npos);
  std::filesystem::remove_all(base);
}

TEST(RunExperiment, ShaderIsUntouchedByTransfer) {
  const auto base = std::filesystem::temp_directory_path() / "rin_test_experiment_shader";
  std::filesystem::remove_all(base);
  run_experiment(tiny_spec(experiment::kShape, base));
  const auto pre = load_checkpoint(base / "pre_transfer.ckpt");
  const auto post = load_checkpoint(base / "post_transfer.ckpt");
  const auto gp = pre.model.parameter_groups(), gq = post.model.parameter_groups();
  for (std::size_t g = 0; g < gp.size(); ++g) {
    bool same = true;
    for (std::size_t i = 0; i < gp[g].params.size(); ++i) {
      const auto x = gp[g].params[i].tensor.data(), y = gq[g].params[i].tensor.data();
      same = same && std::equal(x.begin(), x.end(), y.begin());
    }
    EXPECT_EQ(same, gp[g].name != group::kNormals) << gp[g].name;
  }
  std::filesystem::remove_all(base);
}
