#pragma once

// Experiment harness for the three transfer studies, MSE reports, and
// visualization panels.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rin/image_io.hpp"
#include "rin/training.hpp"

namespace rin {

namespace experiment {
inline constexpr const char* kShape = "shape-transfer";
inline constexpr const char* kLighting = "lighting-transfer";
inline constexpr const char* kCategory = "category-transfer";
}  // namespace experiment

struct ExperimentSpec {
  std::string id = experiment::kShape;
  std::uint64_t seed = 0;
  RinConfig config;
  DatasetManifest train;                     // labeled, supervised phase
  std::vector<DatasetManifest> shader_sets;  // labeled, shader phase
  DatasetManifest transfer;                  // unlabeled
  DatasetManifest test_train;                // labeled, train domain
  DatasetManifest test_transfer;             // labeled, transfer domain
  TrainPlan shader_plan;
  TrainPlan supervised_plan;
  TrainPlan transfer_plan;
  // Reconstruction-only transfer from the same pre-transfer model, run as a
  // negative control for the degenerate R = I solution.
  std::optional<TrainPlan> negative_plan;
  std::string report_dir;

  /// Throws std::invalid_argument before any training on inconsistent specs.
  void validate() const;

  /// Desk-scale defaults; dataset and plan seeds are derived from `seed`.
  static ExperimentSpec defaults(const std::string& id, std::uint64_t seed = 0);
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);

/// (before - after) / before per channel; 0 where before is 0.
Metrics relative_improvement(const Metrics& before, const Metrics& after);

struct DomainResult {
  std::string name;
  Metrics before;
  Metrics after;
};

struct ProbePoint {
  std::size_t epoch = 0;
  DegenerateProbe probe;
};

struct Report {
  std::string experiment;
  std::uint64_t seed = 0;
  std::vector<std::string> update_groups;
  double shader_mse = 0.0;  // shader on ground-truth inputs, train-domain test set
  std::vector<DomainResult> domains;
  std::vector<ProbePoint> probe_standard;       // half/half transfer, transfer-domain test set
  std::vector<ProbePoint> probe_reconstruction;  // negative control, empty if not run
};

void to_json(nlohmann::json& j, const Report& r);
void from_json(const nlohmann::json& j, Report& r);

const DomainResult& find_domain(const Report& r, const std::string& name);

/// Fixed-width before/after/improvement table per domain.
std::string report_table(const Report& r);
std::string report_csv(const Report& r);

/// Writes report.json, report.csv and report.txt into `dir`.
void write_report(const std::filesystem::path& dir, const Report& r);

/// First epoch at which mse(R_hat, I) < mse(R_hat, R), if any.
std::optional<std::size_t> degenerate_epoch(const std::vector<ProbePoint>& probe);

struct RunOptions {
  std::function<void(const std::string&)> progress;  // optional status lines
  bool save_checkpoints = true;
  std::size_t panels = 4;  // transfer-domain test samples rendered before/after
};

/// Shader phase, supervised phase, evaluation, transfer, evaluation; writes
/// the report, logs, checkpoints and panels under spec.report_dir (if set).
/// Wall-clock time goes to timing.json only, so reports stay reproducible.
Report run_experiment(const ExperimentSpec& spec, const RunOptions& options = {});

/// 8-bit RGB: round(255 (n + 1) / 2) inside the mask, 128 grey outside.
Image8 normals_to_rgb(const Tensor<float>& normals, const Tensor<float>& mask);

/// [input | R | normals | S | I] for the prediction of batch item `index`,
/// with a ground-truth row beneath when the sample is labeled.
Image8 panel(const IntrinsicSample& sample, const Prediction<float>& prediction, std::size_t index);

/// [C,H,W] slice of an [N,C,H,W] tensor.
Tensor<float> batch_item(const Tensor<float>& batch, std::size_t index);

}  // namespace rin
