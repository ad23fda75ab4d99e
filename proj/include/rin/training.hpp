#pragma once

// Adam, batching, and the three training phases: supervised decomposition,
// shader regression against the Lambertian oracle, and self-supervised
// transfer with mixed labeled/unlabeled minibatches.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rin/model.hpp"
#include "rin/renderer.hpp"

namespace rin {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

/// Moments are keyed by parameter name and created on first use.
struct AdamState {
  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}

  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

/// One bias-corrected Adam update of `params`; every tensor must hold a
/// gradient. Parameters not listed are untouched.
void adam_step(AdamState& state, const std::vector<NamedTensor<float>>& params);

/// Parameters of the listed groups, in parameter_groups() order.
std::vector<NamedTensor<float>> group_parameters(const Model& model, const std::set<std::string>& groups);

/// Stores moments as "adam.m.<name>" / "adam.v.<name>" tensors plus a meta
/// entry with the step count and hyperparameters.
void append_adam_state(CheckpointExtras& extras, const AdamState& state);
std::optional<AdamState> restore_adam_state(const CheckpointExtras& extras);

enum class Phase { Supervised, Shader, Transfer };

std::string phase_name(Phase p);
Phase parse_phase(const std::string& name);

struct LossWeights {
  double reflectance = 1.0;
  double normals = 1.0;
  double lights = 0.1;
  double reconstruction = 1.0;
};

struct TrainPlan {
  Phase phase = Phase::Supervised;
  LossWeights weights;
  std::set<std::string> update_groups;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AdamConfig adam;
  // Share of each transfer minibatch taken from labeled data: 0.5 is the
  // standard protocol, 0 is reconstruction-only (a deliberately broken plan).
  double labeled_fraction = 0.5;
  // Dataset directories (CLI); the experiment harness passes data directly.
  std::vector<std::string> labeled;
  std::string unlabeled;
  std::string test;

  /// Throws std::invalid_argument with a diagnostic.
  void validate() const;

  static TrainPlan supervised_default();
  static TrainPlan shader_default();
  static TrainPlan transfer_default(std::set<std::string> groups);
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

/// Samples stacked into NCHW tensors; label tensors are undefined for
/// unlabeled batches.
struct Batch {
  Tensor<float> images;       // [N,3,H,W]
  Tensor<float> reflectance;  // [N,3,H,W]
  Tensor<float> normals;      // [N,3,H,W]
  Tensor<float> shading;      // [N,3,H,W]
  Tensor<float> lights;       // [N,4]
  bool labeled = false;
  std::size_t size() const { return images.dim(0); }
};

Batch make_batch(const std::vector<IntrinsicSample>& samples, const std::vector<std::size_t>& indices);
Batch make_batch(const std::vector<IntrinsicSample>& samples);
Tensor<float> light_tensor(const std::vector<LightParams>& lights);

struct StepLosses {
  double reflectance = 0.0;
  double normals = 0.0;
  double lights = 0.0;
  double reconstruction = 0.0;
  double shading = 0.0;
  double total = 0.0;
};

/// w_R mse(R,R*) + w_N mse(N,N*) + w_L mse(L,L*) on a labeled batch, then
/// Adam on the plan's groups.
StepLosses supervised_step(Model& model, const Batch& batch, const TrainPlan& plan, AdamState& adam);

/// mse(shade(N*, L*), S*) with only the shader group updated.
StepLosses shader_step(Model& model, const Batch& batch, AdamState& adam);

/// Supervised loss on the labeled half plus w_rec mse(I_hat, I) on the
/// unlabeled half. The halves run as separate forward passes (batchnorm
/// statistics are per half) and share one backward and one Adam update.
/// An undefined labeled batch gives reconstruction-only training.
StepLosses transfer_step(Model& model, const Batch& labeled, const Batch& unlabeled,
                         const TrainPlan& plan, AdamState& adam);

/// Full-image MSE per channel, Table-style: reflectance, shape (normals),
/// lights, shading (frozen shader on predicted normals and lights), render.
struct Metrics {
  double reflectance = 0.0;
  double normals = 0.0;
  double lights = 0.0;
  double shading = 0.0;
  double render = 0.0;
};

void to_json(nlohmann::json& j, const Metrics& m);
void from_json(const nlohmann::json& j, Metrics& m);

inline constexpr std::size_t kEvalBatch = 50;

/// Eval-mode forward over a labeled test set; restores the model's modes.
Metrics evaluate(Model& model, const std::vector<IntrinsicSample>& test);
/// Scores the ground truth against itself through the same path (all zero).
Metrics evaluate_passthrough(const std::vector<IntrinsicSample>& test);
/// Shader alone on ground-truth normals and lights.
double evaluate_shader(Model& model, const std::vector<IntrinsicSample>& test);

/// mse(R_hat, I) and mse(R_hat, R) over a labeled set.
struct DegenerateProbe {
  double reflectance_vs_image = 0.0;
  double reflectance_vs_truth = 0.0;
};
DegenerateProbe probe_degenerate(Model& model, const std::vector<IntrinsicSample>& test);

struct EpochRecord {
  Phase phase = Phase::Supervised;
  std::size_t epoch = 0;  // 1-based, counted across resumes
  std::uint64_t step = 0;
  StepLosses loss;        // mean over the epoch's steps
  std::optional<Metrics> test;
  std::optional<double> shader_test;
  std::optional<DegenerateProbe> probe;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

/// Append-only line-delimited JSON.
class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(std::filesystem::path path, bool append = false);

  void append(const EpochRecord& record);
  const std::vector<EpochRecord>& records() const { return records_; }

 private:
  std::optional<std::filesystem::path> path_;
  std::vector<EpochRecord> records_;
};

struct TrainData {
  const std::vector<IntrinsicSample>* labeled = nullptr;
  const std::vector<IntrinsicSample>* unlabeled = nullptr;
  const std::vector<IntrinsicSample>* test = nullptr;      // optional per-epoch evaluation
  const std::vector<IntrinsicSample>* probe = nullptr;     // optional degenerate probe set
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs `plan.epochs` further epochs of the plan's phase. `first_epoch` is
/// the number of epochs already done (for resume); the shuffle of epoch e
/// depends only on (seed, e).
void run_phase(Model& model, const TrainPlan& plan, const TrainData& data, AdamState& adam,
               TrainLog& log, std::size_t first_epoch = 0, const EpochCallback& on_epoch = {});

}  // namespace rin
