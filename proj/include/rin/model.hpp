#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rin/ops.hpp"

namespace rin {

namespace group {
inline constexpr const char* kEncoder = "encoder";
inline constexpr const char* kReflectance = "reflectance_dec";
inline constexpr const char* kNormals = "normals_dec";
inline constexpr const char* kLight = "light_dec";
inline constexpr const char* kShader = "shader";
inline const std::array<std::string, 5> kAll{kEncoder, kReflectance, kNormals, kLight, kShader};
}  // namespace group

struct RinConfig {
  std::size_t image_size = 32;
  std::vector<std::size_t> encoder_channels{16, 32, 64, 128, 256};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t light_dim = 4;
  std::string mirror_link = "concat";

  /// Throws std::invalid_argument on an unsupported configuration.
  void validate() const;
  std::size_t depth() const { return encoder_channels.size(); }
  std::size_t bottleneck_channels() const { return encoder_channels.back(); }
  std::size_t bottleneck_size() const { return image_size >> depth(); }

  bool operator==(const RinConfig&) const = default;
};

void to_json(nlohmann::json& j, const RinConfig& c);
void from_json(const nlohmann::json& j, RinConfig& c);

template <typename T>
struct ConvBlock {
  Tensor<T> weight, bias, gamma, beta;
  BatchNormStats<T> stats;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight, bias;
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight, bias;
};

template <typename T>
struct EncoderNet {
  std::vector<ConvBlock<T>> stages;
};

template <typename T>
struct DecoderNet {
  std::vector<ConvBlock<T>> stages;
  ConvLayer<T> head;
};

template <typename T>
struct ShaderNet {
  EncoderNet<T> encoder;
  LinearLayer<T> light_embed;
  DecoderNet<T> decoder;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ParamGroup {
  std::string name;
  std::vector<NamedTensor<T>> params;   // trainable
  std::vector<NamedTensor<T>> buffers;  // batchnorm running statistics
};

template <typename T>
struct Decomposition {
  Tensor<T> reflectance;  // [N,3,H,W] in [0,1]
  Tensor<T> normals;      // [N,3,H,W], unit length on the foreground, 0 elsewhere
  Tensor<T> light;        // [N,4] = (x, y, z, intensity)
};

template <typename T>
struct Prediction {
  Tensor<T> reflectance;
  Tensor<T> normals;
  Tensor<T> light;
  Tensor<T> shading;         // [N,3,H,W] in [0,1]
  Tensor<T> reconstruction;  // clamp01(reflectance * shading)
};

/// Foreground mask [N,1,H,W] of an image batch: 1 where any channel is
/// positive. Generated scenes have an exactly black background.
template <typename T>
Tensor<T> foreground_mask(const Tensor<T>& images);

/// The decomposition network (shared encoder; reflectance, normals and
/// light decoders) plus the learned shading network.
template <typename T>
class RinModel {
 public:
  RinModel(RinConfig config, std::uint64_t seed);

  const RinConfig& config() const { return config_; }

  Decomposition<T> decompose(const Tensor<T>& images);
  Tensor<T> shade(const Tensor<T>& normals, const Tensor<T>& lights);
  Prediction<T> reconstruct(const Tensor<T>& images);

  /// Disjoint, exhaustive partition of every parameter and buffer.
  std::vector<ParamGroup<T>> parameter_groups() const;
  std::vector<Tensor<T>> parameters(const std::string& group_name) const;
  std::size_t parameter_count(const std::string& group_name) const;

  /// Batchnorm layers of the listed groups use batch statistics; all other
  /// groups normalize with their running statistics.
  void set_train_groups(const std::set<std::string>& groups);
  const std::set<std::string>& train_groups() const { return train_groups_; }
  /// Only parameters of the listed groups record gradients.
  void set_trainable(const std::set<std::string>& groups);

  /// Deep copy of all parameter and buffer values.
  RinModel clone() const;
  void copy_from(const RinModel& other);

  EncoderNet<T>& encoder() { return encoder_; }
  DecoderNet<T>& reflectance_decoder() { return reflectance_; }
  DecoderNet<T>& normals_decoder() { return normals_; }
  LinearLayer<T>& light_decoder() { return light_; }
  ShaderNet<T>& shader() { return shader_; }

 private:
  NormMode mode(const char* group_name) const;

  RinConfig config_;
  EncoderNet<T> encoder_;
  DecoderNet<T> reflectance_;
  DecoderNet<T> normals_;
  LinearLayer<T> light_;
  ShaderNet<T> shader_;
  std::set<std::string> train_groups_;
};

extern template class RinModel<float>;
extern template class RinModel<double>;

using Model = RinModel<float>;

// Checkpoint: one line of compact JSON (config, group offset table, free
// form metadata) terminated by '\n', then TSR1 tensors: every group's
// params and buffers in parameter_groups() order, then any extra tensors.

struct CheckpointExtras {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor<float>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointExtras& extras = {});

struct LoadedCheckpoint {
  Model model;
  CheckpointExtras extras;
};

/// Validates every tensor shape against the stored config.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rin
