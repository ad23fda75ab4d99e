#pragma once

// Procedural single-object scenes: SDF primitives ray cast with an
// orthographic camera, Lambertian shading, and sampled reflectance.
// Per-sample images are [C,H,W] float tensors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "rin/rng.hpp"
#include "rin/tensor.hpp"

namespace rin {

/// Objects fit in a ball of this radius around the origin.
inline constexpr double kViewRadius = 0.6;
/// Half extent of the orthographic image plane.
inline constexpr double kCameraExtent = 0.65;
/// Rays start on the plane z = kCameraZ and travel along -z.
inline constexpr double kCameraZ = 1.0;
inline constexpr double kAmbient = 0.1;
inline constexpr int kMaxMarchSteps = 128;
inline constexpr double kHitThreshold = 1e-4;
/// Lights must keep this distance from the view volume.
inline constexpr double kMinLightClearance = 0.5;

struct LightParams {
  std::array<double, 3> position{0.0, 0.0, 3.0};
  double intensity = 1.0;
};

void to_json(nlohmann::json& j, const LightParams& l);
void from_json(const nlohmann::json& j, LightParams& l);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

struct LightBox {
  Interval x{-3.0, -0.5};
  Interval y{-1.0, 1.0};
  Interval z{1.0, 3.0};
  Interval intensity{0.6, 1.4};

  static LightBox left() { return {}; }
  static LightBox right() { return {{0.5, 3.0}, {-1.0, 1.0}, {1.0, 3.0}, {0.6, 1.4}}; }

  /// Throws std::invalid_argument on inverted ranges, negative intensity,
  /// or a box closer than kMinLightClearance to the view volume.
  void validate() const;
  bool contains(const LightParams& l) const;
  LightParams sample(Rng& rng) const;
};

void to_json(nlohmann::json& j, const LightBox& b);
void from_json(const nlohmann::json& j, LightBox& b);

enum class ShapeFamily { Sphere, Box, Cone, Cylinder, Torus, Capsule, RoundedBox, EllipsoidBlend };

std::string family_name(ShapeFamily f);
/// Throws std::invalid_argument on an unknown name.
ShapeFamily parse_family(const std::string& name);
/// box, sphere, cone, cylinder, torus
std::vector<ShapeFamily> primitive_families();
/// capsule, rounded-box, ellipsoid-blend
std::vector<ShapeFamily> novel_families();

struct ShapeSpec {
  ShapeFamily family = ShapeFamily::Sphere;
  // Family-specific sizes in the canonical frame, where the shape fits the
  // unit ball. ellipsoid-blend stores 3 x (cx, cy, cz, rx, ry, rz).
  std::vector<double> params{1.0};
  std::array<double, 4> rotation{1.0, 0.0, 0.0, 0.0};  // unit quaternion (w, x, y, z)
  double scale = kViewRadius;

  /// Throws std::invalid_argument on a bad parameter count, a non-unit
  /// rotation, or a shape that leaves the view volume.
  void validate() const;
  /// Signed distance at a world-space point.
  double sdf(const std::array<double, 3>& p) const;
  /// Radius of a ball around the origin containing the canonical shape.
  double canonical_radius() const;
};

void to_json(nlohmann::json& j, const ShapeSpec& s);
void from_json(const nlohmann::json& j, ShapeSpec& s);

ShapeSpec sample_shape(ShapeFamily family, Rng& rng);

/// Result of ray casting: unit normals inside the mask (0 elsewhere) and the
/// hit depth z per pixel, which locates the surface point for shading.
struct SurfaceMap {
  std::size_t size = 0;
  Tensor<float> normals;      // [3,H,W]
  Tensor<float> mask;         // [1,H,W]
  std::vector<double> depth;  // H*W, valid where mask = 1
};

/// World-space (x, y) of a pixel centre.
std::array<double, 2> pixel_center(std::size_t row, std::size_t col, std::size_t size);

SurfaceMap raycast_normals(const ShapeSpec& shape, std::size_t size);

/// Lambertian shading, replicated over 3 channels, 0 outside the mask.
Tensor<float> lambert_shade(const SurfaceMap& surface, const LightParams& light,
                            double ambient = kAmbient);

enum class ReflectanceDist { UniformColor, NearWhite, TwoTone };

std::string reflectance_name(ReflectanceDist d);
ReflectanceDist parse_reflectance(const std::string& name);

/// [3,H,W] reflectance, 0 outside the mask. Two-tone splits the object with
/// a random world-space plane through its neighbourhood.
Tensor<float> sample_reflectance(ReflectanceDist dist, const SurfaceMap& surface, Rng& rng);

/// clamp01(reflectance * shading)
Tensor<float> compose(const Tensor<float>& reflectance, const Tensor<float>& shading);

struct IntrinsicSample {
  Tensor<float> image;        // [3,H,W]
  Tensor<float> reflectance;  // [3,H,W]
  Tensor<float> normals;      // [3,H,W]
  Tensor<float> mask;         // [1,H,W]
  Tensor<float> shading;      // [3,H,W]
  LightParams light;
  ShapeSpec shape;
  bool labeled = true;
};

struct DatasetManifest {
  std::size_t count = 0;
  std::size_t image_size = 32;
  std::vector<ShapeFamily> families;
  ReflectanceDist reflectance = ReflectanceDist::UniformColor;
  LightBox light_box;
  std::uint64_t seed = 0;
  bool labeled = true;

  /// Throws std::invalid_argument with a diagnostic on any invalid field.
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Sample `index` of the manifest; depends only on (seed, index).
IntrinsicSample generate_sample(const DatasetManifest& manifest, std::size_t index);

/// All samples; `parallel` only changes scheduling, never values.
std::vector<IntrinsicSample> generate_dataset(const DatasetManifest& manifest, bool parallel = true);

/// Directory layout: manifest.json, samples/NNNNNN.tsr, samples/NNNNNN.json.
void save_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest,
                  const std::vector<IntrinsicSample>& samples);

struct Dataset {
  DatasetManifest manifest;
  std::vector<IntrinsicSample> samples;
};

Dataset load_dataset(const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace rin
