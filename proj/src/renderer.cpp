#include "rin/renderer.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rin {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

void to_json(nlohmann::json& j, const LightParams& l) {
  j = nlohmann::json{{"position", l.position}, {"intensity", l.intensity}};
}

void from_json(const nlohmann::json& j, LightParams& l) {
  l.position = j.at("position").get<std::array<double, 3>>();
  l.intensity = j.at("intensity").get<double>();
}

namespace {

void to_json_interval(nlohmann::json& j, const Interval& i) { j = nlohmann::json::array({i.lo, i.hi}); }

Interval interval_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array() || j.size() != 2) {
    throw std::invalid_argument(std::string("light box: ") + name + " must be [lo, hi]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

double clamp01d(double v) { return std::min(std::max(v, 0.0), 1.0); }

}  // namespace

void LightBox::validate() const {
  const std::pair<const char*, const Interval*> axes[] = {
      {"x", &x}, {"y", &y}, {"z", &z}, {"intensity", &intensity}};
  for (const auto& [name, iv] : axes) {
    if (!(iv->lo <= iv->hi) || !std::isfinite(iv->lo) || !std::isfinite(iv->hi)) {
      throw std::invalid_argument(std::string("light box: ") + name + " range is empty or not finite");
    }
  }
  if (intensity.lo < 0.0) throw std::invalid_argument("light box: intensity must be non-negative");
  // closest box point to the origin
  const double cx = std::clamp(0.0, x.lo, x.hi);
  const double cy = std::clamp(0.0, y.lo, y.hi);
  const double cz = std::clamp(0.0, z.lo, z.hi);
  const double gap = std::sqrt(cx * cx + cy * cy + cz * cz) - kViewRadius;
  if (gap <= kMinLightClearance) {
    throw std::invalid_argument("light box: comes within " + std::to_string(gap) +
                                " of the view volume (need > " +
                                std::to_string(kMinLightClearance) + ")");
  }
}

bool LightBox::contains(const LightParams& l) const {
  return x.contains(l.position[0]) && y.contains(l.position[1]) && z.contains(l.position[2]) &&
         intensity.contains(l.intensity);
}

LightParams LightBox::sample(Rng& rng) const {
  LightParams l;
  l.position = {rng.uniform(x.lo, x.hi), rng.uniform(y.lo, y.hi), rng.uniform(z.lo, z.hi)};
  l.intensity = rng.uniform(intensity.lo, intensity.hi);
  return l;
}

void to_json(nlohmann::json& j, const LightBox& b) {
  j = nlohmann::json::object();
  to_json_interval(j["x"], b.x);
  to_json_interval(j["y"], b.y);
  to_json_interval(j["z"], b.z);
  to_json_interval(j["intensity"], b.intensity);
}

void from_json(const nlohmann::json& j, LightBox& b) {
  b.x = interval_from_json(j.at("x"), "x");
  b.y = interval_from_json(j.at("y"), "y");
  b.z = interval_from_json(j.at("z"), "z");
  b.intensity = interval_from_json(j.at("intensity"), "intensity");
}

namespace {

struct FamilyInfo {
  ShapeFamily family;
  const char* name;
  std::size_t params;
};

constexpr FamilyInfo kFamilies[] = {
    {ShapeFamily::Sphere, "sphere", 1},      {ShapeFamily::Box, "box", 3},
    {ShapeFamily::Cone, "cone", 2},          {ShapeFamily::Cylinder, "cylinder", 2},
    {ShapeFamily::Torus, "torus", 2},        {ShapeFamily::Capsule, "capsule", 2},
    {ShapeFamily::RoundedBox, "rounded-box", 4}, {ShapeFamily::EllipsoidBlend, "ellipsoid-blend", 18},
};

const FamilyInfo& info(ShapeFamily f) {
  for (const auto& i : kFamilies) {
    if (i.family == f) return i;
  }
  throw std::invalid_argument("unknown shape family");
}

double max_comp(const Vec3& v) { return std::max({v.x(), v.y(), v.z()}); }

double sd_box(const Vec3& p, const Vec3& b) {
  const Vec3 q = p.cwiseAbs() - b;
  return q.cwiseMax(0.0).norm() + std::min(max_comp(q), 0.0);
}

// Cone with base radius r at y = -h and apex at y = +h.
double sd_cone(const Vec3& p, double h, double r) {
  const Vec2 q(std::hypot(p.x(), p.z()), p.y());
  const Vec2 k1(0.0, h);
  const Vec2 k2(-r, 2.0 * h);
  const Vec2 ca(q.x() - std::min(q.x(), q.y() < 0.0 ? r : 0.0), std::abs(q.y()) - h);
  const Vec2 cb = q - k1 + k2 * std::clamp((k1 - q).dot(k2) / k2.squaredNorm(), 0.0, 1.0);
  const double s = (cb.x() < 0.0 && ca.y() < 0.0) ? -1.0 : 1.0;
  return s * std::sqrt(std::min(ca.squaredNorm(), cb.squaredNorm()));
}

double sd_cylinder(const Vec3& p, double r, double h) {
  const Vec2 d = Vec2(std::hypot(p.x(), p.z()), p.y()).cwiseAbs() - Vec2(r, h);
  return std::min(std::max(d.x(), d.y()), 0.0) + d.cwiseMax(0.0).norm();
}

double sd_torus(const Vec3& p, double big, double small) {
  return Vec2(std::hypot(p.x(), p.z()) - big, p.y()).norm() - small;
}

double sd_capsule(Vec3 p, double half, double r) {
  p.y() -= std::clamp(p.y(), -half, half);
  return p.norm() - r;
}

// Bound-style ellipsoid distance; not exact, so marching uses a shorter step.
double sd_ellipsoid(const Vec3& p, const Vec3& r) {
  const double k0 = p.cwiseQuotient(r).norm();
  const double k1 = p.cwiseQuotient(r.cwiseProduct(r)).norm();
  if (k1 == 0.0) return -r.minCoeff();
  return k0 * (k0 - 1.0) / k1;
}

constexpr double kBlendK = 0.1;

double smooth_min(double a, double b, double k) {
  const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
  return b + (a - b) * h - k * h * (1.0 - h);
}

double canonical_sdf(ShapeFamily family, const std::vector<double>& q, const Vec3& p) {
  switch (family) {
    case ShapeFamily::Sphere:
      return p.norm() - q[0];
    case ShapeFamily::Box:
      return sd_box(p, Vec3(q[0], q[1], q[2]));
    case ShapeFamily::Cone:
      return sd_cone(p, q[0], q[1]);
    case ShapeFamily::Cylinder:
      return sd_cylinder(p, q[0], q[1]);
    case ShapeFamily::Torus:
      return sd_torus(p, q[0], q[1]);
    case ShapeFamily::Capsule:
      return sd_capsule(p, q[0], q[1]);
    case ShapeFamily::RoundedBox:
      return sd_box(p, Vec3(q[0], q[1], q[2])) - q[3];
    case ShapeFamily::EllipsoidBlend: {
      double d = 0.0;
      for (std::size_t e = 0; e < 3; ++e) {
        const Vec3 c(q[6 * e], q[6 * e + 1], q[6 * e + 2]);
        const Vec3 r(q[6 * e + 3], q[6 * e + 4], q[6 * e + 5]);
        const double de = sd_ellipsoid(p - c, r);
        d = e == 0 ? de : smooth_min(d, de, kBlendK);
      }
      return d;
    }
  }
  return 0.0;
}

// World-space evaluator with the rotation matrix precomputed.
struct PreparedShape {
  const ShapeSpec* spec;
  Eigen::Matrix3d to_local;  // inverse rotation
  double inv_scale;
  double step;

  explicit PreparedShape(const ShapeSpec& s) : spec(&s), inv_scale(1.0 / s.scale) {
    const Eigen::Quaterniond q(s.rotation[0], s.rotation[1], s.rotation[2], s.rotation[3]);
    to_local = q.normalized().toRotationMatrix().transpose();
    step = s.family == ShapeFamily::EllipsoidBlend ? 0.8 : 1.0;
  }

  double operator()(const Vec3& world) const {
    const Vec3 local = to_local * world * inv_scale;
    return canonical_sdf(spec->family, spec->params, local) * spec->scale;
  }
};

}  // namespace

std::string family_name(ShapeFamily f) { return info(f).name; }

ShapeFamily parse_family(const std::string& name) {
  for (const auto& i : kFamilies) {
    if (name == i.name) return i.family;
  }
  throw std::invalid_argument("unknown shape family \"" + name + "\"");
}

std::vector<ShapeFamily> primitive_families() {
  return {ShapeFamily::Box, ShapeFamily::Sphere, ShapeFamily::Cone, ShapeFamily::Cylinder,
          ShapeFamily::Torus};
}

std::vector<ShapeFamily> novel_families() {
  return {ShapeFamily::Capsule, ShapeFamily::RoundedBox, ShapeFamily::EllipsoidBlend};
}

double ShapeSpec::canonical_radius() const {
  const auto& q = params;
  switch (family) {
    case ShapeFamily::Sphere:
      return q[0];
    case ShapeFamily::Box:
      return Vec3(q[0], q[1], q[2]).norm();
    case ShapeFamily::Cone:
      return std::max(q[0], std::hypot(q[0], q[1]));
    case ShapeFamily::Cylinder:
      return std::hypot(q[0], q[1]);
    case ShapeFamily::Torus:
      return q[0] + q[1];
    case ShapeFamily::Capsule:
      return q[0] + q[1];
    case ShapeFamily::RoundedBox:
      return Vec3(q[0], q[1], q[2]).norm() + q[3];
    case ShapeFamily::EllipsoidBlend: {
      double r = 0.0;
      for (std::size_t e = 0; e < 3; ++e) {
        const Vec3 c(q[6 * e], q[6 * e + 1], q[6 * e + 2]);
        const Vec3 radii(q[6 * e + 3], q[6 * e + 4], q[6 * e + 5]);
        r = std::max(r, c.norm() + radii.maxCoeff());
      }
      return r + kBlendK / 4.0;  // smooth union bulges by at most k/4
    }
  }
  return 0.0;
}

void ShapeSpec::validate() const {
  if (params.size() != info(family).params) {
    throw std::invalid_argument("shape " + family_name(family) + ": expected " +
                                std::to_string(info(family).params) + " size parameters, got " +
                                std::to_string(params.size()));
  }
  for (double v : params) {
    if (!std::isfinite(v)) throw std::invalid_argument("shape: non-finite size parameter");
  }
  const double norm = std::sqrt(rotation[0] * rotation[0] + rotation[1] * rotation[1] +
                                rotation[2] * rotation[2] + rotation[3] * rotation[3]);
  if (std::abs(norm - 1.0) > 1e-6) throw std::invalid_argument("shape: rotation is not a unit quaternion");
  if (!(scale > 0.0)) throw std::invalid_argument("shape: scale must be positive");
  if (canonical_radius() * scale > kViewRadius + 1e-9) {
    throw std::invalid_argument("shape " + family_name(family) + " does not fit the view volume");
  }
}

double ShapeSpec::sdf(const std::array<double, 3>& p) const {
  return PreparedShape(*this)(Vec3(p[0], p[1], p[2]));
}

void to_json(nlohmann::json& j, const ShapeSpec& s) {
  j = nlohmann::json{{"family", family_name(s.family)},
                     {"params", s.params},
                     {"rotation", s.rotation},
                     {"scale", s.scale}};
}

void from_json(const nlohmann::json& j, ShapeSpec& s) {
  s.family = parse_family(j.at("family").get<std::string>());
  s.params = j.at("params").get<std::vector<double>>();
  s.rotation = j.at("rotation").get<std::array<double, 4>>();
  s.scale = j.at("scale").get<double>();
}

ShapeSpec sample_shape(ShapeFamily family, Rng& rng) {
  ShapeSpec s;
  s.family = family;
  switch (family) {
    case ShapeFamily::Sphere:
      s.params = {1.0};
      break;
    case ShapeFamily::Box:
      s.params = {rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.55)};
      break;
    case ShapeFamily::Cone:
      s.params = {rng.uniform(0.5, 0.7), rng.uniform(0.4, 0.6)};
      break;
    case ShapeFamily::Cylinder:
      s.params = {rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.7)};
      break;
    case ShapeFamily::Torus:
      s.params = {rng.uniform(0.55, 0.7), rng.uniform(0.2, 0.3)};
      break;
    case ShapeFamily::Capsule:
      s.params = {rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.45)};
      break;
    case ShapeFamily::RoundedBox:
      s.params = {rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.45), rng.uniform(0.3, 0.45),
                  rng.uniform(0.1, 0.2)};
      break;
    case ShapeFamily::EllipsoidBlend: {
      s.params.clear();
      for (int e = 0; e < 3; ++e) {
        Vec3 c(rng.normal(), rng.normal(), rng.normal());
        c *= rng.uniform(0.0, 0.35) / std::max(c.norm(), 1e-12);
        s.params.insert(s.params.end(), {c.x(), c.y(), c.z()});
        s.params.insert(s.params.end(),
                        {rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45)});
      }
      break;
    }
  }
  // uniform rotation (Shoemake)
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double t2 = 2.0 * std::numbers::pi * u2, t3 = 2.0 * std::numbers::pi * u3;
  Eigen::Vector4d q(b * std::cos(t3), a * std::sin(t2), a * std::cos(t2), b * std::sin(t3));
  q.normalize();
  s.rotation = {q[0], q[1], q[2], q[3]};
  s.scale = rng.uniform(0.45, 0.6) / std::max(1.0, s.canonical_radius());
  return s;
}

std::array<double, 2> pixel_center(std::size_t row, std::size_t col, std::size_t size) {
  const double pitch = 2.0 * kCameraExtent / double(size);
  return {-kCameraExtent + (double(col) + 0.5) * pitch, kCameraExtent - (double(row) + 0.5) * pitch};
}

SurfaceMap raycast_normals(const ShapeSpec& shape, std::size_t size) {
  shape.validate();
  if (size == 0) throw std::invalid_argument("raycast: resolution must be positive");
  const PreparedShape f(shape);
  SurfaceMap out;
  out.size = size;
  out.normals = Tensor<float>(Shape{3, size, size});
  out.mask = Tensor<float>(Shape{1, size, size});
  out.depth.assign(size * size, 0.0);
  auto n = out.normals.mutable_data();
  auto m = out.mask.mutable_data();
  const std::size_t plane = size * size;
  const double bound = shape.canonical_radius() * shape.scale + 1e-3;

  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const auto [x, y] = pixel_center(r, c, size);
      const double rho2 = x * x + y * y;
      if (rho2 >= bound * bound) continue;
      // start where the ray enters the bounding ball
      double z = std::sqrt(bound * bound - rho2);
      const double z_end = -z;
      bool hit = false;
      for (int step = 0; step < kMaxMarchSteps; ++step) {
        const double d = f(Vec3(x, y, z));
        if (d < kHitThreshold) {
          hit = true;
          break;
        }
        z -= d * f.step;
        if (z < z_end) break;
      }
      if (!hit) continue;

      const double h = 1e-5;
      Vec3 g(f(Vec3(x + h, y, z)) - f(Vec3(x - h, y, z)), f(Vec3(x, y + h, z)) - f(Vec3(x, y - h, z)),
             f(Vec3(x, y, z + h)) - f(Vec3(x, y, z - h)));
      if (!(g.norm() > 0.0)) g = Vec3(0, 0, 1);
      g.normalize();
      if (g.z() < 0.0) {
        // silhouette: keep the normal front facing
        g.z() = 0.0;
        g = g.norm() > 0.0 ? g.normalized() : Vec3(0, 0, 1);
      }
      const std::size_t p = r * size + c;
      n[p] = float(g.x());
      n[plane + p] = float(g.y());
      n[2 * plane + p] = float(g.z());
      m[p] = 1.0f;
      out.depth[p] = z;
    }
  }
  return out;
}

Tensor<float> lambert_shade(const SurfaceMap& surface, const LightParams& light, double ambient) {
  if (light.intensity < 0.0) throw std::invalid_argument("lambert_shade: negative light intensity");
  const std::size_t size = surface.size, plane = size * size;
  Tensor<float> shading(Shape{3, size, size});
  auto s = shading.mutable_data();
  const auto n = surface.normals.data();
  const auto m = surface.mask.data();
  const Vec3 lp(light.position[0], light.position[1], light.position[2]);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const std::size_t p = r * size + c;
      if (m[p] == 0.0f) continue;
      const auto [x, y] = pixel_center(r, c, size);
      const Vec3 to_light = lp - Vec3(x, y, surface.depth[p]);
      const double dist = to_light.norm();
      if (!(dist > 0.0)) throw std::invalid_argument("lambert_shade: light coincides with the surface");
      const Vec3 normal(n[p], n[plane + p], n[2 * plane + p]);
      const double lambert = std::max(0.0, normal.dot(to_light) / dist);
      const float v = float(clamp01d(ambient + light.intensity * lambert));
      s[p] = s[plane + p] = s[2 * plane + p] = v;
    }
  }
  return shading;
}

std::string reflectance_name(ReflectanceDist d) {
  switch (d) {
    case ReflectanceDist::UniformColor:
      return "uniform-color";
    case ReflectanceDist::NearWhite:
      return "near-white";
    case ReflectanceDist::TwoTone:
      return "two-tone";
  }
  return "?";
}

ReflectanceDist parse_reflectance(const std::string& name) {
  if (name == "uniform-color") return ReflectanceDist::UniformColor;
  if (name == "near-white") return ReflectanceDist::NearWhite;
  if (name == "two-tone") return ReflectanceDist::TwoTone;
  throw std::invalid_argument("unknown reflectance distribution \"" + name + "\"");
}

Tensor<float> sample_reflectance(ReflectanceDist dist, const SurfaceMap& surface, Rng& rng) {
  auto color = [&rng](double lo) {
    return std::array<float, 3>{float(rng.uniform(lo, 1.0)), float(rng.uniform(lo, 1.0)),
                                float(rng.uniform(lo, 1.0))};
  };
  std::array<float, 3> a{}, b{};
  Vec3 normal(0, 0, 1);
  double offset = 0.0;
  switch (dist) {
    case ReflectanceDist::UniformColor:
      a = b = color(0.1);
      break;
    case ReflectanceDist::NearWhite:
      a = b = color(0.85);
      break;
    case ReflectanceDist::TwoTone: {
      a = color(0.1);
      b = color(0.1);
      normal = Vec3(rng.normal(), rng.normal(), rng.normal());
      normal /= std::max(normal.norm(), 1e-12);
      offset = rng.uniform(-0.15, 0.15);
      break;
    }
  }
  const std::size_t size = surface.size, plane = size * size;
  Tensor<float> out(Shape{3, size, size});
  auto o = out.mutable_data();
  const auto m = surface.mask.data();
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const std::size_t p = r * size + c;
      if (m[p] == 0.0f) continue;
      const auto [x, y] = pixel_center(r, c, size);
      const bool first = Vec3(x, y, surface.depth[p]).dot(normal) >= offset;
      const auto& col = (dist != ReflectanceDist::TwoTone || first) ? a : b;
      for (std::size_t k = 0; k < 3; ++k) o[k * plane + p] = col[k];
    }
  }
  return out;
}

Tensor<float> compose(const Tensor<float>& reflectance, const Tensor<float>& shading) {
  if (reflectance.shape() != shading.shape()) {
    throw ShapeError("compose: reflectance " + shape_str(reflectance.shape()) + " vs shading " +
                     shape_str(shading.shape()));
  }
  Tensor<float> image(reflectance.shape());
  auto out = image.mutable_data();
  const auto r = reflectance.data();
  const auto s = shading.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(r[i] * s[i], 0.0f), 1.0f);
  return image;
}

}  // namespace rin
