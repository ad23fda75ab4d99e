#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "rin/renderer.hpp"
#include "rin/serialize.hpp"

namespace rin {

void DatasetManifest::validate() const {
  if (count == 0) throw std::invalid_argument("manifest: count must be positive");
  if (image_size == 0) throw std::invalid_argument("manifest: image_size must be positive");
  if (families.empty()) throw std::invalid_argument("manifest: family list is empty");
  light_box.validate();
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  nlohmann::json families = nlohmann::json::array();
  for (auto f : m.families) families.push_back(family_name(f));
  j = nlohmann::json{{"count", m.count},
                     {"image_size", m.image_size},
                     {"families", std::move(families)},
                     {"reflectance", reflectance_name(m.reflectance)},
                     {"light_box", m.light_box},
                     {"seed", m.seed},
                     {"labeled", m.labeled}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.count = j.at("count").get<std::size_t>();
  m.image_size = j.value("image_size", std::size_t(32));
  m.families.clear();
  for (const auto& f : j.at("families")) m.families.push_back(parse_family(f.get<std::string>()));
  m.reflectance = parse_reflectance(j.value("reflectance", std::string("uniform-color")));
  m.light_box = j.contains("light_box") ? j.at("light_box").get<LightBox>() : LightBox::left();
  m.seed = j.value("seed", std::uint64_t(0));
  m.labeled = j.value("labeled", true);
}

IntrinsicSample generate_sample(const DatasetManifest& manifest, std::size_t index) {
  Rng rng(mix_seed(manifest.seed, index));
  IntrinsicSample s;
  const ShapeFamily family = manifest.families[rng.below(manifest.families.size())];
  s.shape = sample_shape(family, rng);
  s.light = manifest.light_box.sample(rng);
  const SurfaceMap surface = raycast_normals(s.shape, manifest.image_size);
  s.reflectance = sample_reflectance(manifest.reflectance, surface, rng);
  s.shading = lambert_shade(surface, s.light);
  s.image = compose(s.reflectance, s.shading);
  s.normals = surface.normals;
  s.mask = surface.mask;
  s.labeled = manifest.labeled;
  return s;
}

std::vector<IntrinsicSample> generate_dataset(const DatasetManifest& manifest, bool parallel) {
  manifest.validate();
  std::vector<IntrinsicSample> samples(manifest.count);
  const auto n = static_cast<std::ptrdiff_t>(manifest.count);
#pragma omp parallel for schedule(dynamic, 8) if (parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) samples[i] = generate_sample(manifest, std::size_t(i));
  return samples;
}

namespace {

std::string sample_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << text;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Tensor<float> expect_shape(Tensor<float> t, const Shape& shape, const std::filesystem::path& path) {
  if (t.shape() != shape) {
    throw FormatError(path.string() + ": tensor shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(shape));
  }
  return t;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const DatasetManifest& manifest,
                  const std::vector<IntrinsicSample>& samples) {
  const auto sample_dir = dir / "samples";
  std::filesystem::create_directories(sample_dir);
  write_text(dir / "manifest.json", nlohmann::json(manifest).dump(2) + "\n");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string stem = sample_stem(i);
    std::vector<Tensor<float>> bundle;
    nlohmann::json meta{{"labeled", s.labeled}};
    if (s.labeled) {
      bundle = {s.image, s.reflectance, s.normals, s.mask, s.shading};
      meta["light"] = s.light;
      meta["shape"] = s.shape;
    } else {
      bundle = {s.image, s.mask};
    }
    save_tensors(sample_dir / (stem + ".tsr"), bundle);
    write_text(sample_dir / (stem + ".json"), meta.dump(2) + "\n");
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  DatasetManifest m;
  try {
    m = read_json(path).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = load_manifest(dir / "manifest.json");
  const std::size_t n = d.manifest.image_size;
  const Shape rgb{3, n, n}, mono{1, n, n};
  d.samples.resize(d.manifest.count);
  for (std::size_t i = 0; i < d.manifest.count; ++i) {
    const auto stem = dir / "samples" / sample_stem(i);
    auto& s = d.samples[i];
    const auto meta = read_json(stem.string() + ".json");
    s.labeled = meta.at("labeled").get<bool>();
    const std::filesystem::path tsr = stem.string() + ".tsr";
    auto tensors = load_tensors<float>(tsr);
    if (tensors.size() != (s.labeled ? 5u : 2u)) {
      throw FormatError(tsr.string() + ": unexpected tensor count " + std::to_string(tensors.size()));
    }
    s.image = expect_shape(tensors[0], rgb, tsr);
    if (s.labeled) {
      s.reflectance = expect_shape(tensors[1], rgb, tsr);
      s.normals = expect_shape(tensors[2], rgb, tsr);
      s.mask = expect_shape(tensors[3], mono, tsr);
      s.shading = expect_shape(tensors[4], rgb, tsr);
      s.light = meta.at("light").get<LightParams>();
      s.shape = meta.at("shape").get<ShapeSpec>();
    } else {
      s.mask = expect_shape(tensors[1], mono, tsr);
    }
  }
  return d;
}

}  // namespace rin
