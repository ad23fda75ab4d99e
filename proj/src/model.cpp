#include "rin/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "rin/rng.hpp"
#include "rin/serialize.hpp"

namespace rin {

void RinConfig::validate() const {
  if (encoder_channels.empty()) throw std::invalid_argument("config: encoder_channels is empty");
  for (std::size_t c : encoder_channels) {
    if (c == 0) throw std::invalid_argument("config: zero channel count");
  }
  if (kernel != 3) throw std::invalid_argument("config: only 3x3 kernels are supported");
  if (stride != 2) throw std::invalid_argument("config: only stride 2 encoders are supported");
  if (light_dim != 4) throw std::invalid_argument("config: light code must have 4 dims");
  if (mirror_link != "concat") throw std::invalid_argument("config: mirror_link must be \"concat\"");
  const std::size_t factor = std::size_t(1) << depth();
  if (image_size == 0 || image_size % factor != 0) {
    throw std::invalid_argument("config: image size " + std::to_string(image_size) +
                                " is not divisible by 2^" + std::to_string(depth()));
  }
}

void to_json(nlohmann::json& j, const RinConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},   {"encoder_channels", c.encoder_channels},
                     {"kernel", c.kernel},           {"stride", c.stride},
                     {"light_dim", c.light_dim},     {"mirror_link", c.mirror_link}};
}

void from_json(const nlohmann::json& j, RinConfig& c) {
  RinConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.kernel = j.value("kernel", d.kernel);
  c.stride = j.value("stride", d.stride);
  c.light_dim = j.value("light_dim", d.light_dim);
  c.mirror_link = j.value("mirror_link", d.mirror_link);
}

namespace {

// Kaiming fan-in: N(0, 2 / fan_in); biases zero.
template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(2.0 / double(fan_in));
  for (auto& v : t.mutable_data()) v = T(rng.normal() * stddev);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> filled(std::size_t n, T value) {
  Tensor<T> t(Shape{n}, value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
ConvBlock<T> make_block(std::size_t in, std::size_t out, Rng& rng) {
  return {kaiming<T>({out, in, 3, 3}, in * 9, rng), filled<T>(out, T(0)), filled<T>(out, T(1)),
          filled<T>(out, T(0)), BatchNormStats<T>::init(out)};
}

template <typename T>
EncoderNet<T> make_encoder(const RinConfig& cfg, Rng& rng) {
  EncoderNet<T> net;
  std::size_t in = 3;
  for (std::size_t c : cfg.encoder_channels) {
    net.stages.push_back(make_block<T>(in, c, rng));
    in = c;
  }
  return net;
}

// Mirror of the encoder: stage j upsamples, concatenates the encoder
// activation of matching size (none at full resolution), then convolves to
// the encoder's channel counts in reverse order.
template <typename T>
DecoderNet<T> make_decoder(const RinConfig& cfg, std::size_t bottleneck_in, Rng& rng) {
  const auto& ch = cfg.encoder_channels;
  const std::size_t depth = ch.size();
  DecoderNet<T> net;
  std::size_t in = bottleneck_in;
  for (std::size_t j = 0; j < depth; ++j) {
    const std::size_t skip = j + 1 < depth ? ch[depth - 2 - j] : 0;
    const std::size_t out = ch[depth - 1 - j];
    net.stages.push_back(make_block<T>(in + skip, out, rng));
    in = out;
  }
  net.head = {kaiming<T>({3, in, 3, 3}, in * 9, rng), filled<T>(3, T(0))};
  return net;
}

template <typename T>
LinearLayer<T> make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {kaiming<T>({out, in}, in, rng), filled<T>(out, T(0))};
}

template <typename T>
Tensor<T> run_block(ConvBlock<T>& b, const Tensor<T>& x, std::size_t stride, NormMode mode) {
  return relu(batchnorm(conv2d(x, b.weight, b.bias, stride, 1), b.gamma, b.beta, b.stats, mode));
}

template <typename T>
std::vector<Tensor<T>> run_encoder(EncoderNet<T>& net, const Tensor<T>& x, NormMode mode) {
  std::vector<Tensor<T>> acts;
  Tensor<T> h = x;
  for (auto& stage : net.stages) {
    h = run_block(stage, h, 2, mode);
    acts.push_back(h);
  }
  return acts;
}

template <typename T>
Tensor<T> run_decoder(DecoderNet<T>& net, Tensor<T> h, const std::vector<Tensor<T>>& skips,
                      NormMode mode) {
  const std::size_t depth = net.stages.size();
  for (std::size_t j = 0; j < depth; ++j) {
    h = upsample2x(h);
    if (j + 1 < depth) h = concat_channels(h, skips[depth - 2 - j]);
    h = run_block(net.stages[j], h, 1, mode);
  }
  return conv2d(h, net.head.weight, net.head.bias, 1, 1);
}

template <typename T>
void append_block(std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers,
                  const std::string& prefix, const ConvBlock<T>& b) {
  params.push_back({prefix + ".weight", b.weight});
  params.push_back({prefix + ".bias", b.bias});
  params.push_back({prefix + ".gamma", b.gamma});
  params.push_back({prefix + ".beta", b.beta});
  buffers.push_back({prefix + ".running_mean", b.stats.mean});
  buffers.push_back({prefix + ".running_var", b.stats.var});
}

template <typename T>
void append_encoder(ParamGroup<T>& g, const std::string& prefix, const EncoderNet<T>& net) {
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    append_block(g.params, g.buffers, prefix + "stage" + std::to_string(i), net.stages[i]);
  }
}

template <typename T>
void append_decoder(ParamGroup<T>& g, const std::string& prefix, const DecoderNet<T>& net) {
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    append_block(g.params, g.buffers, prefix + "stage" + std::to_string(i), net.stages[i]);
  }
  g.params.push_back({prefix + "head.weight", net.head.weight});
  g.params.push_back({prefix + "head.bias", net.head.bias});
}

template <typename T>
void check_images(const RinConfig& cfg, const Tensor<T>& images, const char* what) {
  if (!images.defined() || images.rank() != 4 || images.dim(1) != 3 ||
      images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
    throw ShapeError(std::string(what) + ": expected [N,3," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " +
                     (images.defined() ? shape_str(images.shape()) : std::string("undefined")));
  }
}

}  // namespace

template <typename T>
Tensor<T> foreground_mask(const Tensor<T>& images) {
  if (images.rank() != 4) throw ShapeError("foreground_mask: expected NCHW images");
  const std::size_t n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  Tensor<T> mask(Shape{n, 1, images.dim(2), images.dim(3)});
  auto m = mask.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      bool on = false;
      for (std::size_t k = 0; k < c; ++k) on = on || images[(i * c + k) * plane + p] > T(0);
      m[i * plane + p] = on ? T(1) : T(0);
    }
  }
  return mask;
}

template <typename T>
RinModel<T>::RinModel(RinConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t bottleneck = config_.bottleneck_channels();
  const std::size_t b = config_.bottleneck_size();
  encoder_ = make_encoder<T>(config_, rng);
  reflectance_ = make_decoder<T>(config_, bottleneck, rng);
  normals_ = make_decoder<T>(config_, bottleneck, rng);
  light_ = make_linear<T>(bottleneck, config_.light_dim, rng);
  shader_.encoder = make_encoder<T>(config_, rng);
  shader_.light_embed = make_linear<T>(config_.light_dim, bottleneck * b * b, rng);
  shader_.decoder = make_decoder<T>(config_, 2 * bottleneck, rng);
  train_groups_ = {group::kAll.begin(), group::kAll.end()};
}

template <typename T>
NormMode RinModel<T>::mode(const char* group_name) const {
  return train_groups_.contains(group_name) ? NormMode::Train : NormMode::Eval;
}

template <typename T>
Decomposition<T> RinModel<T>::decompose(const Tensor<T>& images) {
  check_images(config_, images, "decompose");
  const auto acts = run_encoder(encoder_, images, mode(group::kEncoder));
  const Tensor<T>& z = acts.back();
  const std::size_t n = images.dim(0);

  Decomposition<T> out;
  out.reflectance = clamp01(run_decoder(reflectance_, z, acts, mode(group::kReflectance)));
  out.normals = multiply(normalize_channels(run_decoder(normals_, z, acts, mode(group::kNormals))),
                         foreground_mask(images));
  const Tensor<T> code = config_.bottleneck_size() == 1
                             ? reshape(z, Shape{n, config_.bottleneck_channels()})
                             : global_avg_pool(z);
  out.light = linear(code, light_.weight, light_.bias);
  return out;
}

template <typename T>
Tensor<T> RinModel<T>::shade(const Tensor<T>& normals, const Tensor<T>& lights) {
  check_images(config_, normals, "shade");
  if (lights.rank() != 2 || lights.dim(0) != normals.dim(0) || lights.dim(1) != config_.light_dim) {
    throw ShapeError("shade: lights " + shape_str(lights.shape()) + " do not match normals " +
                     shape_str(normals.shape()));
  }
  const NormMode m = mode(group::kShader);
  const auto acts = run_encoder(shader_.encoder, normals, m);
  const Tensor<T>& z = acts.back();
  const Tensor<T> embed = reshape(linear(lights, shader_.light_embed.weight, shader_.light_embed.bias),
                                  z.shape());
  return clamp01(run_decoder(shader_.decoder, concat_channels(z, embed), acts, m));
}

template <typename T>
Prediction<T> RinModel<T>::reconstruct(const Tensor<T>& images) {
  auto d = decompose(images);
  Prediction<T> p;
  p.shading = shade(d.normals, d.light);
  p.reconstruction = clamp01(multiply(d.reflectance, p.shading));
  p.reflectance = std::move(d.reflectance);
  p.normals = std::move(d.normals);
  p.light = std::move(d.light);
  return p;
}

template <typename T>
std::vector<ParamGroup<T>> RinModel<T>::parameter_groups() const {
  std::vector<ParamGroup<T>> groups;
  ParamGroup<T> enc{group::kEncoder, {}, {}};
  append_encoder(enc, "encoder.", encoder_);
  groups.push_back(std::move(enc));

  ParamGroup<T> refl{group::kReflectance, {}, {}};
  append_decoder(refl, "reflectance.", reflectance_);
  groups.push_back(std::move(refl));

  ParamGroup<T> norm{group::kNormals, {}, {}};
  append_decoder(norm, "normals.", normals_);
  groups.push_back(std::move(norm));

  ParamGroup<T> light{group::kLight, {}, {}};
  light.params.push_back({"light.weight", light_.weight});
  light.params.push_back({"light.bias", light_.bias});
  groups.push_back(std::move(light));

  ParamGroup<T> shader{group::kShader, {}, {}};
  append_encoder(shader, "shader.encoder.", shader_.encoder);
  shader.params.push_back({"shader.light_embed.weight", shader_.light_embed.weight});
  shader.params.push_back({"shader.light_embed.bias", shader_.light_embed.bias});
  append_decoder(shader, "shader.decoder.", shader_.decoder);
  groups.push_back(std::move(shader));
  return groups;
}

template <typename T>
std::vector<Tensor<T>> RinModel<T>::parameters(const std::string& group_name) const {
  for (const auto& g : parameter_groups()) {
    if (g.name != group_name) continue;
    std::vector<Tensor<T>> out;
    for (const auto& p : g.params) out.push_back(p.tensor);
    return out;
  }
  throw std::invalid_argument("unknown parameter group: " + group_name);
}

template <typename T>
std::size_t RinModel<T>::parameter_count(const std::string& group_name) const {
  std::size_t n = 0;
  for (const auto& t : parameters(group_name)) n += t.numel();
  return n;
}

template <typename T>
void RinModel<T>::set_train_groups(const std::set<std::string>& groups) {
  for (const auto& g : groups) {
    if (std::find(group::kAll.begin(), group::kAll.end(), g) == group::kAll.end()) {
      throw std::invalid_argument("unknown parameter group: " + g);
    }
  }
  train_groups_ = groups;
}

template <typename T>
void RinModel<T>::set_trainable(const std::set<std::string>& groups) {
  for (auto& g : parameter_groups()) {
    const bool on = groups.contains(g.name);
    for (auto& p : g.params) p.tensor.set_requires_grad(on);
  }
}

template <typename T>
RinModel<T> RinModel<T>::clone() const {
  RinModel<T> copy(config_, 0);
  copy.copy_from(*this);
  return copy;
}

template <typename T>
void RinModel<T>::copy_from(const RinModel& other) {
  if (!(other.config_ == config_)) throw std::invalid_argument("copy_from: config mismatch");
  auto dst = parameter_groups();
  const auto src = other.parameter_groups();
  for (std::size_t g = 0; g < dst.size(); ++g) {
    for (std::size_t i = 0; i < dst[g].params.size(); ++i) {
      auto d = dst[g].params[i].tensor.mutable_data();
      const auto s = src[g].params[i].tensor.data();
      std::copy(s.begin(), s.end(), d.begin());
      dst[g].params[i].tensor.set_requires_grad(src[g].params[i].tensor.requires_grad());
    }
    for (std::size_t i = 0; i < dst[g].buffers.size(); ++i) {
      auto d = dst[g].buffers[i].tensor.mutable_data();
      const auto s = src[g].buffers[i].tensor.data();
      std::copy(s.begin(), s.end(), d.begin());
    }
  }
  train_groups_ = other.train_groups_;
}

template class RinModel<float>;
template class RinModel<double>;
template Tensor<float> foreground_mask(const Tensor<float>&);
template Tensor<double> foreground_mask(const Tensor<double>&);

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointExtras& extras) {
  nlohmann::json header;
  header["format"] = "rin-checkpoint-1";
  header["config"] = model.config();
  nlohmann::json table = nlohmann::json::array();
  std::vector<Tensor<float>> tensors;
  for (const auto& g : model.parameter_groups()) {
    nlohmann::json entry{{"group", g.name}, {"offset", tensors.size()}};
    nlohmann::json names = nlohmann::json::array();
    for (const auto& p : g.params) {
      names.push_back(p.name);
      tensors.push_back(p.tensor);
    }
    for (const auto& b : g.buffers) {
      names.push_back(b.name);
      tensors.push_back(b.tensor);
    }
    entry["params"] = g.params.size();
    entry["buffers"] = g.buffers.size();
    entry["names"] = std::move(names);
    table.push_back(std::move(entry));
  }
  header["groups"] = std::move(table);
  nlohmann::json extra_names = nlohmann::json::array();
  header["extra_offset"] = tensors.size();
  for (const auto& e : extras.tensors) {
    extra_names.push_back(e.name);
    tensors.push_back(e.tensor);
  }
  header["extra"] = std::move(extra_names);
  header["meta"] = extras.meta;

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << header.dump() << '\n';
  for (const auto& t : tensors) write_tensor(os, t);
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint " + path.string() + " has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header is not JSON: " + std::string(e.what()));
  }
  if (header.value("format", "") != "rin-checkpoint-1") throw FormatError("not a RIN checkpoint");
  RinConfig cfg = header.at("config").get<RinConfig>();
  Model model(cfg, 0);

  std::vector<Tensor<float>> tensors;
  while (is.peek() != std::char_traits<char>::eof()) tensors.push_back(read_tensor<float>(is));

  auto groups = model.parameter_groups();
  const auto& table = header.at("groups");
  if (table.size() != groups.size()) throw FormatError("checkpoint group table does not match config");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& entry = table[g];
    if (entry.at("group").get<std::string>() != groups[g].name ||
        entry.at("params").get<std::size_t>() != groups[g].params.size() ||
        entry.at("buffers").get<std::size_t>() != groups[g].buffers.size()) {
      throw FormatError("checkpoint group '" + groups[g].name + "' does not match config");
    }
    std::size_t idx = entry.at("offset").get<std::size_t>();
    auto load_into = [&](NamedTensor<float>& dst) {
      if (idx >= tensors.size()) throw FormatError("checkpoint is truncated");
      const auto& src = tensors[idx++];
      if (src.shape() != dst.tensor.shape()) {
        throw FormatError("checkpoint tensor " + dst.name + " has shape " + shape_str(src.shape()) +
                          ", config expects " + shape_str(dst.tensor.shape()));
      }
      std::copy(src.data().begin(), src.data().end(), dst.tensor.mutable_data().begin());
    };
    for (auto& p : groups[g].params) load_into(p);
    for (auto& b : groups[g].buffers) load_into(b);
  }

  LoadedCheckpoint out{std::move(model), {}};
  out.extras.meta = header.value("meta", nlohmann::json::object());
  std::size_t idx = header.at("extra_offset").get<std::size_t>();
  for (const auto& name : header.at("extra")) {
    if (idx >= tensors.size()) throw FormatError("checkpoint is truncated");
    out.extras.tensors.push_back({name.get<std::string>(), tensors[idx++]});
  }
  return out;
}

}  // namespace rin
