#include "hyperseg/models.hpp"

#include <cmath>
#include <json.hpp>

#include "hyperseg/ops.hpp"

namespace hyperseg {

using nlohmann::json;

std::string to_string(ModelKind kind) { return kind == ModelKind::kPlain ? "plain" : "hyper"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "plain") return ModelKind::kPlain;
  if (s == "hyper") return ModelKind::kHyper;
  throw std::invalid_argument("unknown model kind '" + s + "' (expected plain or hyper)");
}

void ModelSpec::validate() const {
  if (spatial_rank != 2) throw std::invalid_argument("only spatial_rank 2 is supported");
  if (kernel_depths.empty()) throw std::invalid_argument("kernel_depths must be nonempty");
  for (auto d : kernel_depths)
    if (d == 0) throw std::invalid_argument("kernel_depths entries must be > 0");
  if (input_channels == 0) throw std::invalid_argument("input_channels must be > 0");
  if (kernel_size == 0 || kernel_size % 2 == 0)
    throw std::invalid_argument("kernel_size must be odd");
  if (kind == ModelKind::kHyper && (hypervector_size < 1 || mapping_layers < 1))
    throw std::invalid_argument("hyper models need hypervector_size >= 1 and mapping_layers >= 1");
}

Shape ConvSite::weight_shape() const {
  return transposed ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
}

// ---------------------------------------------------------------------------
// Inventory

namespace {

std::string level_name(const char* prefix, std::size_t l) { return prefix + std::to_string(l); }

bool has_projection(const ConvSite& main, std::size_t cin) {
  return main.stride != 1 || main.cout != cin;
}

}  // namespace

LayerInventory layer_inventory(const ModelSpec& spec) {
  spec.validate();
  LayerInventory inv;
  const auto& d = spec.kernel_depths;
  const std::size_t k = spec.kernel_size;
  const int pad = static_cast<int>(k / 2);
  std::size_t cin = spec.input_channels;
  for (std::size_t l = 0; l < spec.levels(); ++l) {
    const std::string base = level_name("enc", l);
    const int stride = l == 0 ? 1 : 2;
    ConvSite main{base + ".conv", cin, d[l], k, stride, pad, false};
    inv.convs.push_back(main);
    if (has_projection(main, cin)) inv.convs.push_back({base + ".skip", cin, d[l], 1, stride, 0, false});
    inv.norms.push_back({base + ".norm", d[l]});
    inv.activations.push_back({base + ".act", d[l]});
    cin = d[l];
  }
  for (std::size_t l = spec.levels() - 1; l >= 1; --l) {
    const std::string base = level_name("dec", l);
    inv.convs.push_back({base + ".up", d[l], d[l - 1], 2, 2, 0, true});
    inv.convs.push_back({base + ".conv", 2 * d[l - 1], d[l - 1], k, 1, pad, false});
    inv.norms.push_back({base + ".norm", d[l - 1]});
    inv.activations.push_back({base + ".act", d[l - 1]});
  }
  inv.convs.push_back({"head", d[0], 1, 1, 1, 0, false});
  return inv;
}

std::vector<std::pair<std::string, Shape>> parameter_inventory(const ModelSpec& spec) {
  const LayerInventory inv = layer_inventory(spec);
  std::vector<std::pair<std::string, Shape>> out;
  if (spec.kind == ModelKind::kHyper) {
    const std::size_t z = spec.hypervector_size;
    std::size_t din = 2;
    for (std::size_t i = 0; i < spec.mapping_layers; ++i) {
      out.emplace_back("mapping." + std::to_string(i) + ".weight", Shape{z, din});
      out.emplace_back("mapping." + std::to_string(i) + ".bias", Shape{z});
      din = z;
    }
    for (const auto& c : inv.convs) {
      out.emplace_back(c.name + ".wgen.weight", Shape{c.weight_count(), z});
      out.emplace_back(c.name + ".wgen.bias", Shape{c.weight_count()});
      out.emplace_back(c.name + ".bgen.weight", Shape{c.cout, z});
      out.emplace_back(c.name + ".bgen.bias", Shape{c.cout});
    }
  } else {
    for (const auto& c : inv.convs) {
      out.emplace_back(c.name + ".weight", c.weight_shape());
      out.emplace_back(c.name + ".bias", Shape{c.cout});
    }
  }
  for (const auto& n : inv.norms) {
    out.emplace_back(n.name + ".gamma", Shape{n.channels});
    out.emplace_back(n.name + ".beta", Shape{n.channels});
  }
  for (const auto& a : inv.activations) out.emplace_back(a.name + ".slope", Shape{a.channels});
  return out;
}

std::vector<std::pair<std::string, Shape>> buffer_inventory(const ModelSpec& spec) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& n : layer_inventory(spec).norms) {
    out.emplace_back(n.name + ".running_mean", Shape{n.channels});
    out.emplace_back(n.name + ".running_var", Shape{n.channels});
  }
  return out;
}

std::size_t count_params(const ModelSpec& spec) {
  const LayerInventory inv = layer_inventory(spec);
  std::size_t total = 0;
  if (spec.kind == ModelKind::kHyper) {
    const std::size_t z = spec.hypervector_size;
    total += (2 * z + z) + (spec.mapping_layers - 1) * (z * z + z);
    for (const auto& c : inv.convs) total += (z + 1) * c.weight_count() + (z + 1) * c.cout;
  } else {
    for (const auto& c : inv.convs) total += c.weight_count() + c.cout;
  }
  for (const auto& n : inv.norms) total += 2 * n.channels;
  for (const auto& a : inv.activations) total += a.channels;
  return total;
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

Tensor apply_conv(const Tensor& x, const ConvWeights& w, const ConvSite& site) {
  return site.transposed ? ops::conv2d_transposed(x, w.weight, w.bias, site.stride, site.padding)
                         : ops::conv2d(x, w.weight, w.bias, site.stride, site.padding);
}

Tensor norm_act(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                Tensor& running_var, const Tensor& slope, bool training) {
  ops::BatchNormOptions bn;
  bn.training = training;
  return ops::prelu(ops::batch_norm(x, gamma, beta, running_mean, running_var, bn), slope);
}

}  // namespace

Tensor residual_unit(const Tensor& x, const ConvWeights& main, const ConvSite& main_site,
                     const ConvWeights* projection, const ConvSite* projection_site,
                     const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                     Tensor& running_var, const Tensor& slope, bool training) {
  const Tensor y = norm_act(apply_conv(x, main, main_site), gamma, beta, running_mean,
                            running_var, slope, training);
  const Tensor skip = projection ? apply_conv(x, *projection, *projection_site) : x;
  return ops::add(y, skip);
}

// ---------------------------------------------------------------------------
// SegmentationNet

namespace {

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))); }

std::size_t kernel_fan_in(const ConvSite& c) {
  if (!c.transposed) return c.cin * c.k * c.k;
  const std::size_t per = (c.k * c.k) / static_cast<std::size_t>(c.stride * c.stride);
  return c.cin * std::max<std::size_t>(per, 1);
}

void fill_normal(Tensor& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std);
  for (auto& v : t.mutable_data()) v = nd(rng);
}

}  // namespace

SegmentationNet SegmentationNet::create(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const LayerInventory inv = layer_inventory(spec);
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor> params;
  for (auto& [name, shape] : parameter_inventory(spec)) params.emplace_back(name, Tensor(shape));
  std::vector<NamedTensor> buffers;
  for (auto& [name, shape] : buffer_inventory(spec)) buffers.emplace_back(name, Tensor(shape));

  SegmentationNet net = from_tensors(spec, std::move(params), std::move(buffers));
  if (spec.kind == ModelKind::kHyper) {
    const std::size_t z = spec.hypervector_size;
    std::size_t din = 2;
    for (std::size_t i = 0; i < spec.mapping_layers; ++i) {
      fill_normal(net.param("mapping." + std::to_string(i) + ".weight"), he_std(din), rng);
      din = z;
    }
    // Generated kernels start near the plain-network init: the constant part
    // (generator bias) and the h-dependent part share the kernel's fan-in scale.
    for (const auto& c : inv.convs) {
      const double kstd = 1.0 / std::sqrt(static_cast<double>(kernel_fan_in(c)));
      fill_normal(net.param(c.name + ".wgen.weight"), kstd / std::sqrt(static_cast<double>(z)), rng);
      fill_normal(net.param(c.name + ".wgen.bias"), kstd, rng);
    }
  } else {
    for (const auto& c : inv.convs) fill_normal(net.param(c.name + ".weight"), he_std(kernel_fan_in(c)), rng);
  }
  for (const auto& n : inv.norms) {
    for (auto& v : net.param(n.name + ".gamma").mutable_data()) v = 1.0;
    for (auto& v : net.buffers_[net.buffer_index_.at(n.name + ".running_var")].second.mutable_data()) v = 1.0;
  }
  for (const auto& a : inv.activations)
    for (auto& v : net.param(a.name + ".slope").mutable_data()) v = 0.25;
  return net;
}

SegmentationNet SegmentationNet::from_tensors(const ModelSpec& spec, std::vector<NamedTensor> params,
                                              std::vector<NamedTensor> buffers) {
  spec.validate();
  SegmentationNet net;
  net.spec_ = spec;
  net.layers_ = layer_inventory(spec);

  auto adopt = [](const std::vector<std::pair<std::string, Shape>>& expected,
                  std::vector<NamedTensor>& given, std::vector<NamedTensor>& dst,
                  std::unordered_map<std::string, std::size_t>& index, const char* what) {
    std::unordered_map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < given.size(); ++i) {
      if (!by_name.emplace(given[i].first, i).second)
        throw ModelError(std::string(what) + " '" + given[i].first + "' appears more than once");
    }
    for (const auto& [name, shape] : expected) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ModelError(std::string(what) + " '" + name + "' is missing");
      Tensor& t = given[it->second].second;
      if (t.shape() != shape)
        throw ModelError(std::string(what) + " '" + name + "' has shape " + shape_str(t.shape()) +
                         ", expected " + shape_str(shape));
      index.emplace(name, dst.size());
      dst.emplace_back(name, t);
      by_name.erase(it);
    }
    if (!by_name.empty())
      throw ModelError(std::string(what) + " '" + by_name.begin()->first + "' is not part of the architecture");
  };
  adopt(parameter_inventory(spec), params, net.params_, net.param_index_, "parameter");
  adopt(buffer_inventory(spec), buffers, net.buffers_, net.buffer_index_, "buffer");
  for (auto& [name, t] : net.params_) t.set_requires_grad(true);
  return net;
}

SegmentationNet SegmentationNet::clone() const {
  std::vector<NamedTensor> p, b;
  for (const auto& [n, t] : params_) p.emplace_back(n, t.clone());
  for (const auto& [n, t] : buffers_) b.emplace_back(n, t.clone());
  return from_tensors(spec_, std::move(p), std::move(b));
}

std::vector<Tensor> SegmentationNet::trainable() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [n, t] : params_) out.push_back(t);
  return out;
}

const Tensor& SegmentationNet::param(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ModelError("no parameter named '" + name + "'");
  return params_[it->second].second;
}

Tensor& SegmentationNet::param(const std::string& name) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ModelError("no parameter named '" + name + "'");
  return params_[it->second].second;
}

const Tensor& SegmentationNet::buffer(const std::string& name) const {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ModelError("no buffer named '" + name + "'");
  return buffers_[it->second].second;
}

void SegmentationNet::zero_grad() {
  for (auto& [n, t] : params_)
    if (t.has_grad()) t.zero_grad();
}

Tensor SegmentationNet::mapping_forward(TverskyParams h) const {
  if (kind() != ModelKind::kHyper) throw ModelError("mapping_forward on a plain model");
  h.validate();
  Tensor z(Shape{1, 2}, {h.alpha, h.beta});
  for (std::size_t i = 0; i < spec_.mapping_layers; ++i) {
    const std::string base = "mapping." + std::to_string(i);
    z = ops::relu(ops::dense(z, param(base + ".weight"), param(base + ".bias")));
  }
  return z;
}

ConvWeights SegmentationNet::generate(const ConvSite& site, const Tensor& hypervector) const {
  if (kind() != ModelKind::kHyper) throw ModelError("generate on a plain model");
  const Tensor w = ops::dense(hypervector, param(site.name + ".wgen.weight"), param(site.name + ".wgen.bias"));
  const Tensor b = ops::dense(hypervector, param(site.name + ".bgen.weight"), param(site.name + ".bgen.bias"));
  return {ops::reshape(w, site.weight_shape()), ops::reshape(b, Shape{site.cout})};
}

ConvWeights SegmentationNet::conv_weights(const ConvSite& site, const Tensor* hypervector) const {
  if (hypervector) return generate(site, *hypervector);
  return {param(site.name + ".weight"), param(site.name + ".bias")};
}

Tensor SegmentationNet::forward(const Tensor& image, const ForwardOptions& opts,
                                std::optional<TverskyParams> h) const {
  if (image.rank() != 4 || image.dim(1) != spec_.input_channels)
    throw ShapeError("forward: expected image [N," + std::to_string(spec_.input_channels) +
                     ",H,W], got " + shape_str(image.shape()));
  const std::size_t div = spec_.spatial_divisor();
  if (image.dim(2) % div != 0 || image.dim(3) % div != 0)
    throw ShapeError("forward: spatial extents " + shape_str(image.shape()) + " must be multiples of " +
                     std::to_string(div) + "; pad the image to the next multiple");
  if (kind() == ModelKind::kHyper && !h) throw ModelError("hyper model forward needs TverskyParams");
  if (kind() == ModelKind::kPlain && h) throw ModelError("plain model forward takes no TverskyParams");
  if (opts.training && opts.dropout > 0.0 && !opts.rng)
    throw std::invalid_argument("forward: dropout in training needs an rng");

  std::optional<Tensor> z;
  if (h) z = mapping_forward(*h);
  const Tensor* zp = z ? &*z : nullptr;

  auto find_site = [this](const std::string& name) -> const ConvSite* {
    for (const auto& c : layers_.convs)
      if (c.name == name) return &c;
    return nullptr;
  };
  auto norm_buffers = [this](const std::string& base) {
    return std::pair<Tensor, Tensor>{buffer(base + ".running_mean"), buffer(base + ".running_var")};
  };

  std::vector<Tensor> skips;
  Tensor x = image;
  for (std::size_t l = 0; l < spec_.levels(); ++l) {
    const std::string base = level_name("enc", l);
    const ConvSite* main = find_site(base + ".conv");
    const ConvSite* proj = find_site(base + ".skip");
    const ConvWeights mw = conv_weights(*main, zp);
    std::optional<ConvWeights> pw;
    if (proj) pw = conv_weights(*proj, zp);
    auto [rm, rv] = norm_buffers(base + ".norm");
    x = residual_unit(x, mw, *main, pw ? &*pw : nullptr, proj, param(base + ".norm.gamma"),
                      param(base + ".norm.beta"), rm, rv, param(base + ".act.slope"), opts.training);
    if (opts.training && opts.dropout > 0.0) x = ops::channel_dropout(x, opts.dropout, *opts.rng);
    skips.push_back(x);
  }
  for (std::size_t l = spec_.levels() - 1; l >= 1; --l) {
    const std::string base = level_name("dec", l);
    const ConvSite* up = find_site(base + ".up");
    const ConvSite* conv = find_site(base + ".conv");
    x = apply_conv(x, conv_weights(*up, zp), *up);
    x = ops::concat_channels(x, skips[l - 1]);
    x = apply_conv(x, conv_weights(*conv, zp), *conv);
    auto [rm, rv] = norm_buffers(base + ".norm");
    x = norm_act(x, param(base + ".norm.gamma"), param(base + ".norm.beta"), rm, rv,
                 param(base + ".act.slope"), opts.training);
  }
  const ConvSite* head = find_site("head");
  // Keeps the map strictly inside (0, 1) where the sigmoid would round to 0 or 1.
  return ops::clamp(ops::sigmoid(apply_conv(x, conv_weights(*head, zp), *head)), kProbabilityFloor,
                    1.0 - kProbabilityFloor);
}

SegmentationNet SegmentationNet::export_plain(TverskyParams h) const {
  if (kind() != ModelKind::kHyper) throw ModelError("export_plain on a plain model");
  ModelSpec plain_spec = spec_;
  plain_spec.kind = ModelKind::kPlain;
  const Tensor z = mapping_forward(h);
  std::vector<NamedTensor> p, b;
  for (const auto& c : layers_.convs) {
    ConvWeights w = generate(c, z);
    p.emplace_back(c.name + ".weight", w.weight.clone());
    p.emplace_back(c.name + ".bias", w.bias.clone());
  }
  for (const auto& [name, t] : params_)
    if (name.find("gen.") == std::string::npos && name.rfind("mapping.", 0) != 0)
      p.emplace_back(name, t.clone());
  for (const auto& [name, t] : buffers_) b.emplace_back(name, t.clone());
  return from_tensors(plain_spec, std::move(p), std::move(b));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json spec_to_json(const ModelSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"spatial_rank", s.spatial_rank},
              {"kernel_depths", s.kernel_depths},
              {"hypervector_size", s.hypervector_size},
              {"mapping_layers", s.mapping_layers},
              {"input_channels", s.input_channels},
              {"kernel_size", s.kernel_size}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.kind = model_kind_from_string(j.at("kind").get<std::string>());
  s.spatial_rank = j.at("spatial_rank").get<int>();
  s.kernel_depths = j.at("kernel_depths").get<std::vector<std::size_t>>();
  s.hypervector_size = j.at("hypervector_size").get<std::size_t>();
  s.mapping_layers = j.at("mapping_layers").get<std::size_t>();
  s.input_channels = j.at("input_channels").get<std::size_t>();
  s.kernel_size = j.at("kernel_size").get<std::size_t>();
  return s;
}

constexpr const char* kAdamM = "adam.m.";
constexpr const char* kAdamV = "adam.v.";

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const SegmentationNet& m = ckpt.model;
  std::vector<NamedTensor> all;
  std::vector<std::string> roles;
  for (const auto& nt : m.parameters()) {
    all.push_back(nt);
    roles.emplace_back("param");
  }
  for (const auto& nt : m.buffers()) {
    all.push_back(nt);
    roles.emplace_back("buffer");
  }
  json optim = nullptr;
  if (ckpt.optimizer) {
    const AdamState& st = *ckpt.optimizer;
    for (std::size_t i = 0; i < m.parameters().size() && i < st.m.size(); ++i) {
      if (st.m[i].empty()) continue;
      const auto& [name, t] = m.parameters()[i];
      all.emplace_back(kAdamM + name, Tensor(t.shape(), st.m[i]));
      roles.emplace_back("optimizer");
      all.emplace_back(kAdamV + name, Tensor(t.shape(), st.v[i]));
      roles.emplace_back("optimizer");
    }
    optim = json{{"t", st.t},
                 {"lr", st.config.lr},
                 {"beta1", st.config.beta1},
                 {"beta2", st.config.beta2},
                 {"eps", st.config.eps},
                 {"weight_decay", st.config.weight_decay}};
  }
  const auto records = write_tensor_blob(dir / "weights.bin", all);
  json tensors = json::array();
  for (std::size_t i = 0; i < records.size(); ++i)
    tensors.push_back(json{{"name", records[i].name},
                           {"shape", records[i].shape},
                           {"offset", records[i].offset},
                           {"count", records[i].count},
                           {"role", roles[i]}});
  json manifest{{"format_version", kCheckpointFormatVersion},
                {"spec", spec_to_json(m.spec())},
                {"tensors", tensors},
                {"optimizer", optim},
                {"metadata",
                 {{"seed", ckpt.meta.seed},
                  {"epochs", ckpt.meta.epochs},
                  {"loss_curve", ckpt.meta.loss_curve},
                  {"tags", ckpt.meta.tags}}}};
  write_text(dir / "manifest", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, std::optional<ModelKind> expected_kind) {
  if (!std::filesystem::exists(dir / "manifest"))
    throw FormatError("no checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest"));
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  const ModelSpec spec = spec_from_json(manifest.at("spec"));
  if (expected_kind && *expected_kind != spec.kind)
    throw ModelError("checkpoint " + dir.string() + " holds a " + to_string(spec.kind) +
                     " model, expected " + to_string(*expected_kind));

  std::vector<TensorRecord> records;
  std::vector<std::string> roles;
  for (const auto& t : manifest.at("tensors")) {
    records.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(),
                       t.at("offset").get<std::uint64_t>(), t.at("count").get<std::uint64_t>()});
    roles.push_back(t.at("role").get<std::string>());
  }
  auto tensors = read_tensor_blob(dir / "weights.bin", records);

  std::vector<NamedTensor> params, buffers;
  std::unordered_map<std::string, Tensor> moments;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (roles[i] == "param") params.push_back(std::move(tensors[i]));
    else if (roles[i] == "buffer") buffers.push_back(std::move(tensors[i]));
    else if (roles[i] == "optimizer") moments.emplace(tensors[i].first, tensors[i].second);
    else throw FormatError("tensor '" + tensors[i].first + "' has unknown role '" + roles[i] + "'");
  }
  Checkpoint ckpt{SegmentationNet::from_tensors(spec, std::move(params), std::move(buffers)), std::nullopt, {}};

  const json& optim = manifest.at("optimizer");
  if (!optim.is_null()) {
    AdamState st;
    st.t = optim.at("t").get<std::int64_t>();
    st.config = {optim.at("lr").get<double>(), optim.at("beta1").get<double>(),
                 optim.at("beta2").get<double>(), optim.at("eps").get<double>(),
                 optim.at("weight_decay").get<double>()};
    for (const auto& [name, t] : ckpt.model.parameters()) {
      auto m = moments.find(kAdamM + name);
      auto v = moments.find(kAdamV + name);
      if (m != moments.end() && v != moments.end()) {
        st.m.emplace_back(m->second.data().begin(), m->second.data().end());
        st.v.emplace_back(v->second.data().begin(), v->second.data().end());
      } else {
        st.m.emplace_back();
        st.v.emplace_back();
      }
    }
    ckpt.optimizer = std::move(st);
  }
  const json& meta = manifest.at("metadata");
  ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
  ckpt.meta.epochs = meta.at("epochs").get<std::size_t>();
  ckpt.meta.loss_curve = meta.at("loss_curve").get<std::vector<double>>();
  ckpt.meta.tags = meta.at("tags").get<std::map<std::string, std::string>>();
  return ckpt;
}

}  // namespace hyperseg
