#include "vsur/model.hpp"

#include <fstream>
#include <iterator>

#include "vsur/digest.hpp"
#include "vsur/errors.hpp"

namespace vsur {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

void ModelConfig::validate() const {
  // Resolutions below 64 are accepted for tiny test models.
  if (resolution < 8 || (resolution & (resolution - 1)) != 0) {
    throw ValidationError("resolution", "must be a power of two >= 8");
  }
  if (k < 1) throw ValidationError("k", "must be >= 1");
  if (sim_dim < 0 || vis_dim < 0 || view_dim < 0) throw ValidationError("dims", "negative");
  if (use_view && view_dim == 0) throw ValidationError("view_dim", "use_view requires view_dim > 0");
  if (sim_dim + vis_dim + (use_view ? view_dim : 0) == 0) {
    throw ValidationError("dims", "model needs at least one parameter input");
  }
  if (branch_width < 1) throw ValidationError("branch_width", "must be >= 1");
}

int ModelConfig::n_blocks() const {
  int n = 0;
  for (int side = 4; side < resolution; side *= 2) ++n;
  return n;
}

int ModelConfig::channels_at(int side) const {
  int c = 16 * k;
  for (int s = 4; s < side; s *= 2) c /= 2;
  return std::max(c, k);
}

ModelConfig ModelConfig::for_spec(const ParameterSpec& spec, int k, int resolution) {
  ModelConfig c;
  c.k = k;
  c.resolution = resolution;
  c.sim_dim = static_cast<int>(spec.sim_dim());
  c.vis_dim = static_cast<int>(spec.vis_dim());
  c.view_dim = static_cast<int>(spec.view_dim());
  c.use_view = spec.view_enabled;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"k", c.k},
       {"resolution", c.resolution},
       {"sim_dim", c.sim_dim},
       {"vis_dim", c.vis_dim},
       {"view_dim", c.view_dim},
       {"use_view", c.use_view},
       {"branch_width", c.branch_width}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.k = j.at("k").get<int>();
  c.resolution = j.at("resolution").get<int>();
  c.sim_dim = j.at("sim_dim").get<int>();
  c.vis_dim = j.at("vis_dim").get<int>();
  c.view_dim = j.at("view_dim").get<int>();
  c.use_view = j.at("use_view").get<bool>();
  c.branch_width = j.value("branch_width", c.branch_width);
}

void orthogonal_(torch::Tensor& weight, torch::Generator& gen) {
  torch::NoGradGuard no_grad;
  const auto rows = weight.size(0);
  const auto cols = weight.numel() / rows;
  auto flat = torch::randn({rows, cols}, gen, torch::TensorOptions().dtype(torch::kFloat64));
  const bool wide = rows < cols;
  if (wide) flat = flat.t();
  auto [q, r] = torch::linalg_qr(flat);
  // Sign fix makes the draw uniform over the orthogonal group.
  q = q * torch::sign(torch::diagonal(r)).unsqueeze(0);
  if (wide) q = q.t();
  weight.copy_(q.reshape(weight.sizes()).to(weight.dtype()));
}

namespace {

void normalize_into(torch::Tensor& dst, const torch::Tensor& src) {
  const double n = src.norm().item<double>();
  if (n > 1e-12) dst.copy_(src / n);
}

torch::Tensor random_unit(std::int64_t n, torch::Generator& gen) {
  auto t = torch::randn({n}, gen, torch::TensorOptions().dtype(torch::kFloat64));
  return (t / t.norm()).to(torch::kFloat32);
}

}  // namespace

torch::Tensor spectral_normalize(const torch::Tensor& weight2d, PowerIterationState& state,
                                 bool update) {
  if (update) {
    torch::NoGradGuard no_grad;
    const auto w = weight2d.detach();
    normalize_into(state.u, torch::mv(w.t(), state.v));
    normalize_into(state.v, torch::mv(w, state.u));
  }
  // Clones keep later in-place updates from invalidating this graph.
  auto sigma = torch::dot(state.v.clone(), torch::mv(weight2d, state.u.clone()));
  return weight2d / torch::clamp_min(sigma, 1e-12);
}

double spectral_sigma(const torch::Tensor& weight2d, const PowerIterationState& state) {
  torch::NoGradGuard no_grad;
  return torch::dot(state.v, torch::mv(weight2d.detach(), state.u)).item<double>();
}

SNLinearImpl::SNLinearImpl(int in, int out, torch::Generator& gen) {
  weight = register_parameter("weight", torch::empty({out, in}));
  orthogonal_(weight, gen);
  bias = register_parameter("bias", torch::zeros({out}));
  u = register_buffer("u", random_unit(in, gen));
  v = register_buffer("v", random_unit(out, gen));
  // One step from the random v so sigma is meaningful before any training.
  PowerIterationState st{u, v};
  spectral_normalize(weight.detach(), st, true);
}

torch::Tensor SNLinearImpl::forward(const torch::Tensor& x) {
  PowerIterationState st{u, v};
  return torch::nn::functional::linear(x, spectral_normalize(weight, st, is_training()), bias);
}

torch::Tensor SNLinearImpl::normalized_weight() {
  PowerIterationState st{u, v};
  return spectral_normalize(weight, st, false);
}

SNConv2dImpl::SNConv2dImpl(int in, int out, int kernel, torch::Generator& gen)
    : padding(kernel / 2) {
  weight = register_parameter("weight", torch::empty({out, in, kernel, kernel}));
  orthogonal_(weight, gen);
  bias = register_parameter("bias", torch::zeros({out}));
  u = register_buffer("u", random_unit(static_cast<std::int64_t>(in) * kernel * kernel, gen));
  v = register_buffer("v", random_unit(out, gen));
  PowerIterationState st{u, v};
  spectral_normalize(weight.detach().view({out, -1}), st, true);
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
  PowerIterationState st{u, v};
  const auto w = spectral_normalize(weight.view({weight.size(0), -1}), st, is_training());
  return torch::conv2d(x, w.view(weight.sizes()), bias, 1, padding);
}

torch::Tensor SNConv2dImpl::normalized_weight() {
  PowerIterationState st{u, v};
  return spectral_normalize(weight.view({weight.size(0), -1}), st, false);
}

namespace {

torch::nn::Conv2d make_conv(int in, int out, int kernel, torch::Generator& gen) {
  torch::nn::Conv2d conv(torch::nn::Conv2dOptions(in, out, kernel).padding(kernel / 2));
  orthogonal_(conv->weight, gen);
  torch::NoGradGuard no_grad;
  conv->bias.zero_();
  return conv;
}

torch::nn::Linear make_linear(int in, int out, torch::Generator& gen) {
  torch::nn::Linear fc(in, out);
  orthogonal_(fc->weight, gen);
  torch::NoGradGuard no_grad;
  fc->bias.zero_();
  return fc;
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{x.size(2) * 2, x.size(3) * 2})
                               .mode(torch::kNearest));
}

void check_params(const EncodedBatch& p, const ModelConfig& cfg) {
  auto check = [](const torch::Tensor& t, int dim, const char* name) {
    if (dim == 0) return;
    if (!t.defined() || t.dim() != 2 || t.size(1) != dim) {
      throw ShapeError(std::string(name) + " input must be (b, " + std::to_string(dim) + ")");
    }
  };
  check(p.sim, cfg.sim_dim, "sim");
  check(p.vis, cfg.vis_dim, "vis");
  if (cfg.use_view) check(p.view, cfg.view_dim, "view");
}

}  // namespace

UpBlockImpl::UpBlockImpl(int in, int out, torch::Generator& gen) {
  conv1 = register_module("conv1", make_conv(in, out, 3, gen));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(out));
  conv2 = register_module("conv2", make_conv(out, out, 3, gen));
  bn2 = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (in != out) shortcut = register_module("shortcut", make_conv(in, out, 1, gen));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x) {
  const auto up = upsample2x(x);
  auto h = torch::relu(bn1(conv1(up)));
  h = bn2(conv2(h));
  return torch::relu(h + (shortcut ? shortcut(up) : up));
}

RegressorImpl::RegressorImpl(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto gen = at::detail::createCPUGenerator(seed);
  int concat = 0;
  if (cfg_.sim_dim > 0) {
    sim_fc = register_module("sim_fc", make_linear(cfg_.sim_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  if (cfg_.vis_dim > 0) {
    vis_fc = register_module("vis_fc", make_linear(cfg_.vis_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  if (cfg_.use_view) {
    view_fc = register_module("view_fc", make_linear(cfg_.view_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  latent_fc = register_module("latent_fc", make_linear(concat, 4 * 4 * cfg_.latent_channels(), gen));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int side = 4; side < cfg_.resolution; side *= 2) {
    blocks->push_back(UpBlock(cfg_.channels_at(side), cfg_.channels_at(side * 2), gen));
  }
  out_conv = register_module("out_conv", make_conv(cfg_.channels_at(cfg_.resolution), 3, 3, gen));
}

torch::Tensor RegressorImpl::forward(const EncodedBatch& params) {
  check_params(params, cfg_);
  std::vector<torch::Tensor> parts;
  if (sim_fc) parts.push_back(torch::relu(sim_fc(params.sim)));
  if (vis_fc) parts.push_back(torch::relu(vis_fc(params.vis)));
  if (view_fc) parts.push_back(torch::relu(view_fc(params.view)));
  auto h = torch::relu(latent_fc(torch::cat(parts, 1)));
  h = h.view({h.size(0), cfg_.latent_channels(), 4, 4});
  for (const auto& block : *blocks) h = block->as<UpBlock>()->forward(h);
  return torch::tanh(out_conv(h));
}

DownBlockImpl::DownBlockImpl(int in, int out, bool first, torch::Generator& gen) : first_(first) {
  conv1 = register_module("conv1", SNConv2d(in, out, 3, gen));
  conv2 = register_module("conv2", SNConv2d(out, out, 3, gen));
  if (in != out || first) shortcut = register_module("shortcut", SNConv2d(in, out, 1, gen));
}

torch::Tensor DownBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(first_ ? x : torch::relu(x));
  h = torch::avg_pool2d(conv2(torch::relu(h)), 2);
  torch::Tensor sc;
  if (first_) {
    sc = shortcut(torch::avg_pool2d(x, 2));
  } else {
    sc = torch::avg_pool2d(shortcut ? shortcut(x) : x, 2);
  }
  return h + sc;
}

DiscriminatorImpl::DiscriminatorImpl(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto gen = at::detail::createCPUGenerator(seed);
  blocks = register_module("blocks", torch::nn::ModuleList());
  int in = 3;
  for (int side = cfg_.resolution; side > 4; side /= 2) {
    const int out = cfg_.channels_at(side / 2);
    blocks->push_back(DownBlock(in, out, side == cfg_.resolution, gen));
    in = out;
  }
  const int latent = cfg_.latent_channels();
  head = register_module("head", SNLinear(latent, 1, gen));
  int concat = 0;
  if (cfg_.sim_dim > 0) {
    sim_fc = register_module("sim_fc", SNLinear(cfg_.sim_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  if (cfg_.vis_dim > 0) {
    vis_fc = register_module("vis_fc", SNLinear(cfg_.vis_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  if (cfg_.use_view) {
    view_fc = register_module("view_fc", SNLinear(cfg_.view_dim, cfg_.branch_width, gen));
    concat += cfg_.branch_width;
  }
  embed = register_module("embed", SNLinear(concat, latent, gen));
}

torch::Tensor DiscriminatorImpl::image_latent(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.resolution ||
      images.size(3) != cfg_.resolution) {
    throw ShapeError("discriminator expects (b, 3, " + std::to_string(cfg_.resolution) + ", " +
                     std::to_string(cfg_.resolution) + ") images");
  }
  auto h = images;
  for (const auto& block : *blocks) h = block->as<DownBlock>()->forward(h);
  return torch::relu(h).sum({2, 3});
}

torch::Tensor DiscriminatorImpl::param_latent(const EncodedBatch& params) {
  check_params(params, cfg_);
  std::vector<torch::Tensor> parts;
  if (sim_fc) parts.push_back(torch::relu(sim_fc(params.sim)));
  if (vis_fc) parts.push_back(torch::relu(vis_fc(params.vis)));
  if (view_fc) parts.push_back(torch::relu(view_fc(params.view)));
  return embed(torch::cat(parts, 1));
}

torch::Tensor DiscriminatorImpl::logits(const torch::Tensor& images, const EncodedBatch& params) {
  const auto h = image_latent(images);
  const auto e = param_latent(params);
  return head(h).squeeze(1) + (e * h).sum(1);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images, const EncodedBatch& params) {
  return torch::sigmoid(logits(images, params));
}

std::vector<std::pair<std::string, torch::Tensor>> DiscriminatorImpl::normalized_weights() {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : named_modules()) {
    if (auto* lin = item.value()->as<SNLinearImpl>()) {
      out.emplace_back(item.key(), lin->normalized_weight());
    } else if (auto* conv = item.value()->as<SNConv2dImpl>()) {
      out.emplace_back(item.key(), conv->normalized_weight());
    }
  }
  return out;
}

FeatureComparatorImpl::FeatureComparatorImpl(std::string layer) : layer_(std::move(layer)) {
  if (layer_ != "relu1_1" && layer_ != "relu1_2") {
    throw ValidationError("layer", "unsupported extraction layer " + layer_);
  }
  conv1_1 = register_module("conv1_1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 64, 3).padding(1)));
  conv1_2 = register_module("conv1_2", torch::nn::Conv2d(torch::nn::Conv2dOptions(64, 64, 3).padding(1)));
  for (auto& p : parameters()) p.set_requires_grad(false);
}

torch::Tensor FeatureComparatorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("comparator expects (b, 3, h, w)");
  const auto opts = images.options();
  const auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
  const auto std = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
  auto x = ((images + 1.0) * 0.5 - mean) / std;
  x = torch::relu(conv1_1(x));
  if (layer_ == "relu1_1") return x;
  return torch::relu(conv1_2(x));
}

FeatureComparator FeatureComparator::fallback(const std::string& layer) {
  FeatureComparator fc(std::make_shared<FeatureComparatorImpl>(layer));
  auto gen = at::detail::createCPUGenerator(FeatureComparatorImpl::kFallbackSeed);
  torch::NoGradGuard no_grad;
  for (auto* conv : {&fc->conv1_1, &fc->conv1_2}) {
    auto& w = (*conv)->weight;
    const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
    w.copy_(torch::randn(w.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64)) *
            std::sqrt(2.0 / fan_in));
    (*conv)->bias.zero_();
  }
  fc->source_ = "fallback";
  fc->eval();
  return fc;
}

FeatureComparator FeatureComparator::pretrained(const fs::path& path, const std::string& layer) {
  if (!fs::exists(path)) {
    throw LoadError("pretrained comparator weights not found at " + path.string() +
                    "; use the bundled fallback comparator (--comparator fallback)");
  }
  FeatureComparator fc(std::make_shared<FeatureComparatorImpl>(layer));
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    torch::NoGradGuard no_grad;
    for (const char* name : {"conv1_1", "conv1_2"}) {
      auto conv = fc->named_children()[name]->as<torch::nn::Conv2dImpl>();
      torch::Tensor w, b;
      archive.read(std::string(name) + ".weight", w);
      archive.read(std::string(name) + ".bias", b);
      conv->weight.copy_(w);
      conv->bias.copy_(b);
    }
  } catch (const c10::Error& e) {
    throw LoadError("cannot read pretrained comparator weights from " + path.string() + ": " +
                    e.what_without_backtrace() +
                    "; use the bundled fallback comparator (--comparator fallback)");
  }
  fc->source_ = path.string();
  fc->eval();
  return fc;
}

FeatureComparator FeatureComparator::from_source(const std::string& source, const std::string& layer) {
  if (source.empty() || source == "fallback") return fallback(layer);
  return pretrained(source, layer);
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

std::int64_t parameter_bytes(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel() * 4;
  for (const auto& b : m.buffers()) n += b.numel() * 4;
  return n;
}

void copy_module_state(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  const auto src_params = src.named_parameters();
  for (auto& p : dst.named_parameters()) p.value().copy_(src_params[p.key()]);
  const auto src_bufs = src.named_buffers();
  for (auto& b : dst.named_buffers()) b.value().copy_(src_bufs[b.key()]);
}

Regressor clone_regressor(const Regressor& src, torch::Dtype dtype) {
  Regressor out(src->config(), 0);
  copy_module_state(*out, *src);
  out->to(dtype);
  out->train(src->is_training());
  return out;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

void save_checkpoint(const fs::path& path, const CheckpointMeta& meta, Regressor& regressor,
                     Discriminator* discriminator, torch::optim::Optimizer* opt_regressor,
                     torch::optim::Optimizer* opt_discriminator) {
  nlohmann::json j = {{"format_version", meta.format_version},
                      {"model", meta.model},
                      {"training", meta.training},
                      {"spec", meta.spec},
                      {"iteration", meta.iteration},
                      {"has_discriminator", discriminator != nullptr}};
  torch::serialize::OutputArchive root;
  root.write("meta", c10::IValue(j.dump()));
  torch::serialize::OutputArchive r;
  regressor->save(r);
  root.write("regressor", r);
  if (discriminator) {
    torch::serialize::OutputArchive d;
    (*discriminator)->save(d);
    root.write("discriminator", d);
  }
  if (opt_regressor) {
    torch::serialize::OutputArchive o;
    opt_regressor->save(o);
    root.write("opt_regressor", o);
  }
  if (opt_discriminator) {
    torch::serialize::OutputArchive o;
    opt_discriminator->save(o);
    root.write("opt_discriminator", o);
  }
  // Write-then-rename so an interrupted save never clobbers the previous file.
  const auto tmp = fs::path(path.string() + ".tmp");
  root.save_to(tmp.string());
  fs::rename(tmp, path);
}

namespace {

CheckpointMeta read_meta(torch::serialize::InputArchive& root) {
  c10::IValue iv;
  root.read("meta", iv);
  const auto j = nlohmann::json::parse(iv.toStringRef());
  CheckpointMeta meta;
  meta.format_version = j.at("format_version").get<int>();
  if (meta.format_version != CheckpointMeta::kFormatVersion) {
    throw LoadError("unsupported checkpoint format_version " + std::to_string(meta.format_version));
  }
  meta.model = j.at("model").get<ModelConfig>();
  meta.training = j.at("training");
  meta.spec = j.at("spec").get<ParameterSpec>();
  meta.iteration = j.at("iteration").get<std::int64_t>();
  meta.has_discriminator = j.at("has_discriminator").get<bool>();
  return meta;
}

void check_expected(const ModelConfig& got, const ModelConfig& want) {
  auto field = [](const char* name, auto a, auto b) {
    if (a != b) {
      throw LoadError(std::string("checkpoint ") + name + "=" + std::to_string(a) +
                      " but the model is configured with " + name + "=" + std::to_string(b));
    }
  };
  field("k", got.k, want.k);
  field("resolution", got.resolution, want.resolution);
  field("sim_dim", got.sim_dim, want.sim_dim);
  field("vis_dim", got.vis_dim, want.vis_dim);
  field("view_dim", got.view_dim, want.view_dim);
  field("use_view", got.use_view, want.use_view);
  field("branch_width", got.branch_width, want.branch_width);
}

}  // namespace

LoadedModel load_checkpoint(const fs::path& path, const std::optional<ModelConfig>& expected) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  LoadedModel out;
  try {
    torch::serialize::InputArchive root;
    root.load_from(path.string());
    out.meta = read_meta(root);
    if (expected) check_expected(out.meta.model, *expected);
    out.regressor = Regressor(out.meta.model, 0);
    torch::serialize::InputArchive r;
    root.read("regressor", r);
    out.regressor->load(r);
    if (out.meta.has_discriminator) {
      out.discriminator = Discriminator(out.meta.model, 0);
      torch::serialize::InputArchive d;
      root.read("discriminator", d);
      out.discriminator->load(d);
      out.discriminator->eval();
    }
  } catch (const c10::Error& e) {
    throw LoadError("cannot load checkpoint " + path.string() + ": " + e.what_without_backtrace());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt checkpoint metadata in " + path.string() + ": " + e.what());
  }
  out.regressor->eval();
  out.digest = file_digest(path);
  return out;
}

void load_optimizer_state(const fs::path& path, const std::string& key, torch::optim::Optimizer& opt) {
  try {
    torch::serialize::InputArchive root;
    root.load_from(path.string());
    torch::serialize::InputArchive o;
    if (!root.try_read(key, o)) throw LoadError("checkpoint has no optimizer state '" + key + "'");
    opt.load(o);
  } catch (const c10::Error& e) {
    throw LoadError("cannot load optimizer state from " + path.string() + ": " +
                    e.what_without_backtrace());
  }
}

}  // namespace vsur
