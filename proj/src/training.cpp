#include "vsur/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vsur/errors.hpp"
#include "vsur/random.hpp"

namespace vsur {

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::mse: return "mse";
    case LossMode::feat: return "feat";
    case LossMode::adv: return "adv";
    case LossMode::feat_adv: return "feat+adv";
  }
  return "?";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "mse") return LossMode::mse;
  if (s == "feat") return LossMode::feat;
  if (s == "adv") return LossMode::adv;
  if (s == "feat+adv" || s == "feat_adv") return LossMode::feat_adv;
  throw ValidationError("loss_mode", "expected mse, feat, adv or feat+adv, got '" + s + "'");
}

bool is_adversarial(LossMode m) { return m == LossMode::adv || m == LossMode::feat_adv; }

void TrainingConfig::validate() const {
  if (!(lambda >= 0.0)) throw ValidationError("lambda", "must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  if (!(lr_regressor > 0.0)) throw ValidationError("lr_regressor", "must be > 0");
  if (!(lr_discriminator > 0.0)) throw ValidationError("lr_discriminator", "must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ValidationError("beta1", "must be in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ValidationError("beta2", "must be in [0, 1)");
  if (max_iterations < 0) throw ValidationError("max_iterations", "must be >= 0");
  if (checkpoint_every < 1) throw ValidationError("checkpoint_every", "must be >= 1");
  if (log_every < 1) throw ValidationError("log_every", "must be >= 1");
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = {{"loss_mode", to_string(c.loss_mode)},
       {"lambda", c.lambda},
       {"batch_size", c.batch_size},
       {"lr_regressor", c.lr_regressor},
       {"lr_discriminator", c.lr_discriminator},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"max_iterations", c.max_iterations},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"comparator", c.comparator},
       {"feature_layer", c.feature_layer}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
  c = TrainingConfig{};
  if (j.contains("loss_mode")) c.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  c.lambda = j.value("lambda", c.lambda);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_regressor = j.value("lr_regressor", c.lr_regressor);
  c.lr_discriminator = j.value("lr_discriminator", c.lr_discriminator);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  c.deterministic = j.value("deterministic", c.deterministic);
  c.comparator = j.value("comparator", c.comparator);
  c.feature_layer = j.value("feature_layer", c.feature_layer);
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeError(os.str());
  }
}

}  // namespace

torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  check_same_shape(pred, target, "mse_loss");
  return (pred - target).pow(2).mean();
}

torch::Tensor feature_loss(FeatureComparator& comparator, const torch::Tensor& pred,
                           const torch::Tensor& target) {
  check_same_shape(pred, target, "feature_loss");
  const auto diff = comparator(target) - comparator(pred);
  return diff.pow(2).sum() / static_cast<double>(diff.numel());
}

torch::Tensor adv_loss_R(const torch::Tensor& d_fake) {
  return -torch::log(torch::clamp(d_fake, kLogClamp, 1.0 - kLogClamp)).mean();
}

torch::Tensor adv_loss_D(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  check_same_shape(d_real, d_fake, "adv_loss_D");
  const auto real = torch::clamp(d_real, kLogClamp, 1.0 - kLogClamp);
  const auto fake = torch::clamp(d_fake, kLogClamp, 1.0 - kLogClamp);
  return -(torch::log(real) + torch::log(1.0 - fake)).mean();
}

torch::Tensor adv_loss_R_logits(const torch::Tensor& fake_logits) {
  return torch::softplus(-fake_logits).mean();
}

torch::Tensor adv_loss_D_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return (torch::softplus(-real_logits) + torch::softplus(fake_logits)).mean();
}

torch::Tensor combined_loss(const TrainingConfig& cfg, const LossTerms& terms) {
  switch (cfg.loss_mode) {
    case LossMode::mse: return terms.mse;
    case LossMode::feat: return terms.feat;
    case LossMode::adv: return terms.adv;
    case LossMode::feat_adv: return terms.feat + cfg.lambda * terms.adv;
  }
  throw ValidationError("loss_mode", "unknown");
}

nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j = {{"iteration", r.iteration}, {"L_mse", r.l_mse}, {"L", r.total}, {"wall_ms", r.wall_ms}};
  if (r.l_feat) j["L_feat"] = *r.l_feat;
  if (r.l_adv_R) j["L_adv_R"] = *r.l_adv_R;
  if (r.l_adv_D) j["L_adv_D"] = *r.l_adv_D;
  if (r.d_real) j["D_real"] = *r.d_real;
  if (r.d_fake) j["D_fake"] = *r.d_fake;
  return j;
}

bool same_losses(const LogRecord& a, const LogRecord& b) {
  return a.iteration == b.iteration && a.l_mse == b.l_mse && a.l_feat == b.l_feat &&
         a.l_adv_R == b.l_adv_R && a.l_adv_D == b.l_adv_D && a.total == b.total &&
         a.d_real == b.d_real && a.d_fake == b.d_fake;
}

namespace {

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

void ensure_finite(std::int64_t iteration, const LogRecord& rec, const torch::Tensor& value,
                   const char* name) {
  const double v = value.item<double>();
  if (std::isfinite(v)) return;
  std::ostringstream os;
  os << "non-finite " << name << " at iteration " << iteration << ": " << to_json(rec).dump();
  throw TrainingError(os.str());
}

}  // namespace

TrainResult train(const Manifest& manifest, const ModelConfig& model_cfg, const TrainingConfig& cfg,
                  const TrainOptions& opts) {
  cfg.validate();
  model_cfg.validate();
  if (model_cfg.resolution != manifest.resolution) {
    throw ValidationError("resolution", "model resolution " + std::to_string(model_cfg.resolution) +
                                            " differs from corpus resolution " +
                                            std::to_string(manifest.resolution));
  }
  const auto expected = ModelConfig::for_spec(manifest.spec, model_cfg.k, model_cfg.resolution);
  if (expected.sim_dim != model_cfg.sim_dim || expected.vis_dim != model_cfg.vis_dim ||
      expected.view_dim != model_cfg.view_dim || expected.use_view != model_cfg.use_view) {
    throw ValidationError("model", "input dimensions do not match the corpus parameter spec");
  }
  if (cfg.deterministic) {
    at::globalContext().setDeterministicAlgorithms(true, false);
    torch::set_num_threads(1);
  }

  const bool adversarial = is_adversarial(cfg.loss_mode);
  const bool needs_features = cfg.loss_mode == LossMode::feat || cfg.loss_mode == LossMode::feat_adv;

  SplitData data(manifest, Split::train);
  if (data.size() == 0) throw ValidationError("manifest", "train split is empty");

  const std::uint64_t model_seed = opts.model_seed ? opts.model_seed : cfg.seed;
  Regressor regressor(model_cfg, mix_seed(model_seed, 10));
  Discriminator discriminator{nullptr};
  if (adversarial) discriminator = Discriminator(model_cfg, mix_seed(model_seed, 11));
  FeatureComparator comparator{nullptr};
  if (needs_features) comparator = FeatureComparator::from_source(cfg.comparator, cfg.feature_layer);

  torch::optim::Adam opt_r(regressor->parameters(), torch::optim::AdamOptions(cfg.lr_regressor)
                                                        .betas({cfg.beta1, cfg.beta2}));
  std::unique_ptr<torch::optim::Adam> opt_d;
  if (adversarial) {
    opt_d = std::make_unique<torch::optim::Adam>(
        discriminator->parameters(),
        torch::optim::AdamOptions(cfg.lr_discriminator).betas({cfg.beta1, cfg.beta2}));
  }

  std::int64_t start = 0;
  if (opts.resume_from) {
    auto loaded = load_checkpoint(*opts.resume_from, model_cfg);
    copy_module_state(*regressor, *loaded.regressor);
    load_optimizer_state(*opts.resume_from, "opt_regressor", opt_r);
    if (adversarial) {
      if (!loaded.discriminator) throw LoadError("resume checkpoint has no discriminator");
      copy_module_state(*discriminator, *loaded.discriminator);
      load_optimizer_state(*opts.resume_from, "opt_discriminator", *opt_d);
    }
    start = loaded.meta.iteration;
  }

  BatchStream stream(data, static_cast<std::size_t>(cfg.batch_size), mix_seed(cfg.seed, 12));
  stream.seek(static_cast<std::uint64_t>(start));

  std::optional<std::ofstream> log_file;
  if (opts.log_path) {
    log_file.emplace(*opts.log_path, std::ios::app);
    if (!*log_file) throw LoadError("cannot open training log " + opts.log_path->string());
  }

  TrainResult result;
  result.checkpoint = opts.checkpoint;

  auto save = [&](std::int64_t iteration) {
    CheckpointMeta meta;
    meta.model = model_cfg;
    meta.training = cfg;
    meta.spec = manifest.spec;
    meta.iteration = iteration;
    save_checkpoint(opts.checkpoint, meta, regressor, adversarial ? &discriminator : nullptr, &opt_r,
                    opt_d.get());
  };

  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  for (std::int64_t it = start; it < cfg.max_iterations; ++it) {
    const Batch batch = stream.next();
    const auto& real = batch.images;
    LogRecord rec;
    rec.iteration = it + 1;

    regressor->train();
    const auto fake = regressor(batch.params);

    if (adversarial) {
      discriminator->train();
      set_requires_grad(*discriminator, true);
      opt_d->zero_grad();
      const auto real_logits = discriminator->logits(real, batch.params);
      const auto fake_logits = discriminator->logits(fake.detach(), batch.params);
      const auto l_d = adv_loss_D_logits(real_logits, fake_logits);
      rec.l_adv_D = l_d.item<double>();
      rec.d_real = torch::sigmoid(real_logits).mean().item<double>();
      rec.d_fake = torch::sigmoid(fake_logits).mean().item<double>();
      ensure_finite(it + 1, rec, l_d, "L_adv_D");
      l_d.backward();
      opt_d->step();
      ++result.discriminator_updates;
    }

    opt_r.zero_grad();
    LossTerms terms;
    terms.mse = vsur::mse_loss(fake, real);
    rec.l_mse = terms.mse.item<double>();
    if (needs_features) {
      terms.feat = feature_loss(comparator, fake, real);
      rec.l_feat = terms.feat.item<double>();
    }
    if (adversarial) {
      // Only the regressor is updated in this step.
      set_requires_grad(*discriminator, false);
      terms.adv = adv_loss_R_logits(discriminator->logits(fake, batch.params));
      rec.l_adv_R = terms.adv.item<double>();
    }
    const auto total = combined_loss(cfg, terms);
    rec.total = total.item<double>();
    ensure_finite(it + 1, rec, total, "L");
    total.backward();
    opt_r.step();
    ++result.regressor_updates;
    if (adversarial) set_requires_grad(*discriminator, true);

    rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t_start).count();
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.max_iterations) {
      if (log_file) *log_file << to_json(rec).dump() << '\n' << std::flush;
      if (opts.verbose) std::cerr << to_json(rec).dump() << '\n';
      result.log.push_back(rec);
    }
    if (opts.after_iteration) opts.after_iteration(it + 1, regressor, adversarial ? &discriminator : nullptr);
    if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.max_iterations) save(it + 1);
  }
  save(std::max(start, cfg.max_iterations));
  regressor->eval();
  return result;
}

}  // namespace vsur
