#pragma once

// Loss functions and the adversarial training loop. Each iteration samples
// a batch, predicts images with the regressor, takes one discriminator Adam
// step on the real/fake objective and then one regressor Adam step on the
// configured loss. Both networks are updated once per iteration with
// different learning rates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

#include "vsur/image_db.hpp"
#include "vsur/model.hpp"

namespace vsur {

enum class LossMode { mse, feat, adv, feat_adv };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);
/// True for modes that train a discriminator.
bool is_adversarial(LossMode m);

struct TrainingConfig {
  static constexpr std::int64_t kFullScaleIterations = 125000;

  LossMode loss_mode = LossMode::feat_adv;
  double lambda = 0.01;
  int batch_size = 16;
  double lr_regressor = 5e-5;
  double lr_discriminator = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  std::int64_t max_iterations = 5000;
  std::int64_t checkpoint_every = 1000;
  std::int64_t log_every = 1;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string comparator = "fallback";  // or a path to pretrained weights
  std::string feature_layer = "relu1_2";

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

constexpr double kLogClamp = 1e-7;

/// Mean of (pred - target)^2 over batch, channels and pixels.
torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// Squared L2 distance between comparator feature maps, divided by
/// b * c * h * w of the feature tensor.
torch::Tensor feature_loss(FeatureComparator& comparator, const torch::Tensor& pred,
                           const torch::Tensor& target);

/// -mean(log D(fake)), D outputs clamped to [1e-7, 1 - 1e-7].
torch::Tensor adv_loss_R(const torch::Tensor& d_fake);
/// -mean(log D(real) + log(1 - D(fake))), same clamping.
torch::Tensor adv_loss_D(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// Same objectives evaluated from logits (softplus form), used by the
/// training loop so saturated outputs keep a gradient.
torch::Tensor adv_loss_R_logits(const torch::Tensor& fake_logits);
torch::Tensor adv_loss_D_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

struct LossTerms {
  torch::Tensor mse;
  torch::Tensor feat;
  torch::Tensor adv;
};

/// mse -> mse; feat -> feat; adv -> adv; feat+adv -> feat + lambda * adv.
torch::Tensor combined_loss(const TrainingConfig& cfg, const LossTerms& terms);

struct LogRecord {
  std::int64_t iteration = 0;  // 1-based count of completed iterations
  double l_mse = 0.0;
  std::optional<double> l_feat;
  std::optional<double> l_adv_R;
  std::optional<double> l_adv_D;
  double total = 0.0;
  std::optional<double> d_real;
  std::optional<double> d_fake;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const LogRecord& r);
bool same_losses(const LogRecord& a, const LogRecord& b);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  std::filesystem::path checkpoint;                  // written periodically and at exit
  std::optional<std::filesystem::path> log_path;     // JSON lines, appended
  std::optional<std::filesystem::path> resume_from;  // checkpoint to continue from
  bool verbose = false;
  std::uint64_t model_seed = 0;
  /// Called after every iteration with the live networks.
  std::function<void(std::int64_t, Regressor&, Discriminator*)> after_iteration;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<LogRecord> log;
  std::int64_t regressor_updates = 0;
  std::int64_t discriminator_updates = 0;
};

TrainResult train(const Manifest& manifest, const ModelConfig& model_cfg,
                  const TrainingConfig& cfg, const TrainOptions& opts);

}  // namespace vsur
