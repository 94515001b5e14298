#pragma once

// Networks of the surrogate:
//   Regressor      parameters -> image (residual up-blocks, batch norm, tanh)
//   Discriminator  (image, parameters) -> logit, projection conditioned,
//                  spectrally normalized, no batch norm
//   FeatureComparator  frozen conv stack whose relu1_2 activations define
//                  the feature reconstruction loss
// plus orthogonal initialization and checkpoint serialization.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <torch/torch.h>
#include <json.hpp>

#include "vsur/image_db.hpp"
#include "vsur/param_space.hpp"

namespace vsur {

struct ModelConfig {
  int k = 16;            // channel-width constant
  int resolution = 64;   // output image side
  int sim_dim = 2;
  int vis_dim = 0;
  int view_dim = 3;
  bool use_view = true;
  int branch_width = 384;  // width of each per-group fully connected branch

  void validate() const;
  /// Number of residual blocks between the 4x4 latent and the output.
  int n_blocks() const;
  /// Feature channels carried at spatial size `side`: 16k at 4x4, halved per
  /// doubling, floored at k.
  int channels_at(int side) const;
  int latent_channels() const { return 16 * k; }

  static ModelConfig for_spec(const ParameterSpec& spec, int k, int resolution);
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Fills `weight` (viewed as rows x prod(rest)) with an orthogonal matrix:
/// W Wt = I when rows <= cols, Wt W = I otherwise.
void orthogonal_(torch::Tensor& weight, torch::Generator& gen);

/// Persistent power-iteration vectors for one weight matrix W (out x in):
/// u has length `in`, v has length `out`.
struct PowerIterationState {
  torch::Tensor u;
  torch::Tensor v;
};

/// Returns W / sigma with sigma = v^T W u. With `update` one power-iteration
/// step runs first (u <- normalize(W^T v), v <- normalize(W u)), mutating
/// `state` in place. Sigma is floored at 1e-12. Gradients flow through W
/// only.
torch::Tensor spectral_normalize(const torch::Tensor& weight2d, PowerIterationState& state,
                                 bool update);

/// Top singular value estimate with the current state, no update.
double spectral_sigma(const torch::Tensor& weight2d, const PowerIterationState& state);

class SNLinearImpl : public torch::nn::Module {
 public:
  SNLinearImpl(int in, int out, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();  // with the frozen state

  torch::Tensor weight, bias, u, v;
};
TORCH_MODULE(SNLinear);

class SNConv2dImpl : public torch::nn::Module {
 public:
  SNConv2dImpl(int in, int out, int kernel, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();

  torch::Tensor weight, bias, u, v;
  int padding;
};
TORCH_MODULE(SNConv2d);

class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(int in, int out, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
};
TORCH_MODULE(UpBlock);

class RegressorImpl : public torch::nn::Module {
 public:
  RegressorImpl(const ModelConfig& cfg, std::uint64_t seed);

  /// (b, 3, res, res) in [-1, 1]. Batch-norm statistics follow the module
  /// mode: batch statistics in train(), running statistics in eval().
  torch::Tensor forward(const EncodedBatch& params);

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  torch::nn::Linear sim_fc{nullptr}, vis_fc{nullptr}, view_fc{nullptr}, latent_fc{nullptr};
  torch::nn::ModuleList blocks;
  torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(Regressor);

class DownBlockImpl : public torch::nn::Module {
 public:
  DownBlockImpl(int in, int out, bool first, torch::Generator& gen);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  bool first_;
  SNConv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
};
TORCH_MODULE(DownBlock);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(const ModelConfig& cfg, std::uint64_t seed);

  /// Raw logit per sample: linear(h) + <embed(params), h>.
  torch::Tensor logits(const torch::Tensor& images, const EncodedBatch& params);
  /// sigmoid(logits), in (0, 1).
  torch::Tensor forward(const torch::Tensor& images, const EncodedBatch& params);

  torch::Tensor image_latent(const torch::Tensor& images);
  torch::Tensor param_latent(const EncodedBatch& params);

  /// Every spectrally normalized layer, for inspection.
  std::vector<std::pair<std::string, torch::Tensor>> normalized_weights();

  const ModelConfig& config() const { return cfg_; }

  SNLinear head{nullptr}, embed{nullptr};

 private:
  ModelConfig cfg_;
  torch::nn::ModuleList blocks;
  SNLinear sim_fc{nullptr}, vis_fc{nullptr}, view_fc{nullptr};
};
TORCH_MODULE(Discriminator);

/// Frozen feature extractor. Layout matches the first block of VGG-19
/// (conv1_1 3->64, relu1_1, conv1_2 64->64, relu1_2). Either loaded from
/// pretrained weights or the bundled fixed-seed substitute.
class FeatureComparatorImpl : public torch::nn::Module {
 public:
  static constexpr std::uint64_t kFallbackSeed = 19;

  /// layer: "relu1_1" or "relu1_2".
  explicit FeatureComparatorImpl(std::string layer = "relu1_2");

  /// Images in [-1, 1] -> feature maps (b, 64, h, w). Gradients reach the
  /// images; the comparator's own weights never require grad.
  torch::Tensor forward(const torch::Tensor& images);

  const std::string& layer() const { return layer_; }
  const std::string& source() const { return source_; }

  torch::nn::Conv2d conv1_1{nullptr}, conv1_2{nullptr};

 private:
  friend class FeatureComparator;
  std::string layer_;
  std::string source_;
};

class FeatureComparator : public torch::nn::ModuleHolder<FeatureComparatorImpl> {
 public:
  using torch::nn::ModuleHolder<FeatureComparatorImpl>::ModuleHolder;

  /// Deterministic substitute with He-normal weights from kFallbackSeed.
  static FeatureComparator fallback(const std::string& layer = "relu1_2");
  /// Pretrained weights from a torch archive holding conv1_1/conv1_2
  /// weight and bias tensors. Throws LoadError (suggesting the fallback)
  /// when the file is missing or malformed.
  static FeatureComparator pretrained(const std::filesystem::path& path,
                                      const std::string& layer = "relu1_2");
  /// "fallback" or a path to pretrained weights.
  static FeatureComparator from_source(const std::string& source,
                                       const std::string& layer = "relu1_2");
};

std::int64_t parameter_count(const torch::nn::Module& m);
/// float32 storage of all parameters and buffers.
std::int64_t parameter_bytes(const torch::nn::Module& m);

/// Copies parameters and buffers by name; both modules must share a layout.
void copy_module_state(torch::nn::Module& dst, const torch::nn::Module& src);

/// Independent copy with the same weights, converted to `dtype`.
Regressor clone_regressor(const Regressor& src, torch::Dtype dtype = torch::kFloat32);

struct CheckpointMeta {
  static constexpr int kFormatVersion = 1;
  int format_version = kFormatVersion;
  ModelConfig model;
  nlohmann::json training;  // TrainingConfig, owned by the training module
  ParameterSpec spec;
  std::int64_t iteration = 0;
  bool has_discriminator = true;
};

/// Writes one archive holding the meta record, both networks and (when
/// given) both optimizer states.
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     Regressor& regressor, Discriminator* discriminator,
                     torch::optim::Optimizer* opt_regressor,
                     torch::optim::Optimizer* opt_discriminator);

struct LoadedModel {
  CheckpointMeta meta;
  Regressor regressor{nullptr};
  Discriminator discriminator{nullptr};
  std::string digest;  // content hash of the checkpoint file
};

/// Rebuilds both networks from the archive. When `expected` is given, a
/// differing ModelConfig is a LoadError naming the mismatched field. The
/// regressor is returned in eval mode.
LoadedModel load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected = std::nullopt);

/// Restores optimizer state saved under "opt_regressor"/"opt_discriminator".
void load_optimizer_state(const std::filesystem::path& path, const std::string& key,
                          torch::optim::Optimizer& opt);

std::string file_digest(const std::filesystem::path& path);

}  // namespace vsur
