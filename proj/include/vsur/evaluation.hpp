#pragma once

// Image quality metrics and the held-out evaluation of a trained model
// against a nearest-neighbour interpolation baseline.
//
// Single-image metrics take float64 tensors (3, h, w) with values in [0, 1].

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>
#include <json.hpp>

#include "vsur/image_db.hpp"
#include "vsur/model.hpp"

namespace vsur {

constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / mse); identical images give kPsnrCap.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Mean structural similarity on luma (0.299 R + 0.587 G + 0.114 B) with an
/// 11x11 Gaussian window (sigma 1.5) evaluated at valid positions only.
/// Images smaller than the window throw ValidationError.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

constexpr int kEmdBins = 64;

/// Per-channel 64-bin histograms over [0, 1]; the distance per channel is
/// sum |CDF_a - CDF_b| / 64, averaged over the three channels.
double color_emd(const torch::Tensor& a, const torch::Tensor& b);

/// Frechet distance between Gaussians fitted to two embedding sets (one row
/// per image). Covariances use n - 1; the matrix square root comes from
/// symmetric eigendecompositions with negative eigenvalues floored at 0.
double fid_from_embeddings(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Maps a batch of images in [-1, 1] (b, 3, h, w) to embeddings (b, d).
struct Embedder {
  std::string name;
  std::function<torch::Tensor(const torch::Tensor&)> embed;
};

/// Comparator relu1_2 activations average-pooled over space (64 values).
Embedder comparator_embedder(FeatureComparator comparator);

/// Images in [0, 1], (n, 3, h, w).
double fid(const torch::Tensor& a, const torch::Tensor& b, const Embedder& embedder);

/// 1 / mean pairwise SSIM. Uses every pair when there are at most
/// `max_pairs`, otherwise `max_pairs` seeded random pairs.
double diversity(const torch::Tensor& images01, std::size_t max_pairs = 10000, std::uint64_t seed = 0);

/// Inverse-distance blend of the `g` training images whose encoded
/// parameters are nearest to `setting`. An exact match returns that image.
/// Output (3, h, w) in [-1, 1].
torch::Tensor interpolation_baseline(const ParameterSetting& setting, const ParameterSpec& spec,
                                     const SplitData& train, int g = 3);

struct MetricsReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double emd = 0.0;
  double fid = 0.0;
  std::size_t n_images = 0;
  std::string embedder;
  std::string config_digest;  // model config + embedder the numbers belong to
};

nlohmann::json to_json(const MetricsReport& r);

/// Mean PSNR/SSIM/EMD and the set-level FID of predictions against ground
/// truth, both (n, 3, h, w) in [0, 1].
MetricsReport compare_images(const torch::Tensor& predictions01, const torch::Tensor& truth01,
                             const Embedder& embedder);

struct EvaluationReport {
  MetricsReport model;
  std::optional<MetricsReport> baseline;
  int baseline_neighbours = 3;
  std::string checkpoint_digest;
  std::string corpus_digest;
  std::string split;

  nlohmann::json to_json() const;
};

struct EvaluateOptions {
  Split split = Split::test;
  bool with_baseline = true;
  int baseline_neighbours = 3;
  int batch_size = 32;
  std::optional<std::filesystem::path> contact_sheet;  // PNG: prediction | truth | baseline
  int contact_rows = 8;
  std::string comparator = "fallback";
};

/// Predictions for every record of `data`, (n, 3, h, w) in [-1, 1].
torch::Tensor predict_split(Regressor& regressor, const SplitData& data, int batch_size = 32);

EvaluationReport evaluate_model(const LoadedModel& model, const Manifest& manifest,
                                const EvaluateOptions& opts = {});

/// [-1, 1] -> [0, 1] as float64.
torch::Tensor to_unit_range(const torch::Tensor& t);

}  // namespace vsur
