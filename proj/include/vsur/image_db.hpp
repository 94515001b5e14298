#pragma once

// On-disk image corpus: `manifest.json` next to an `images/` directory of
// PNG files. Each record pairs a parameter setting with one rendered image
// and belongs to the train or test split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

#include "vsur/image.hpp"
#include "vsur/param_space.hpp"

namespace vsur {

enum class Split { train, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ImageRecord {
  std::int64_t id = 0;
  std::int64_t member = 0;  // ensemble member the setting was drawn for
  ParameterSetting setting;
  std::string file;  // relative to the manifest directory
  Split split = Split::train;
};

struct Manifest {
  static constexpr int kFormatVersion = 1;

  ParameterSpec spec;
  int resolution = 0;
  std::string render_digest;
  nlohmann::json render_config;  // free-form description of the producer
  std::uint64_t seed = 0;
  std::vector<ImageRecord> records;
  std::size_t n_train = 0;
  std::size_t n_test = 0;

  std::filesystem::path root;  // directory holding manifest.json; not serialized

  std::vector<const ImageRecord*> split_records(Split s) const;
  std::filesystem::path image_path(const ImageRecord& r) const { return root / r.file; }
};

nlohmann::json manifest_to_json(const Manifest& m);

/// Writes `dir/manifest.json` (the images are expected to be in place).
void write_manifest(const Manifest& m, const std::filesystem::path& dir);

/// Parses and validates a manifest. `path` may be the corpus directory or
/// the manifest file. Every referenced image must exist and decode at the
/// declared resolution; failures throw LoadError naming the problem.
/// `check_images = false` skips decoding (existence is still checked).
Manifest open_manifest(const std::filesystem::path& path, bool check_images = true);

/// Pixel -> [-1, 1] (p / 127.5 - 1); output shape (b, 3, h, w), float32.
torch::Tensor images_to_tensor(const std::vector<Image>& images);
/// Inverse of images_to_tensor with rounding and clamping.
std::vector<Image> tensor_to_images(const torch::Tensor& batch);
Image tensor_to_image(const torch::Tensor& chw);

/// Encoded parameter groups for a batch, one row per setting.
struct EncodedBatch {
  torch::Tensor sim;   // (b, sim_dim)
  torch::Tensor vis;   // (b, vis_dim)
  torch::Tensor view;  // (b, view_dim)

  std::int64_t size() const { return sim.size(0); }
  EncodedBatch to(torch::Dtype dtype) const;
};

EncodedBatch encode_batch(const std::vector<ParameterSetting>& settings, const ParameterSpec& spec,
                          torch::Dtype dtype = torch::kFloat32);

struct Batch {
  EncodedBatch params;
  torch::Tensor images;  // (b, 3, h, w) in [-1, 1]
  std::vector<std::size_t> indices;  // positions within the split
};

/// One split of a manifest held in memory: decoded images plus encoded
/// parameters. Read-only after construction.
class SplitData {
 public:
  SplitData(const Manifest& manifest, Split split);

  std::size_t size() const { return records_.size(); }
  const ImageRecord& record(std::size_t i) const { return records_[i]; }
  const torch::Tensor& images() const { return images_; }
  const EncodedBatch& params() const { return params_; }

  Batch gather(const std::vector<std::size_t>& indices) const;

  /// Index batches for one epoch: a seeded permutation of the split cut
  /// into chunks of `batch_size`. The last chunk is topped up from the head
  /// of the same permutation so every batch has exactly `batch_size` rows
  /// (records repeat when the split is smaller than a batch).
  std::vector<std::vector<std::size_t>> epoch_indices(std::size_t batch_size, std::uint64_t seed,
                                                      std::uint64_t epoch) const;

 private:
  std::vector<ImageRecord> records_;
  torch::Tensor images_;
  EncodedBatch params_;
};

/// Endless single-consumer stream of batches, reshuffled per epoch.
class BatchStream {
 public:
  BatchStream(const SplitData& data, std::size_t batch_size, std::uint64_t seed);

  Batch next();
  std::uint64_t epoch() const { return epoch_; }
  /// Positions the stream as if `n` batches had been drawn from epoch 0.
  void seek(std::uint64_t n);

 private:
  const SplitData* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_;
  std::vector<std::vector<std::size_t>> current_;
  std::size_t cursor_ = 0;
};

/// All batches of one epoch, materialized.
std::vector<Batch> batches(const SplitData& data, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch);

}  // namespace vsur
