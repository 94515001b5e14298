#include "vsur/image_db.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "vsur/errors.hpp"
#include "vsur/random.hpp"

namespace vsur {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("split", "expected train or test, got '" + s + "'");
}

std::vector<const ImageRecord*> Manifest::split_records(Split s) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    records.push_back({{"id", r.id},
                       {"member", r.member},
                       {"setting", r.setting},
                       {"file", r.file},
                       {"split", to_string(r.split)}});
  }
  return {{"format_version", Manifest::kFormatVersion},
          {"spec", m.spec},
          {"resolution", m.resolution},
          {"render_digest", m.render_digest},
          {"render_config", m.render_config},
          {"seed", m.seed},
          {"counts", {{"train", m.n_train}, {"test", m.n_test}}},
          {"records", records}};
}

void write_manifest(const Manifest& m, const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out << manifest_to_json(m).dump(1) << '\n';
  if (!out) throw LoadError("short write to " + path.string());
}

Manifest open_manifest(const fs::path& path, bool check_images) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(file);
  if (!in) throw LoadError("manifest not found: " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt manifest " + file.string() + ": " + e.what());
  }

  Manifest m;
  m.root = file.parent_path();
  try {
    const int version = j.at("format_version").get<int>();
    if (version != Manifest::kFormatVersion) {
      throw LoadError("unsupported manifest format_version " + std::to_string(version));
    }
    m.spec = j.at("spec").get<ParameterSpec>();
    m.resolution = j.at("resolution").get<int>();
    m.render_digest = j.value("render_digest", "");
    m.render_config = j.value("render_config", nlohmann::json::object());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_train = j.at("counts").at("train").get<std::size_t>();
    m.n_test = j.at("counts").at("test").get<std::size_t>();
    for (const auto& r : j.at("records")) {
      ImageRecord rec;
      rec.id = r.at("id").get<std::int64_t>();
      rec.member = r.value("member", rec.id);
      rec.setting = r.at("setting").get<ParameterSetting>();
      rec.file = r.at("file").get<std::string>();
      rec.split = split_from_string(r.at("split").get<std::string>());
      m.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt manifest " + file.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw LoadError("invalid manifest " + file.string() + ": " + e.what());
  }

  if (m.resolution <= 0) throw LoadError("manifest resolution must be positive");
  std::size_t train = 0;
  for (const auto& r : m.records) {
    if (r.split == Split::train) ++train;
    try {
      validate(r.setting, m.spec);
    } catch (const ValidationError& e) {
      throw LoadError("record " + std::to_string(r.id) + " invalid: " + e.what());
    }
  }
  std::vector<std::int64_t> ids;
  for (const auto& r : m.records) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw LoadError("manifest contains duplicate record ids");
  }
  const std::size_t test = m.records.size() - train;
  if (train != m.n_train || test != m.n_test) {
    throw LoadError("manifest split counts (" + std::to_string(m.n_train) + "/" +
                    std::to_string(m.n_test) + ") disagree with records (" + std::to_string(train) +
                    "/" + std::to_string(test) + ")");
  }

  for (const auto& r : m.records) {
    const auto img_path = m.image_path(r);
    if (!fs::exists(img_path)) throw LoadError("missing image file " + img_path.string());
    if (check_images) {
      const Image img = read_png(img_path.string());
      if (img.width != m.resolution || img.height != m.resolution) {
        throw LoadError("image " + img_path.string() + " is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + ", manifest declares resolution " +
                        std::to_string(m.resolution));
      }
    }
  }
  return m;
}

torch::Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) return torch::empty({0, 3, 0, 0});
  const int w = images.front().width;
  const int h = images.front().height;
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 3, h, w});
  auto acc = out.accessor<float, 4>();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = images[n];
    if (im.width != w || im.height != h) throw ShapeError("images in a batch differ in size");
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) {
          acc[static_cast<std::int64_t>(n)][c][y][x] =
              static_cast<float>(im.at(x, y, c)) / 127.5f - 1.0f;
        }
      }
    }
  }
  return out;
}

Image tensor_to_image(const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) throw ShapeError("expected a (3, h, w) tensor");
  const auto t = chw.detach().to(torch::kFloat64).contiguous();
  const auto acc = t.accessor<double, 3>();
  Image im(static_cast<int>(t.size(2)), static_cast<int>(t.size(1)));
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::round((acc[c][y][x] + 1.0) * 127.5);
        im.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return im;
}

std::vector<Image> tensor_to_images(const torch::Tensor& batch) {
  if (batch.dim() != 4) throw ShapeError("expected a (b, 3, h, w) tensor");
  std::vector<Image> out;
  for (std::int64_t i = 0; i < batch.size(0); ++i) out.push_back(tensor_to_image(batch[i]));
  return out;
}

EncodedBatch EncodedBatch::to(torch::Dtype dtype) const {
  return {sim.to(dtype), vis.to(dtype), view.to(dtype)};
}

namespace {

torch::Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows, std::size_t dim,
                             torch::Dtype dtype) {
  auto t = torch::zeros({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(dim)},
                        torch::kFloat64);
  auto acc = t.accessor<double, 2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(j)] = rows[i][j];
    }
  }
  return t.to(dtype);
}

}  // namespace

EncodedBatch encode_batch(const std::vector<ParameterSetting>& settings, const ParameterSpec& spec,
                          torch::Dtype dtype) {
  std::vector<std::vector<double>> sim, vis, view;
  for (const auto& s : settings) {
    auto e = normalize(s, spec);
    sim.push_back(std::move(e.sim_vec));
    vis.push_back(std::move(e.vis_vec));
    view.push_back(std::move(e.view_vec));
  }
  return {rows_to_tensor(sim, spec.sim_dim(), dtype), rows_to_tensor(vis, spec.vis_dim(), dtype),
          rows_to_tensor(view, spec.view_dim(), dtype)};
}

SplitData::SplitData(const Manifest& manifest, Split split) {
  std::vector<Image> images;
  std::vector<ParameterSetting> settings;
  for (const auto* r : manifest.split_records(split)) {
    records_.push_back(*r);
    images.push_back(read_png(manifest.image_path(*r).string()));
    settings.push_back(r->setting);
  }
  images_ = images_to_tensor(images);
  params_ = encode_batch(settings, manifest.spec);
}

Batch SplitData::gather(const std::vector<std::size_t>& indices) const {
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  const auto index = torch::tensor(idx, torch::kLong);
  return {{params_.sim.index_select(0, index), params_.vis.index_select(0, index),
           params_.view.index_select(0, index)},
          images_.index_select(0, index),
          indices};
}

std::vector<std::vector<std::size_t>> SplitData::epoch_indices(std::size_t batch_size,
                                                               std::uint64_t seed,
                                                               std::uint64_t epoch) const {
  if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
  if (records_.empty()) throw ValidationError("split", "split is empty");
  std::vector<std::size_t> perm(records_.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 1000 + epoch));
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  const std::size_t n_batches = (perm.size() + batch_size - 1) / batch_size;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<std::size_t> chunk;
    for (std::size_t k = 0; k < batch_size; ++k) chunk.push_back(perm[(b * batch_size + k) % perm.size()]);
    out.push_back(std::move(chunk));
  }
  return out;
}

BatchStream::BatchStream(const SplitData& data, std::size_t batch_size, std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed), epoch_(0) {
  current_ = data_->epoch_indices(batch_size_, seed_, epoch_);
}

Batch BatchStream::next() {
  if (cursor_ == current_.size()) {
    ++epoch_;
    current_ = data_->epoch_indices(batch_size_, seed_, epoch_);
    cursor_ = 0;
  }
  return data_->gather(current_[cursor_++]);
}

void BatchStream::seek(std::uint64_t n) {
  const std::uint64_t per_epoch = (data_->size() + batch_size_ - 1) / batch_size_;
  epoch_ = n / per_epoch;
  current_ = data_->epoch_indices(batch_size_, seed_, epoch_);
  cursor_ = static_cast<std::size_t>(n % per_epoch);
}

std::vector<Batch> batches(const SplitData& data, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch) {
  std::vector<Batch> out;
  for (const auto& idx : data.epoch_indices(batch_size, seed, epoch)) out.push_back(data.gather(idx));
  return out;
}

}  // namespace vsur
