#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "vsur/image_db.hpp"
#include "vsur/param_space.hpp"
#include "vsur/synthetic_ensemble.hpp"

namespace vsur::test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "vsur") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline ParameterSpec two_param_spec() {
  ParameterSpec s;
  s.sim_params = {{"a", 0.55, 0.85}, {"b", 1.0, 4.0}};
  s.vis_params = {{"cmap", {"x", "y"}}};
  return s;
}

/// Box-filter downsample by an integer factor.
inline Image downsample(const Image& im, int factor) {
  Image out(im.width / factor, im.height / factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) {
        int sum = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) sum += im.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = static_cast<std::uint8_t>((sum + factor * factor / 2) / (factor * factor));
      }
  return out;
}

/// Synthetic corpus at an arbitrary power-of-two resolution: renders at 64
/// and downsamples. The last `n_test_members` members form the test split.
inline Manifest toy_corpus(const std::filesystem::path& dir, std::size_t members, std::size_t views,
                           int resolution, std::size_t n_colormaps = 2, std::size_t n_test_members = 1,
                           std::uint64_t seed = 5) {
  RenderConfig cfg;
  const auto spec = synthetic_spec(cfg, n_colormaps);
  const auto settings = sample_settings(spec, members, views, seed);
  const std::size_t per_member = settings.size() / members;
  std::filesystem::create_directories(dir / "images");
  Manifest m;
  m.spec = spec;
  m.resolution = resolution;
  m.render_digest = cfg.digest();
  m.render_config = cfg.to_json();
  m.seed = seed;
  m.root = dir;
  for (std::size_t i = 0; i < settings.size(); ++i) {
    const auto& s = settings[i];
    const Image full = render({s.sim_values[0], s.sim_values[1]}, static_cast<std::size_t>(s.vis_choices[0]),
                              s.view, cfg);
    const Image im = resolution == 64 ? full : downsample(full, 64 / resolution);
    ImageRecord r;
    r.id = static_cast<std::int64_t>(i);
    r.member = static_cast<std::int64_t>(i / per_member);
    r.setting = s;
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.png", i);
    r.file = name;
    r.split = (i / per_member) >= members - n_test_members ? Split::test : Split::train;
    (r.split == Split::train ? m.n_train : m.n_test)++;
    write_png(im, (dir / r.file).string());
    m.records.push_back(r);
  }
  write_manifest(m, dir);
  return open_manifest(dir);
}

}  // namespace vsur::test
