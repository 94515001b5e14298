#pragma once

// Desk-scale stand-in for an ensemble simulation: a two-blob Gaussian
// mixture scalar field controlled by two parameters, rendered with an
// emission-absorption raymarcher under a selectable colormap and camera.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsur/image.hpp"
#include "vsur/image_db.hpp"
#include "vsur/param_space.hpp"

namespace vsur {

struct FieldParams {
  double p1 = 0.5;  // blend weight, [0.2, 0.8]
  double p2 = 0.5;  // blob separation, [0, 1]
};

using Vec3 = std::array<double, 3>;
using Rgb = std::array<double, 3>;

/// f(x) = p1 exp(-|x - c|^2 / 0.08) + (1 - p1) exp(-|x + c|^2 / 0.18),
/// c = (0.4 p2, 0, 0).
double field(const Vec3& x, const FieldParams& p);

struct ColormapPoint {
  double position = 0.0;
  Rgb color{};
};

struct Colormap {
  std::string name;
  std::vector<ColormapPoint> points;

  /// Piecewise-linear lookup; s is clamped to [0, 1].
  Rgb operator()(double s) const;
  void validate() const;
};

/// viridis, inferno, coolwarm and greens approximations.
std::vector<Colormap> default_colormaps();

struct RenderConfig {
  int resolution = 64;
  std::vector<Colormap> colormaps = default_colormaps();
  int steps = 128;
  double absorption = 4.0;
  double extent = 1.25;  // half-width of the orthographic image plane

  void validate() const;
  nlohmann::json to_json() const;
  std::string digest() const;
};

/// Front-to-back emission-absorption compositing of samples ordered near to
/// far. Per sample opacity is 1 - exp(-absorption * density * dt); the
/// background is black.
Rgb composite(std::span<const Rgb> colors, std::span<const double> densities, double dt,
              double absorption);

/// Orthographic view from the sphere of radius 3 at (azimuth, elevation),
/// looking at the origin with the projected +z axis up. Deterministic;
/// azimuth is periodic with period 360 bit-for-bit.
Image render(const FieldParams& p, std::size_t colormap_index, const ViewAngles& view,
             const RenderConfig& cfg);

/// Parameter spec matching the synthetic field: sim params p1, p2, one
/// visual-mapping parameter "colormap" over the first `n_colormaps` maps of
/// `cfg`, and the camera view.
ParameterSpec synthetic_spec(const RenderConfig& cfg, std::size_t n_colormaps);

struct GenerateOptions {
  std::size_t n_members = 4;
  std::size_t n_views = 2;
  std::uint64_t seed = 0;
  double test_fraction = 0.1;  // of members, rounded to the nearest count
  int workers = 1;
};

/// Samples settings, renders each one into `out_dir/images/` and writes
/// `out_dir/manifest.json`. The split is by ensemble member. On failure the
/// files written so far are removed and the exception is rethrown.
Manifest generate_database(const ParameterSpec& spec, const RenderConfig& cfg,
                           const GenerateOptions& opts, const std::filesystem::path& out_dir);

}  // namespace vsur
