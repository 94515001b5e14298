#include "vsur/synthetic_ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <random>
#include <thread>

#include "vsur/digest.hpp"
#include "vsur/errors.hpp"
#include "vsur/random.hpp"

namespace vsur {

namespace fs = std::filesystem;

double field(const Vec3& x, const FieldParams& p) {
  const double cx = 0.4 * p.p2;
  const double yz = x[1] * x[1] + x[2] * x[2];
  const double d_plus = (x[0] - cx) * (x[0] - cx) + yz;
  const double d_minus = (x[0] + cx) * (x[0] + cx) + yz;
  return p.p1 * std::exp(-d_plus / 0.08) + (1.0 - p.p1) * std::exp(-d_minus / 0.18);
}

Rgb Colormap::operator()(double s) const {
  s = std::clamp(s, 0.0, 1.0);
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (s <= points[i].position) {
      const auto& a = points[i - 1];
      const auto& b = points[i];
      const double t = (s - a.position) / (b.position - a.position);
      return {a.color[0] + t * (b.color[0] - a.color[0]), a.color[1] + t * (b.color[1] - a.color[1]),
              a.color[2] + t * (b.color[2] - a.color[2])};
    }
  }
  return points.back().color;
}

void Colormap::validate() const {
  if (points.size() < 2) throw ValidationError(name, "colormap needs at least 2 control points");
  if (points.front().position != 0.0 || points.back().position != 1.0) {
    throw ValidationError(name, "colormap control points must span [0, 1]");
  }
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (!(points[i].position > points[i - 1].position)) {
      throw ValidationError(name, "colormap positions must be strictly increasing");
    }
  }
}

std::vector<Colormap> default_colormaps() {
  return {
      {"viridis",
       {{0.0, {0.267, 0.005, 0.329}},
        {0.25, {0.229, 0.322, 0.546}},
        {0.5, {0.128, 0.567, 0.551}},
        {0.75, {0.369, 0.789, 0.383}},
        {1.0, {0.993, 0.906, 0.144}}}},
      {"inferno",
       {{0.0, {0.001, 0.000, 0.014}},
        {0.25, {0.341, 0.062, 0.429}},
        {0.5, {0.735, 0.216, 0.330}},
        {0.75, {0.978, 0.557, 0.035}},
        {1.0, {0.988, 0.998, 0.645}}}},
      {"coolwarm",
       {{0.0, {0.230, 0.299, 0.754}}, {0.5, {0.865, 0.865, 0.865}}, {1.0, {0.706, 0.016, 0.150}}}},
      {"greens", {{0.0, {0.05, 0.20, 0.05}}, {0.6, {0.30, 0.75, 0.30}}, {1.0, {0.90, 1.00, 0.85}}}},
  };
}

void RenderConfig::validate() const {
  if (resolution < 64 || (resolution & (resolution - 1)) != 0) {
    throw ValidationError("resolution", "must be a power of two >= 64");
  }
  if (colormaps.size() < 3) throw ValidationError("colormaps", "at least 3 colormaps required");
  for (const auto& c : colormaps) c.validate();
  if (steps < 64) throw ValidationError("steps", "must be >= 64");
  if (!(absorption > 0.0)) throw ValidationError("absorption", "must be positive");
  if (!(extent > 0.0)) throw ValidationError("extent", "must be positive");
}

nlohmann::json RenderConfig::to_json() const {
  nlohmann::json maps = nlohmann::json::array();
  for (const auto& c : colormaps) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : c.points) pts.push_back({p.position, p.color[0], p.color[1], p.color[2]});
    maps.push_back({{"name", c.name}, {"points", pts}});
  }
  return {{"resolution", resolution},
          {"colormaps", maps},
          {"steps", steps},
          {"absorption", absorption},
          {"extent", extent}};
}

std::string RenderConfig::digest() const { return fnv1a_hex(to_json().dump()); }

Rgb composite(std::span<const Rgb> colors, std::span<const double> densities, double dt,
              double absorption) {
  Rgb acc{0.0, 0.0, 0.0};
  double alpha_acc = 0.0;
  for (std::size_t i = 0; i < colors.size() && i < densities.size(); ++i) {
    const double alpha = 1.0 - std::exp(-absorption * densities[i] * dt);
    const double w = (1.0 - alpha_acc) * alpha;
    for (int c = 0; c < 3; ++c) acc[c] += w * colors[i][c];
    alpha_acc += w;
  }
  return acc;
}

namespace {

// Micro-degree snapping so that theta and theta + 360 produce the same
// camera bit-for-bit.
double snapped_azimuth(double degrees) {
  const double a = std::round(canonical_azimuth(degrees) * 1e6) / 1e6;
  return a >= 360.0 ? 0.0 : a;
}

// Ray/box intersection against [-1, 1]^3.
bool clip_to_cube(const Vec3& o, const Vec3& d, double& t0, double& t1) {
  t0 = -1e30;
  t1 = 1e30;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < -1.0 || o[i] > 1.0) return false;
      continue;
    }
    double a = (-1.0 - o[i]) / d[i];
    double b = (1.0 - o[i]) / d[i];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  return t1 > t0;
}

}  // namespace

Image render(const FieldParams& p, std::size_t colormap_index, const ViewAngles& view,
             const RenderConfig& cfg) {
  if (colormap_index >= cfg.colormaps.size()) {
    throw ValidationError("colormap", "index " + std::to_string(colormap_index) + " out of range");
  }
  const Colormap& cmap = cfg.colormaps[colormap_index];
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double theta = snapped_azimuth(view.azimuth) * kDeg;
  const double phi = clamp_elevation(view.elevation) * kDeg;

  const Vec3 eye{3.0 * std::cos(phi) * std::cos(theta), 3.0 * std::cos(phi) * std::sin(theta),
                 3.0 * std::sin(phi)};
  const Vec3 dir{-eye[0] / 3.0, -eye[1] / 3.0, -eye[2] / 3.0};
  // dir x z normalized; written in closed form so it stays defined at the poles.
  const Vec3 right{-std::sin(theta), std::cos(theta), 0.0};
  const Vec3 up{right[1] * dir[2] - right[2] * dir[1], right[2] * dir[0] - right[0] * dir[2],
                right[0] * dir[1] - right[1] * dir[0]};

  const int res = cfg.resolution;
  const double dt = 2.0 * std::sqrt(3.0) / cfg.steps;
  Image img(res, res);
  std::vector<Rgb> colors;
  std::vector<double> dens;
  for (int j = 0; j < res; ++j) {
    const double v = (1.0 - 2.0 * (j + 0.5) / res) * cfg.extent;
    for (int i = 0; i < res; ++i) {
      const double u = (2.0 * (i + 0.5) / res - 1.0) * cfg.extent;
      const Vec3 origin{eye[0] + u * right[0] + v * up[0], eye[1] + u * right[1] + v * up[1],
                        eye[2] + u * right[2] + v * up[2]};
      Rgb out{0.0, 0.0, 0.0};
      double t0, t1;
      if (clip_to_cube(origin, dir, t0, t1)) {
        colors.clear();
        dens.clear();
        for (double t = t0 + 0.5 * dt; t < t1; t += dt) {
          const Vec3 x{origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]};
          const double f = field(x, p);
          colors.push_back(cmap(f));
          dens.push_back(f);
        }
        out = composite(colors, dens, dt, cfg.absorption);
      }
      for (int c = 0; c < 3; ++c) {
        img.at(i, j, c) =
            static_cast<std::uint8_t>(std::clamp(std::round(out[c] * 255.0), 0.0, 255.0));
      }
    }
  }
  return img;
}

ParameterSpec synthetic_spec(const RenderConfig& cfg, std::size_t n_colormaps) {
  if (n_colormaps < 1 || n_colormaps > cfg.colormaps.size()) {
    throw ValidationError("colormaps", "requested " + std::to_string(n_colormaps) +
                                           " colormaps, config has " +
                                           std::to_string(cfg.colormaps.size()));
  }
  ParameterSpec spec;
  spec.sim_params = {{"p1", 0.2, 0.8}, {"p2", 0.0, 1.0}};
  DiscreteParam cm{"colormap", {}};
  for (std::size_t i = 0; i < n_colormaps; ++i) cm.options.push_back(cfg.colormaps[i].name);
  spec.vis_params = {cm};
  spec.view_enabled = true;
  return spec;
}

namespace {

struct SettingResolver {
  std::size_t p1 = 0, p2 = 0;
  std::vector<std::size_t> colormap_of_option;  // empty when there is no colormap parameter

  SettingResolver(const ParameterSpec& spec, const RenderConfig& cfg) {
    auto i1 = spec.sim_index("p1");
    auto i2 = spec.sim_index("p2");
    if (!i1 || !i2 || spec.sim_params.size() != 2) {
      throw ValidationError("sim_params", "synthetic field expects exactly p1 and p2");
    }
    p1 = *i1;
    p2 = *i2;
    const auto& r1 = spec.sim_params[p1];
    const auto& r2 = spec.sim_params[p2];
    if (r1.min < 0.2 || r1.max > 0.8) throw ValidationError("p1", "range must lie in [0.2, 0.8]");
    if (r2.min < 0.0 || r2.max > 1.0) throw ValidationError("p2", "range must lie in [0, 1]");
    if (spec.vis_params.size() > 1 || (spec.vis_params.size() == 1 && spec.vis_params[0].name != "colormap")) {
      throw ValidationError("vis_params", "synthetic field supports only a 'colormap' parameter");
    }
    if (!spec.vis_params.empty()) {
      for (const auto& opt : spec.vis_params[0].options) {
        auto it = std::find_if(cfg.colormaps.begin(), cfg.colormaps.end(),
                               [&](const Colormap& c) { return c.name == opt; });
        if (it == cfg.colormaps.end()) throw ValidationError("colormap", "unknown colormap " + opt);
        colormap_of_option.push_back(static_cast<std::size_t>(it - cfg.colormaps.begin()));
      }
    }
  }

  FieldParams params(const ParameterSetting& s) const { return {s.sim_values[p1], s.sim_values[p2]}; }
  std::size_t colormap(const ParameterSetting& s) const {
    return colormap_of_option.empty() ? 0 : colormap_of_option[static_cast<std::size_t>(s.vis_choices[0])];
  }
};

}  // namespace

Manifest generate_database(const ParameterSpec& spec, const RenderConfig& cfg,
                           const GenerateOptions& opts, const fs::path& out_dir) {
  cfg.validate();
  spec.validate();
  const SettingResolver resolve(spec, cfg);
  if (!(opts.test_fraction >= 0.0 && opts.test_fraction < 1.0)) {
    throw ValidationError("test_fraction", "must be in [0, 1)");
  }
  const auto settings = sample_settings(spec, opts.n_members, opts.n_views, opts.seed);
  const std::size_t per_member = settings.size() / opts.n_members;

  // Whole members are held out.
  const auto n_test = static_cast<std::size_t>(
      std::llround(opts.test_fraction * static_cast<double>(opts.n_members)));
  std::vector<std::size_t> members(opts.n_members);
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = i;
  std::mt19937_64 rng(mix_seed(opts.seed, 2));
  for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[uniform_index(rng, i)]);
  std::vector<bool> is_test(opts.n_members, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[members[i]] = true;

  const bool created_dir = !fs::exists(out_dir);
  std::vector<fs::path> written;
  std::mutex written_mu;
  auto cleanup = [&] {
    std::error_code ec;
    for (const auto& f : written) fs::remove(f, ec);
    fs::remove(out_dir / "manifest.json", ec);
    if (created_dir) fs::remove_all(out_dir, ec);
  };

  Manifest m;
  m.spec = spec;
  m.resolution = cfg.resolution;
  m.render_config = cfg.to_json();
  m.render_digest = cfg.digest();
  m.seed = opts.seed;
  m.root = out_dir;
  m.records.resize(settings.size());

  try {
    fs::create_directories(out_dir / "images");
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto worker = [&] {
      for (std::size_t i = next++; i < settings.size(); i = next++) {
        try {
          const auto& s = settings[i];
          char name[32];
          std::snprintf(name, sizeof(name), "images/%06zu.png", i);
          const Image img = render(resolve.params(s), resolve.colormap(s), s.view, cfg);
          write_png(img, (out_dir / name).string());
          {
            std::lock_guard lock(written_mu);
            written.push_back(out_dir / name);
          }
          const std::size_t member = i / per_member;
          m.records[i] = {static_cast<std::int64_t>(i), static_cast<std::int64_t>(member), s, name,
                          is_test[member] ? Split::test : Split::train};
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
          next = settings.size();
        }
      }
    };
    const int n_workers = std::max(1, opts.workers);
    std::vector<std::thread> pool;
    for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    for (const auto& r : m.records) (r.split == Split::train ? m.n_train : m.n_test)++;
    write_manifest(m, out_dir);
  } catch (...) {
    cleanup();
    throw;
  }
  return m;
}

}  // namespace vsur
