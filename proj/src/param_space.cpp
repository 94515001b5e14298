#include "vsur/param_space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "vsur/random.hpp"

namespace vsur {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

}  // namespace

void ParameterSpec::validate() const {
  std::set<std::string> names;
  auto claim = [&](const std::string& name) {
    if (name.empty()) throw ValidationError("", "parameter with empty name");
    if (!names.insert(name).second) throw ValidationError(name, "duplicate parameter name");
  };
  for (const auto& p : sim_params) {
    claim(p.name);
    if (!(std::isfinite(p.min) && std::isfinite(p.max) && p.min < p.max)) {
      throw ValidationError(p.name, "range requires min < max");
    }
  }
  for (const auto& p : vis_params) {
    claim(p.name);
    if (p.options.empty()) throw ValidationError(p.name, "option list is empty");
  }
  if (view_enabled) {
    claim("azimuth");
    claim("elevation");
  }
}

std::size_t ParameterSpec::vis_dim() const {
  std::size_t n = 0;
  for (const auto& p : vis_params) n += p.options.size();
  return n;
}

std::size_t ParameterSpec::vis_combination_count() const {
  std::size_t n = 1;
  for (const auto& p : vis_params) n *= p.options.size();
  return n;
}

std::optional<std::size_t> ParameterSpec::sim_index(const std::string& name) const {
  for (std::size_t i = 0; i < sim_params.size(); ++i) {
    if (sim_params[i].name == name) return i;
  }
  return std::nullopt;
}

std::vector<double> EncodedInputs::concatenated() const {
  std::vector<double> out;
  out.reserve(sim_vec.size() + vis_vec.size() + view_vec.size());
  out.insert(out.end(), sim_vec.begin(), sim_vec.end());
  out.insert(out.end(), vis_vec.begin(), vis_vec.end());
  out.insert(out.end(), view_vec.begin(), view_vec.end());
  return out;
}

double canonical_azimuth(double degrees) {
  double a = std::fmod(degrees, 360.0);
  if (a < 0.0) a += 360.0;
  return a >= 360.0 ? 0.0 : a;
}

double clamp_elevation(double degrees) { return std::clamp(degrees, -90.0, 90.0); }

ParameterSetting canonicalize(ParameterSetting setting) {
  setting.view.azimuth = canonical_azimuth(setting.view.azimuth);
  setting.view.elevation = clamp_elevation(setting.view.elevation);
  return setting;
}

void validate(const ParameterSetting& setting, const ParameterSpec& spec) {
  if (setting.sim_values.size() != spec.sim_params.size()) {
    throw ValidationError("sim_values", "expected " + std::to_string(spec.sim_params.size()) +
                                            " values, got " +
                                            std::to_string(setting.sim_values.size()));
  }
  for (std::size_t i = 0; i < spec.sim_params.size(); ++i) {
    const auto& p = spec.sim_params[i];
    const double v = setting.sim_values[i];
    if (!std::isfinite(v) || v < p.min || v > p.max) {
      throw ValidationError(p.name, "value " + std::to_string(v) + " outside [" +
                                        std::to_string(p.min) + ", " + std::to_string(p.max) + "]");
    }
  }
  if (setting.vis_choices.size() != spec.vis_params.size()) {
    throw ValidationError("vis_choices", "expected " + std::to_string(spec.vis_params.size()) +
                                             " choices, got " +
                                             std::to_string(setting.vis_choices.size()));
  }
  for (std::size_t i = 0; i < spec.vis_params.size(); ++i) {
    const auto& p = spec.vis_params[i];
    const int c = setting.vis_choices[i];
    if (c < 0 || static_cast<std::size_t>(c) >= p.options.size()) {
      throw ValidationError(p.name, "choice index " + std::to_string(c) + " not in [0, " +
                                        std::to_string(p.options.size()) + ")");
    }
  }
  if (!std::isfinite(setting.view.azimuth)) throw ValidationError("azimuth", "not finite");
  if (!std::isfinite(setting.view.elevation)) throw ValidationError("elevation", "not finite");
}

double to_unit(double value, const ContinuousParam& p) {
  return 2.0 * (value - p.min) / (p.max - p.min) - 1.0;
}

double from_unit(double unit, const ContinuousParam& p) {
  return p.min + (unit + 1.0) * 0.5 * (p.max - p.min);
}

EncodedInputs normalize(const ParameterSetting& setting, const ParameterSpec& spec) {
  validate(setting, spec);
  EncodedInputs enc;
  enc.sim_vec.reserve(spec.sim_dim());
  for (std::size_t i = 0; i < spec.sim_params.size(); ++i) {
    enc.sim_vec.push_back(to_unit(setting.sim_values[i], spec.sim_params[i]));
  }
  enc.vis_vec.assign(spec.vis_dim(), 0.0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < spec.vis_params.size(); ++i) {
    enc.vis_vec[offset + static_cast<std::size_t>(setting.vis_choices[i])] = 1.0;
    offset += spec.vis_params[i].options.size();
  }
  if (spec.view_enabled) {
    const double theta = canonical_azimuth(setting.view.azimuth) * kDegToRad;
    const double phi = clamp_elevation(setting.view.elevation);
    enc.view_vec = {std::sin(theta), std::cos(theta), phi / 90.0};
  }
  return enc;
}

ParameterSetting denormalize(const EncodedInputs& encoded, const ParameterSpec& spec) {
  if (encoded.sim_vec.size() != spec.sim_dim()) throw ValidationError("sim_vec", "shape mismatch");
  if (encoded.vis_vec.size() != spec.vis_dim()) throw ValidationError("vis_vec", "shape mismatch");
  if (encoded.view_vec.size() != spec.view_dim()) {
    throw ValidationError("view_vec", "shape mismatch");
  }
  ParameterSetting s;
  for (std::size_t i = 0; i < spec.sim_params.size(); ++i) {
    s.sim_values.push_back(from_unit(encoded.sim_vec[i], spec.sim_params[i]));
  }
  std::size_t offset = 0;
  for (const auto& p : spec.vis_params) {
    const auto first = encoded.vis_vec.begin() + static_cast<std::ptrdiff_t>(offset);
    const auto last = first + static_cast<std::ptrdiff_t>(p.options.size());
    s.vis_choices.push_back(static_cast<int>(std::max_element(first, last) - first));
    offset += p.options.size();
  }
  if (spec.view_enabled) {
    const double theta = std::atan2(encoded.view_vec[0], encoded.view_vec[1]) / kDegToRad;
    s.view.azimuth = canonical_azimuth(theta);
    s.view.elevation = clamp_elevation(encoded.view_vec[2] * 90.0);
  }
  return s;
}

std::vector<std::vector<int>> vis_combinations(const ParameterSpec& spec) {
  std::vector<std::vector<int>> out;
  std::vector<int> current(spec.vis_params.size(), 0);
  const std::size_t total = spec.vis_combination_count();
  out.reserve(total);
  for (std::size_t n = 0; n < total; ++n) {
    out.push_back(current);
    for (std::size_t i = spec.vis_params.size(); i-- > 0;) {
      if (++current[i] < static_cast<int>(spec.vis_params[i].options.size())) break;
      current[i] = 0;
    }
  }
  return out;
}

std::vector<ParameterSetting> sample_settings(const ParameterSpec& spec, std::size_t n_members,
                                              std::size_t n_views, std::uint64_t seed) {
  spec.validate();
  if (n_members < 1) throw ValidationError("n_members", "must be >= 1");
  if (n_views < 1) throw ValidationError("n_views", "must be >= 1");
  if (!spec.view_enabled && n_views != 1) {
    throw ValidationError("n_views", "must be 1 when the view is disabled");
  }
  const auto combos = vis_combinations(spec);
  std::vector<ParameterSetting> out;
  out.reserve(n_members * n_views * combos.size());

  std::mt19937_64 sim_rng(mix_seed(seed, 0));
  std::mt19937_64 view_rng(mix_seed(seed, 1));
  for (std::size_t m = 0; m < n_members; ++m) {
    std::vector<double> sim;
    for (const auto& p : spec.sim_params) sim.push_back(uniform(sim_rng, p.min, p.max));
    for (std::size_t v = 0; v < n_views; ++v) {
      ViewAngles view;
      if (spec.view_enabled) {
        view.azimuth = canonical_azimuth(uniform(view_rng, 0.0, 360.0));
        view.elevation = uniform(view_rng, -90.0, 90.0);
      }
      for (const auto& combo : combos) out.push_back({sim, combo, view});
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ParameterSpec& spec) {
  j = nlohmann::json::object();
  j["sim_params"] = nlohmann::json::array();
  for (const auto& p : spec.sim_params) {
    j["sim_params"].push_back({{"name", p.name}, {"min", p.min}, {"max", p.max}});
  }
  j["vis_params"] = nlohmann::json::array();
  for (const auto& p : spec.vis_params) {
    j["vis_params"].push_back({{"name", p.name}, {"options", p.options}});
  }
  j["view_params"] = {{"enabled", spec.view_enabled},
                      {"azimuth", {0.0, 360.0}},
                      {"elevation", {-90.0, 90.0}}};
}

void from_json(const nlohmann::json& j, ParameterSpec& spec) {
  spec = ParameterSpec{};
  try {
    for (const auto& p : j.at("sim_params")) {
      spec.sim_params.push_back(
          {p.at("name").get<std::string>(), p.at("min").get<double>(), p.at("max").get<double>()});
    }
    if (j.contains("vis_params")) {
      for (const auto& p : j.at("vis_params")) {
        spec.vis_params.push_back(
            {p.at("name").get<std::string>(), p.at("options").get<std::vector<std::string>>()});
      }
    }
    spec.view_enabled = j.contains("view_params") ? j.at("view_params").value("enabled", true)
                                                  : false;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("spec", e.what());
  }
  spec.validate();
}

void to_json(nlohmann::json& j, const ParameterSetting& s) {
  j = {{"sim_values", s.sim_values},
       {"vis_choices", s.vis_choices},
       {"view", {{"azimuth", s.view.azimuth}, {"elevation", s.view.elevation}}}};
}

void from_json(const nlohmann::json& j, ParameterSetting& s) {
  s = ParameterSetting{};
  try {
    s.sim_values = j.at("sim_values").get<std::vector<double>>();
    if (j.contains("vis_choices")) s.vis_choices = j.at("vis_choices").get<std::vector<int>>();
    if (j.contains("view")) {
      s.view.azimuth = j.at("view").value("azimuth", 0.0);
      s.view.elevation = j.at("view").value("elevation", 0.0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("setting", e.what());
  }
}

ParameterSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open parameter spec " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed parameter spec " + path + ": " + e.what());
  }
  return j.get<ParameterSpec>();
}

void save_spec(const ParameterSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write parameter spec " + path);
  out << nlohmann::json(spec).dump(2) << '\n';
}

}  // namespace vsur
