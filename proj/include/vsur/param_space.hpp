#pragma once

// Parameter groups of the surrogate: simulation parameters (continuous
// ranges), visual-mapping parameters (discrete option lists) and the camera
// view (azimuth/elevation). Settings are validated here and encoded into the
// normalized vectors consumed by the networks.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsur/errors.hpp"

namespace vsur {

struct ContinuousParam {
  std::string name;
  double min = 0.0;
  double max = 1.0;
  bool operator==(const ContinuousParam&) const = default;
};

struct DiscreteParam {
  std::string name;
  std::vector<std::string> options;
  bool operator==(const DiscreteParam&) const = default;
};

struct ParameterSpec {
  std::vector<ContinuousParam> sim_params;
  std::vector<DiscreteParam> vis_params;
  bool view_enabled = true;

  /// Throws ValidationError on empty option lists, min >= max or duplicate
  /// names across groups.
  void validate() const;

  std::size_t sim_dim() const { return sim_params.size(); }
  std::size_t vis_dim() const;
  std::size_t view_dim() const { return view_enabled ? 3 : 0; }
  /// Number of distinct visual-mapping combinations (1 when there are none).
  std::size_t vis_combination_count() const;

  std::optional<std::size_t> sim_index(const std::string& name) const;
  bool operator==(const ParameterSpec&) const = default;
};

struct ViewAngles {
  double azimuth = 0.0;    // degrees, periodic
  double elevation = 0.0;  // degrees, [-90, 90]
  bool operator==(const ViewAngles&) const = default;
};

struct ParameterSetting {
  std::vector<double> sim_values;
  std::vector<int> vis_choices;
  ViewAngles view;
  bool operator==(const ParameterSetting&) const = default;
};

struct EncodedInputs {
  std::vector<double> sim_vec;
  std::vector<double> vis_vec;
  std::vector<double> view_vec;

  /// sim_vec ++ vis_vec ++ view_vec.
  std::vector<double> concatenated() const;
};

/// Azimuth reduced to [0, 360).
double canonical_azimuth(double degrees);
double clamp_elevation(double degrees);

/// Range and index checks; ValidationError names the first bad parameter.
void validate(const ParameterSetting& setting, const ParameterSpec& spec);

/// Copy of `setting` with azimuth canonicalized and elevation clamped.
ParameterSetting canonicalize(ParameterSetting setting);

EncodedInputs normalize(const ParameterSetting& setting, const ParameterSpec& spec);
ParameterSetting denormalize(const EncodedInputs& encoded, const ParameterSpec& spec);

/// Maps a physical simulation value to [-1, 1] and back.
double to_unit(double value, const ContinuousParam& p);
double from_unit(double unit, const ContinuousParam& p);

/// n_members seeded uniform draws of the simulation parameters, each paired
/// with n_views seeded uniform views and every visual-mapping combination.
/// Layout is member-major: index = (member * n_views + view) * n_vis + vis.
std::vector<ParameterSetting> sample_settings(const ParameterSpec& spec,
                                              std::size_t n_members,
                                              std::size_t n_views,
                                              std::uint64_t seed);

/// Enumerates every visual-mapping combination in odometer order (last
/// parameter varies fastest).
std::vector<std::vector<int>> vis_combinations(const ParameterSpec& spec);

void to_json(nlohmann::json& j, const ParameterSpec& spec);
void from_json(const nlohmann::json& j, ParameterSpec& spec);
void to_json(nlohmann::json& j, const ParameterSetting& s);
void from_json(const nlohmann::json& j, ParameterSetting& s);

ParameterSpec load_spec(const std::string& path);
void save_spec(const ParameterSpec& spec, const std::string& path);

}  // namespace vsur
