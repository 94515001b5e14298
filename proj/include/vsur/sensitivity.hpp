#pragma once

// Parameter sensitivity of a trained regressor. The sensitivity of an image
// I to a simulation parameter p is d/dp of sum |I| (image in [-1, 1]),
// taken by backpropagation to the input and reported per unit of p.
//
// Analysis runs on a float64 copy of the regressor in eval mode, so values
// do not depend on batch composition.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

#include "vsur/image.hpp"
#include "vsur/model.hpp"
#include "vsur/param_space.hpp"

namespace vsur {

struct SensitivityCurve {
  std::string param;
  std::string method;  // "backprop" or "central_difference"
  std::vector<double> sweep;          // parameter values, physical units
  std::vector<double> values;         // |ds/dp|
  std::vector<double> signed_values;  // ds/dp
  double delta = 0.0;                 // finite-difference step, when used
};

nlohmann::json to_json(const SensitivityCurve& c);

struct SensitivityMap {
  std::string param;
  int block = 16;
  int rows = 0;
  int cols = 0;
  std::vector<double> signed_values;  // row-major, one per block
  std::vector<double> magnitudes;     // |signed_values|
  std::vector<double> normalized;     // magnitudes / max, in [0, 1]
  double whole_image = 0.0;           // ds/dp for the full image
  Image prediction;
};

nlohmann::json to_json(const SensitivityMap& m);

/// Prediction with blocks tinted from white (insensitive) to red.
Image sensitivity_overlay(const SensitivityMap& m);

class SensitivityAnalyzer {
 public:
  SensitivityAnalyzer(const Regressor& regressor, ParameterSpec spec, int chunk = 16);

  const ParameterSpec& spec() const { return spec_; }

  /// sum |I| for one setting.
  double image_l1(const ParameterSetting& setting);
  /// sum |I| for many settings, one forward pass per chunk.
  std::vector<double> image_l1(const std::vector<ParameterSetting>& settings);
  /// ds/dp at `setting`.
  double derivative(const ParameterSetting& setting, const std::string& param);

  /// Backpropagated sensitivity at `n` evenly spaced values of `param`
  /// between its bounds, other parameters fixed at `base`.
  SensitivityCurve overall(const ParameterSetting& base, const std::string& param, int n = 128);

  /// Same sweep by central differences with step `delta` (default
  /// range / 1000); one-sided differences at the bounds.
  SensitivityCurve central_difference(const ParameterSetting& base, const std::string& param,
                                      int n = 128, std::optional<double> delta = std::nullopt);

  /// Per-block sensitivity over a grid of `block` x `block` pixel tiles.
  SensitivityMap subregion(const ParameterSetting& setting, const std::string& param, int block = 16);

 private:
  std::size_t param_index(const std::string& param) const;
  std::vector<double> derivatives(const std::vector<ParameterSetting>& settings, std::size_t idx);
  std::vector<ParameterSetting> sweep_settings(const ParameterSetting& base, std::size_t idx,
                                               const std::vector<double>& values) const;

  Regressor model_;
  ParameterSpec spec_;
  int chunk_;
};

/// n evenly spaced values over [lo, hi], both ends included.
std::vector<double> linspace(double lo, double hi, int n);

/// (s(p + delta) - s(p - delta)) / (2 delta), stepping only inward at the
/// bounds lo and hi.
double central_difference(const std::function<double(double)>& s, double p, double delta, double lo,
                          double hi);

/// ||a - b||_2 / ||b||_2.
double relative_l2(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace vsur
