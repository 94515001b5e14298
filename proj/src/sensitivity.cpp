#include "vsur/sensitivity.hpp"

#include <algorithm>
#include <cmath>

#include "vsur/errors.hpp"
#include "vsur/image_db.hpp"

namespace vsur {

std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 1) throw ValidationError("n", "sweep needs at least one point");
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  out.back() = hi;
  return out;
}

double relative_l2(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("relative_l2: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : INFINITY;
  return std::sqrt(num / den);
}

double central_difference(const std::function<double(double)>& s, double p, double delta, double lo,
                          double hi) {
  if (!(delta > 0.0)) throw ValidationError("delta", "must be > 0");
  const double a = std::max(lo, p - delta), b = std::min(hi, p + delta);
  return (s(b) - s(a)) / (b - a);
}

nlohmann::json to_json(const SensitivityCurve& c) {
  nlohmann::json j = {{"param", c.param},
                      {"method", c.method},
                      {"sweep", c.sweep},
                      {"values", c.values},
                      {"signed_values", c.signed_values},
                      {"units", "d(sum |I|)/d(" + c.param + "), image in [-1, 1]"}};
  if (c.delta > 0.0) j["delta"] = c.delta;
  return j;
}

nlohmann::json to_json(const SensitivityMap& m) {
  return {{"param", m.param},
          {"block", m.block},
          {"rows", m.rows},
          {"cols", m.cols},
          {"signed_values", m.signed_values},
          {"magnitudes", m.magnitudes},
          {"normalized", m.normalized},
          {"whole_image", m.whole_image}};
}

Image sensitivity_overlay(const SensitivityMap& m) {
  Image out = m.prediction;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const int r = std::min(m.rows - 1, y / m.block);
      const int c = std::min(m.cols - 1, x / m.block);
      const double t = m.normalized[static_cast<std::size_t>(r * m.cols + c)];
      const double tint[3] = {255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t)};
      for (int ch = 0; ch < 3; ++ch) {
        const double v = 0.5 * out.at(x, y, ch) + 0.5 * tint[ch];
        out.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return out;
}

SensitivityAnalyzer::SensitivityAnalyzer(const Regressor& regressor, ParameterSpec spec, int chunk)
    : model_(clone_regressor(regressor, torch::kFloat64)), spec_(std::move(spec)), chunk_(chunk) {
  if (chunk_ < 1) throw ValidationError("chunk", "must be >= 1");
  spec_.validate();
  model_->eval();
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
}

std::size_t SensitivityAnalyzer::param_index(const std::string& param) const {
  const auto idx = spec_.sim_index(param);
  if (idx) return *idx;
  for (const auto& d : spec_.vis_params) {
    if (d.name == param) {
      throw ValidationError("param", "'" + param +
                                         "' is discrete; compare forward predictions for its options instead");
    }
  }
  throw ValidationError("param", "unknown simulation parameter '" + param + "'");
}

std::vector<ParameterSetting> SensitivityAnalyzer::sweep_settings(const ParameterSetting& base,
                                                                  std::size_t idx,
                                                                  const std::vector<double>& values) const {
  std::vector<ParameterSetting> out;
  out.reserve(values.size());
  for (double v : values) {
    ParameterSetting s = base;
    s.sim_values[idx] = v;
    out.push_back(std::move(s));
  }
  return out;
}

double SensitivityAnalyzer::image_l1(const ParameterSetting& setting) {
  return image_l1(std::vector<ParameterSetting>{setting}).front();
}

std::vector<double> SensitivityAnalyzer::image_l1(const std::vector<ParameterSetting>& settings) {
  torch::NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t i = 0; i < settings.size(); i += static_cast<std::size_t>(chunk_)) {
    const std::vector<ParameterSetting> part(
        settings.begin() + static_cast<std::ptrdiff_t>(i),
        settings.begin() + static_cast<std::ptrdiff_t>(std::min(settings.size(), i + static_cast<std::size_t>(chunk_))));
    for (const auto& s : part) validate(s, spec_);
    const auto img = model_(encode_batch(part, spec_, torch::kFloat64));
    const auto s = img.abs().sum({1, 2, 3});
    for (std::int64_t k = 0; k < s.size(0); ++k) out.push_back(s[k].item<double>());
  }
  return out;
}

double SensitivityAnalyzer::derivative(const ParameterSetting& setting, const std::string& param) {
  return derivatives({setting}, param_index(param)).front();
}

std::vector<double> SensitivityAnalyzer::derivatives(const std::vector<ParameterSetting>& settings,
                                                     std::size_t idx) {
  const auto& range = spec_.sim_params[idx];
  const double scale = 2.0 / (range.max - range.min);
  std::vector<double> out;
  for (std::size_t i = 0; i < settings.size(); i += static_cast<std::size_t>(chunk_)) {
    const std::vector<ParameterSetting> part(
        settings.begin() + static_cast<std::ptrdiff_t>(i),
        settings.begin() + static_cast<std::ptrdiff_t>(std::min(settings.size(), i + static_cast<std::size_t>(chunk_))));
    for (const auto& s : part) validate(s, spec_);
    auto enc = encode_batch(part, spec_, torch::kFloat64);
    enc.sim.set_requires_grad(true);
    // Samples are independent in eval mode, so the gradient of the summed
    // objective holds every per-sample derivative.
    model_(enc).abs().sum().backward();
    const auto g = enc.sim.grad().select(1, static_cast<std::int64_t>(idx)) * scale;
    for (std::int64_t k = 0; k < g.size(0); ++k) out.push_back(g[k].item<double>());
  }
  return out;
}

SensitivityCurve SensitivityAnalyzer::overall(const ParameterSetting& base, const std::string& param, int n) {
  const auto idx = param_index(param);
  const auto& range = spec_.sim_params[idx];
  SensitivityCurve c;
  c.param = param;
  c.method = "backprop";
  c.sweep = linspace(range.min, range.max, n);
  c.signed_values = derivatives(sweep_settings(base, idx, c.sweep), idx);
  for (double d : c.signed_values) c.values.push_back(std::abs(d));
  return c;
}

SensitivityCurve SensitivityAnalyzer::central_difference(const ParameterSetting& base, const std::string& param,
                                                         int n, std::optional<double> delta) {
  const auto idx = param_index(param);
  const auto& range = spec_.sim_params[idx];
  const double h = delta.value_or((range.max - range.min) / 1000.0);
  if (!(h > 0.0)) throw ValidationError("delta", "must be > 0");
  SensitivityCurve c;
  c.param = param;
  c.method = "central_difference";
  c.delta = h;
  c.sweep = linspace(range.min, range.max, n);
  std::vector<double> lo, hi;
  for (double p : c.sweep) {
    lo.push_back(std::max(range.min, p - h));
    hi.push_back(std::min(range.max, p + h));
  }
  const auto s_lo = image_l1(sweep_settings(base, idx, lo));
  const auto s_hi = image_l1(sweep_settings(base, idx, hi));
  for (std::size_t i = 0; i < c.sweep.size(); ++i) {
    const double d = (s_hi[i] - s_lo[i]) / (hi[i] - lo[i]);
    c.signed_values.push_back(d);
    c.values.push_back(std::abs(d));
  }
  return c;
}

SensitivityMap SensitivityAnalyzer::subregion(const ParameterSetting& setting, const std::string& param, int block) {
  const auto idx = param_index(param);
  validate(setting, spec_);
  const int res = model_->config().resolution;
  if (block < 1 || res % block != 0) {
    throw ValidationError("block", "block size " + std::to_string(block) + " does not divide resolution " +
                                       std::to_string(res));
  }
  SensitivityMap m;
  m.param = param;
  m.block = block;
  m.rows = res / block;
  m.cols = m.rows;
  const double scale = 2.0 / (spec_.sim_params[idx].max - spec_.sim_params[idx].min);
  const int n_blocks = m.rows * m.cols;

  // Row r of the replicated batch carries the objective of block r.
  for (int start = 0; start < n_blocks; start += chunk_) {
    const int count = std::min(chunk_, n_blocks - start);
    auto enc = encode_batch(std::vector<ParameterSetting>(static_cast<std::size_t>(count), setting), spec_,
                            torch::kFloat64);
    enc.sim.set_requires_grad(true);
    const auto img = model_(enc).abs();
    auto total = torch::zeros({}, torch::kFloat64);
    for (int r = 0; r < count; ++r) {
      const int b = start + r;
      const int y0 = (b / m.cols) * block, x0 = (b % m.cols) * block;
      total = total + img[r].slice(1, y0, std::min(res, y0 + block)).slice(2, x0, std::min(res, x0 + block)).sum();
    }
    total.backward();
    const auto g = enc.sim.grad().select(1, static_cast<std::int64_t>(idx)) * scale;
    for (int r = 0; r < count; ++r) m.signed_values.push_back(g[r].item<double>());
  }
  double max_mag = 0.0;
  for (double v : m.signed_values) {
    m.magnitudes.push_back(std::abs(v));
    max_mag = std::max(max_mag, std::abs(v));
  }
  for (double v : m.magnitudes) m.normalized.push_back(max_mag > 0.0 ? v / max_mag : 0.0);
  m.whole_image = derivatives({setting}, idx).front();
  {
    torch::NoGradGuard no_grad;
    m.prediction = tensor_to_image(model_(encode_batch({setting}, spec_, torch::kFloat64))[0]);
  }
  return m;
}

}  // namespace vsur
