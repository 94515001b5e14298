#pragma once

// HTTP front end over a loaded checkpoint:
//   GET  /spec         parameter spec, resolution and checkpoint digest
//   POST /infer        {setting} -> {image: base64 PNG, latency_ms}
//   POST /sensitivity  {setting, param, mode} -> curve(s) or block map
// Every model call runs on one serial executor; requests are validated
// before they are queued.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "vsur/executor.hpp"
#include "vsur/model.hpp"
#include "vsur/sensitivity.hpp"

namespace vsur {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int block_size = 16;
  int sweep_points = 128;
  std::size_t cache_entries = 256;
  std::size_t queue_depth = 64;
  std::optional<std::filesystem::path> ui_dir;
};

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

class ExploreService {
 public:
  ExploreService(LoadedModel model, ServiceConfig cfg);
  ~ExploreService();

  HttpReply get_spec() const;
  HttpReply post_infer(const std::string& body);
  HttpReply post_sensitivity(const std::string& body);

  /// PNG bytes of the prediction for a validated setting.
  std::string predict_png(const ParameterSetting& setting);

  /// Binds the listening socket and returns the bound port.
  int bind();
  /// Serves until stop(); call bind() first.
  void run();
  void stop();

  const ServiceConfig& config() const { return cfg_; }
  const ParameterSpec& spec() const { return model_.meta.spec; }
  SerialExecutor& executor() { return executor_; }

 private:
  LoadedModel model_;
  ServiceConfig cfg_;
  SensitivityAnalyzer analyzer_;
  LruCache<std::string, std::string> cache_;
  SerialExecutor executor_;
  struct Http;
  std::unique_ptr<Http> http_;
};

/// Parses a setting from a request body: either the setting itself or an
/// object holding it under "setting". Throws ValidationError.
ParameterSetting setting_from_request(const nlohmann::json& body, const ParameterSpec& spec);

}  // namespace vsur
