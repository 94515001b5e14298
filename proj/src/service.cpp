#include "vsur/service.hpp"

#include <chrono>

#include <httplib.h>

#include "vsur/digest.hpp"
#include "vsur/errors.hpp"
#include "vsur/image.hpp"
#include "vsur/image_db.hpp"

namespace vsur {

namespace {

HttpReply json_reply(int status, const nlohmann::json& j) { return {status, j.dump(), "application/json"}; }

HttpReply error_reply(int status, const std::string& kind, const std::string& message,
                      const std::string& field = {}) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  return json_reply(status, j);
}

nlohmann::json parse_body(const std::string& body) {
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("body", std::string("malformed JSON: ") + e.what());
  }
}

const char* kIndexPage =
    "<!doctype html><title>vsur</title><p>Endpoints: GET /spec, POST /infer, POST /sensitivity</p>";

}  // namespace

ParameterSetting setting_from_request(const nlohmann::json& body, const ParameterSpec& spec) {
  if (!body.is_object()) throw ValidationError("body", "expected a JSON object");
  const auto& j = body.contains("setting") ? body.at("setting") : body;
  auto s = j.get<ParameterSetting>();
  validate(s, spec);
  return canonicalize(std::move(s));
}

struct ExploreService::Http {
  httplib::Server server;
};

ExploreService::ExploreService(LoadedModel model, ServiceConfig cfg)
    : model_(std::move(model)),
      cfg_(std::move(cfg)),
      analyzer_(model_.regressor, model_.meta.spec),
      cache_(cfg_.cache_entries),
      executor_(cfg_.queue_depth),
      http_(std::make_unique<Http>()) {
  if (cfg_.sweep_points < 2) throw ValidationError("sweep_points", "must be >= 2");
  if (cfg_.block_size < 1 || model_.meta.model.resolution % cfg_.block_size != 0) {
    throw ValidationError("block_size", "must divide the resolution " +
                                            std::to_string(model_.meta.model.resolution));
  }
  model_.regressor->eval();

  auto& svr = http_->server;
  auto adapt = [](const HttpReply& r, httplib::Response& res) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  svr.Get("/spec", [this, adapt](const httplib::Request&, httplib::Response& res) { adapt(get_spec(), res); });
  svr.Post("/infer", [this, adapt](const httplib::Request& req, httplib::Response& res) {
    adapt(post_infer(req.body), res);
  });
  svr.Post("/sensitivity", [this, adapt](const httplib::Request& req, httplib::Response& res) {
    adapt(post_sensitivity(req.body), res);
  });
  if (cfg_.ui_dir) {
    if (!svr.set_mount_point("/", cfg_.ui_dir->string())) {
      throw LoadError("UI directory not found: " + cfg_.ui_dir->string());
    }
  } else {
    svr.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kIndexPage, "text/html"); });
  }
}

ExploreService::~ExploreService() { stop(); }

HttpReply ExploreService::get_spec() const {
  nlohmann::json j = model_.meta.spec;
  j["resolution"] = model_.meta.model.resolution;
  j["checkpoint_digest"] = model_.digest;
  j["spec_digest"] = fnv1a_hex(nlohmann::json(model_.meta.spec).dump());
  return json_reply(200, j);
}

std::string ExploreService::predict_png(const ParameterSetting& setting) {
  const std::string key = nlohmann::json(setting).dump();
  if (auto hit = cache_.get(key)) return *hit;
  auto png = executor_
                 .submit([this, &setting] {
                   torch::NoGradGuard no_grad;
                   const auto out = model_.regressor(encode_batch({setting}, model_.meta.spec));
                   return encode_png(tensor_to_image(out[0]));
                 })
                 .get();
  std::string bytes(png.begin(), png.end());
  cache_.put(key, bytes);
  return bytes;
}

HttpReply ExploreService::post_infer(const std::string& body) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const auto setting = setting_from_request(parse_body(body), model_.meta.spec);
    const auto png = predict_png(setting);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return json_reply(200, {{"image", base64_encode(std::vector<std::uint8_t>(png.begin(), png.end()))},
                            {"latency_ms", ms}});
  } catch (const ValidationError& e) {
    return error_reply(422, "validation", e.what(), e.field());
  } catch (const QueueFull& e) {
    return error_reply(503, "busy", e.what());
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

HttpReply ExploreService::post_sensitivity(const std::string& body) {
  try {
    const auto j = parse_body(body);
    const auto setting = setting_from_request(j, model_.meta.spec);
    const std::string mode = j.value("mode", "overall");
    const std::string param = j.value("param", "*");
    const auto& spec = model_.meta.spec;
    if (mode != "overall" && mode != "subregion") {
      throw ValidationError("mode", "expected overall or subregion, got '" + mode + "'");
    }
    std::vector<std::string> params;
    if (param == "*") {
      if (mode == "subregion") throw ValidationError("param", "subregion mode needs one parameter");
      for (const auto& p : spec.sim_params) params.push_back(p.name);
    } else {
      if (!spec.sim_index(param)) {
        bool discrete = false;
        for (const auto& d : spec.vis_params) discrete = discrete || d.name == param;
        throw ValidationError("param", discrete ? "'" + param + "' is discrete; sensitivity needs a continuous "
                                                                  "simulation parameter"
                                                : "unknown parameter '" + param + "'");
      }
      params.push_back(param);
    }
    const int points = cfg_.sweep_points;
    const int block = cfg_.block_size;
    auto result = executor_
                      .submit([&, this]() -> nlohmann::json {
                        if (mode == "subregion") {
                          const auto m = analyzer_.subregion(setting, params.front(), block);
                          auto out = to_json(m);
                          out["image"] = base64_encode(encode_png(m.prediction));
                          out["overlay"] = base64_encode(encode_png(sensitivity_overlay(m)));
                          return out;
                        }
                        nlohmann::json curves = nlohmann::json::array();
                        for (const auto& p : params) curves.push_back(to_json(analyzer_.overall(setting, p, points)));
                        if (param != "*") return curves.front();
                        return {{"curves", curves}};
                      })
                      .get();
    return json_reply(200, result);
  } catch (const ValidationError& e) {
    return error_reply(422, "validation", e.what(), e.field());
  } catch (const QueueFull& e) {
    return error_reply(503, "busy", e.what());
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

int ExploreService::bind() {
  auto& svr = http_->server;
  if (cfg_.port == 0) return svr.bind_to_any_port(cfg_.host);
  if (!svr.bind_to_port(cfg_.host, cfg_.port)) {
    throw LoadError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  }
  return cfg_.port;
}

void ExploreService::run() { http_->server.listen_after_bind(); }

void ExploreService::stop() {
  if (http_ && http_->server.is_running()) http_->server.stop();
}

}  // namespace vsur
