#ifndef FINGERFORGE_SERVICE_HPP
#define FINGERFORGE_SERVICE_HPP

// HTTP/JSON front end over registry::Store.
//
//   POST /v1/ingest             {device_id, schema_version, samples: [...]}
//   POST /v1/authenticate       {device_id, samples: [...]}
//   PUT  /v1/models/{device_id} {model: base64, sha256?, map, policy, window?, stride?, schema_version?}
//   GET  /v1/models/{device_id} container bytes (?hash= for archived ones)
//   GET  /v1/report             report.json of the configured report directory
//
// Requests may carry X-Fingerforge-Protocol; any value other than the
// supported version is refused with 400.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's product kernels.
#include "fingerforge/registry.hpp"

#include <httplib.h>
#include <json.hpp>

namespace fingerforge::service {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kProtocolHeader = "X-Fingerforge-Protocol";
inline constexpr const char* kProtocolVersion = "1";
inline constexpr const char* kHashHeader = "X-Content-SHA256";

inline int http_status(Errc code) {
  switch (code) {
    case Errc::MissingModel:
      return 404;
    case Errc::HashMismatch:
      return 409;
    case Errc::CorruptModel:
    case Errc::UnknownSchemaVersion:
    case Errc::SchemaMismatch:
      return 422;
    case Errc::StorageFull:
      return 507;
    case Errc::IOError:
      return 500;
    default:
      return 400;
  }
}

inline std::vector<FingerprintSample> samples_from(const json& body) {
  std::vector<FingerprintSample> out;
  for (const auto& s : body.at("samples")) out.push_back(sample_from_json(s));
  return out;
}

inline json samples_to(const std::vector<FingerprintSample>& samples) {
  json arr = json::array();
  for (const auto& s : samples) arr.push_back(sample_to_json(s));
  return arr;
}

class Service {
 public:
  Service(std::shared_ptr<registry::Store> store, fs::path report_dir = {})
      : store_(std::move(store)), report_dir_(std::move(report_dir)), audit_(store_->root() / "audit.jsonl") {
    install_routes();
  }

  httplib::Server& server() { return server_; }

  /// Binds an ephemeral port when `port` is 0; returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(bound > 0, Errc::IOError, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  void listen_after_bind() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }

 private:
  template <class Handler>
  void guarded(const httplib::Request& req, httplib::Response& res, Handler&& h) {
    res.set_header(kProtocolHeader, kProtocolVersion);
    if (req.has_header(kProtocolHeader) && req.get_header_value(kProtocolHeader) != kProtocolVersion) {
      res.status = 400;
      res.set_content(json{{"error", "InvalidArgument"}, {"message", "unsupported protocol version"}}.dump(),
                      "application/json");
      return;
    }
    try {
      h();
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(json{{"error", to_string(e.code())}, {"message", e.what()}}.dump(), "application/json");
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", "InvalidArgument"}, {"message", e.what()}}.dump(), "application/json");
    }
  }

  void install_routes() {
    server_.Post("/v1/ingest", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        const auto body = json::parse(req.body);
        registry::IngestBatch batch;
        batch.device_id = body.at("device_id").get<std::string>();
        batch.schema_version = body.value("schema_version", 1);
        batch.samples = samples_from(body);
        batch.received_at = authd::unix_now();
        batch.source = req.remote_addr;
        res.set_content(json(store_->ingest(batch)).dump(), "application/json");
      });
    });

    server_.Post("/v1/authenticate", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        const auto body = json::parse(req.body);
        const auto verdict = store_->authenticate(body.at("device_id").get<std::string>(), samples_from(body), &audit_);
        res.set_content(json(verdict).dump(), "application/json");
      });
    });

    server_.Put(R"(/v1/models/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        const auto body = json::parse(req.body);
        registry::RegistryEntry entry;
        entry.device_id = req.matches[1];
        entry.model_hash = body.value("sha256", std::string{});
        entry.policy = body.at("policy").get<authd::AuthPolicy>();
        entry.policy.device_id = entry.device_id;
        entry.window_length = body.value("window", entry.window_length);
        entry.stride = body.value("stride", entry.stride);
        entry.include_temperature = body.value("include_temperature", false);
        entry.schema_version = body.value("schema_version", 1);
        const auto bytes = registry::base64_decode(body.at("model").get<std::string>());
        const auto map = body.at("map").get<pipeline::QuantileMap>();
        res.set_content(json(store_->register_model(entry, bytes, map)).dump(), "application/json");
      });
    });

    server_.Get(R"(/v1/models/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        const auto bytes = store_->model_bytes(req.matches[1], req.get_param_value("hash"));
        res.set_header(kHashHeader, registry::sha256_hex(bytes));
        res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
      });
    });

    server_.Get("/v1/report", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        const auto path = report_dir_ / "report.json";
        require(!report_dir_.empty() && fs::exists(path), Errc::MissingModel, "no report available");
        std::ifstream in(path);
        res.set_content(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()),
                        "application/json");
      });
    });
  }

  std::shared_ptr<registry::Store> store_;
  fs::path report_dir_;
  authd::AuditLog audit_;
  httplib::Server server_;
};

/// Builds the PUT /v1/models body from local artifacts.
inline json registration_body(const std::string& model_bytes, const pipeline::QuantileMap& map,
                              const authd::AuthPolicy& policy, std::size_t window, std::size_t stride = 0) {
  return json{{"model", registry::base64_encode(model_bytes)},
              {"sha256", registry::sha256_hex(model_bytes)},
              {"map", map},
              {"policy", policy},
              {"window", window},
              {"stride", stride}};
}

}  // namespace fingerforge::service

#endif  // FINGERFORGE_SERVICE_HPP
