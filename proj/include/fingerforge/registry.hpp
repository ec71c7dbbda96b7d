#ifndef FINGERFORGE_REGISTRY_HPP
#define FINGERFORGE_REGISTRY_HPP

// Server-side persistence: per-device sample logs, a content-addressed model
// registry, the schema registry and the decision event stream.
//
// Layout under the root:
//   schemas/<version>.json
//   devices/<id>/samples.jsonl        append-only
//   devices/<id>/blobs/<sha256>.ffae  model containers, never deleted
//   devices/<id>/maps/<sha256>.json
//   devices/<id>/active.json          current entry
//   devices/<id>/history.jsonl        superseded entries
//   events.ndjson

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/authd.hpp"
#include "fingerforge/pipeline.hpp"
#include "fingerforge/sample.hpp"
#include "fingerforge/transformer.hpp"

namespace fingerforge::registry {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, Errc::IOError,
          "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(const std::string& text) {
  require(text.size() % 4 == 0, Errc::InvalidArgument, "base64 length not a multiple of 4");
  std::string out(3 * text.size() / 4 + 1, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  require(n >= 0, Errc::InvalidArgument, "invalid base64");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

struct RegistryEntry {
  std::string device_id;
  std::string model_hash;  // sha256 of the container bytes
  std::string map_hash;    // sha256 of the map's JSON text
  authd::AuthPolicy policy;
  std::size_t window_length = 20;
  std::size_t stride = 0;
  bool include_temperature = false;
  int schema_version = 1;
  double created_at = 0.0;

  pipeline::PipelineConfig pipeline_config() const {
    pipeline::PipelineConfig c;
    c.window_length = window_length;
    c.stride = stride;
    c.include_temperature = include_temperature;
    return c;
  }
};

inline void to_json(json& j, const RegistryEntry& e) {
  j = json{{"device_id", e.device_id},
           {"model_hash", e.model_hash},
           {"map_hash", e.map_hash},
           {"policy", e.policy},
           {"window", e.window_length},
           {"stride", e.stride},
           {"include_temperature", e.include_temperature},
           {"schema_version", e.schema_version},
           {"created_at", e.created_at}};
}

inline void from_json(const json& j, RegistryEntry& e) {
  e.device_id = j.at("device_id").get<std::string>();
  e.model_hash = j.value("model_hash", std::string{});
  e.map_hash = j.value("map_hash", std::string{});
  e.policy = j.at("policy").get<authd::AuthPolicy>();
  e.window_length = j.value("window", std::size_t{20});
  e.stride = j.value("stride", std::size_t{0});
  e.include_temperature = j.value("include_temperature", false);
  e.schema_version = j.value("schema_version", 1);
  e.created_at = j.value("created_at", 0.0);
}

struct IngestBatch {
  std::string device_id;
  int schema_version = 1;
  std::vector<FingerprintSample> samples;
  double received_at = 0.0;
  std::string source;
};

struct IngestAck {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::pair<std::size_t, std::string>> reasons;  // (sample index, reason)
};

inline void to_json(json& j, const IngestAck& a) {
  json reasons = json::array();
  for (const auto& [i, r] : a.reasons) reasons.push_back(json{{"index", i}, {"reason", r}});
  j = json{{"accepted", a.accepted}, {"rejected", a.rejected}, {"reasons", reasons}};
}

/// Newline-delimited decision/registration events.
class EventLog {
 public:
  explicit EventLog(fs::path path) : path_(std::move(path)) {}

  void emit(const std::string& type, const std::string& device_id, json payload = json::object()) {
    payload["type"] = type;
    payload["device_id"] = device_id;
    payload["timestamp"] = authd::unix_now();
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::app);
    require(out.good(), Errc::IOError, "cannot append to " + path_.string());
    out << payload.dump() << '\n';
  }

  std::vector<json> read() const {
    std::lock_guard lock(mutex_);
    std::vector<json> out;
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(json::parse(line));
    return out;
  }

 private:
  fs::path path_;
  mutable std::mutex mutex_;
};

/// Write to a sibling temporary, then rename over the target.
inline void atomic_write(const fs::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::IOError, "cannot write " + tmp.string());
    out << contents;
    out.flush();
    require(out.good(), Errc::IOError, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

/// A loaded, verified active entry.
struct ActiveModel {
  RegistryEntry entry;
  std::shared_ptr<const ae::AutoencoderModel> model;
  pipeline::QuantileMap map;
  double tau = 0.0;
};

struct StoreOptions {
  std::uintmax_t min_free_bytes = 1 << 20;  // ingest refuses below this
};

class Store {
 public:
  explicit Store(fs::path root, StoreOptions options = {})
      : root_(std::move(root)), options_(options), events_(root_ / "events.ndjson") {
    fs::create_directories(root_ / "schemas");
    fs::create_directories(root_ / "devices");
  }

  const fs::path& root() const { return root_; }
  EventLog& events() { return events_; }

  // ---- schemas
  void register_schema(const FeatureSchema& schema) {
    schema.validate();
    atomic_write(root_ / "schemas" / (std::to_string(schema.schema_version) + ".json"), json(schema).dump());
  }

  FeatureSchema schema(int version) const {
    const auto path = root_ / "schemas" / (std::to_string(version) + ".json");
    require(fs::exists(path), Errc::UnknownSchemaVersion, "schema version " + std::to_string(version) + " not registered");
    return json::parse(std::ifstream(path)).get<FeatureSchema>();
  }

  // ---- samples
  IngestAck ingest(const IngestBatch& batch) {
    require(!batch.samples.empty(), Errc::EmptyBatch, "empty ingest batch");
    const auto sch = schema(batch.schema_version);
    const auto space = fs::space(root_);
    require(space.available >= options_.min_free_bytes, Errc::StorageFull,
            "only " + std::to_string(space.available) + " bytes free");

    IngestAck ack;
    std::vector<FingerprintSample> valid;
    for (std::size_t i = 0; i < batch.samples.size(); ++i) {
      const auto& s = batch.samples[i];
      std::string reason = validate_sample(s, sch.size());
      if (reason.empty() && s.device_id != batch.device_id)
        reason = "sample device_id '" + s.device_id + "' differs from batch device_id";
      if (reason.empty()) {
        valid.push_back(s);
      } else {
        ack.reasons.emplace_back(i, reason);
      }
    }
    ack.accepted = valid.size();
    ack.rejected = ack.reasons.size();
    if (!valid.empty()) {
      const auto dir = device_dir(batch.device_id);
      std::lock_guard lock(device_mutex(batch.device_id));
      std::ofstream out(dir / "samples.jsonl", std::ios::app);
      require(out.good(), Errc::IOError, "cannot append samples for " + batch.device_id);
      write_jsonl(out, valid);
      out.flush();
      require(out.good(), Errc::StorageFull, "sample append failed for " + batch.device_id);
    }
    return ack;
  }

  std::vector<FingerprintSample> samples(const std::string& device_id) const {
    const auto path = root_ / "devices" / device_id / "samples.jsonl";
    if (!fs::exists(path)) return {};
    return read_jsonl(path);
  }

  // ---- models
  /// Makes the container the active model for entry.device_id. When
  /// entry.model_hash is set it must match the bytes.
  RegistryEntry register_model(RegistryEntry entry, const std::string& model_bytes,
                               const pipeline::QuantileMap& map) {
    const auto hash = sha256_hex(model_bytes);
    require(entry.model_hash.empty() || entry.model_hash == hash, Errc::HashMismatch,
            "declared hash " + entry.model_hash + " but content hashes to " + hash);
    const auto model = ae::deserialize(model_bytes);  // CorruptModel on bad bytes
    require(model.threshold().has_value(), Errc::CorruptModel, "model container carries no threshold");
    require(map.landmarks.size() == static_cast<std::size_t>(model.config().features), Errc::SchemaMismatch,
            "map and model disagree on feature count");
    entry.model_hash = hash;
    const auto map_text = json(map).dump();
    entry.map_hash = sha256_hex(map_text);
    if (entry.created_at == 0.0) entry.created_at = authd::unix_now();

    const auto dir = device_dir(entry.device_id);
    std::lock_guard lock(device_mutex(entry.device_id));
    fs::create_directories(dir / "blobs");
    fs::create_directories(dir / "maps");
    const auto blob = dir / "blobs" / (hash + ".ffae");
    if (!fs::exists(blob)) atomic_write(blob, model_bytes);
    const auto map_path = dir / "maps" / (entry.map_hash + ".json");
    if (!fs::exists(map_path)) atomic_write(map_path, map_text);

    if (fs::exists(dir / "active.json")) {
      std::ofstream hist(dir / "history.jsonl", std::ios::app);
      hist << json::parse(std::ifstream(dir / "active.json")).dump() << '\n';
    }
    atomic_write(dir / "active.json", json(entry).dump(2));
    events_.emit("registration", entry.device_id, json{{"model_hash", hash}});
    events_.emit("calibration", entry.device_id, json{{"tau", *model.threshold()}, {"theta", entry.policy.theta}});
    return entry;
  }

  std::optional<RegistryEntry> active_entry(const std::string& device_id) const {
    const auto path = root_ / "devices" / device_id / "active.json";
    if (!fs::exists(path)) return std::nullopt;
    return json::parse(std::ifstream(path)).get<RegistryEntry>();
  }

  std::vector<RegistryEntry> history(const std::string& device_id) const {
    std::vector<RegistryEntry> out;
    std::ifstream in(root_ / "devices" / device_id / "history.jsonl");
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(json::parse(line).get<RegistryEntry>());
    return out;
  }

  /// Container bytes by hash (active model when empty); verified on read.
  std::string model_bytes(const std::string& device_id, std::string hash = {}) const {
    if (hash.empty()) {
      const auto entry = active_entry(device_id);
      require(entry.has_value(), Errc::MissingModel, "no registered model for " + device_id);
      hash = entry->model_hash;
    }
    const auto path = root_ / "devices" / device_id / "blobs" / (hash + ".ffae");
    require(fs::exists(path), Errc::MissingModel, "no model " + hash + " for " + device_id);
    auto bytes = ae::read_file_bytes(path);
    require(sha256_hex(bytes) == hash, Errc::HashMismatch, "stored model " + path.string() + " fails its hash");
    return bytes;
  }

  ActiveModel load_active(const std::string& device_id) const {
    const auto entry = active_entry(device_id);
    require(entry.has_value(), Errc::MissingModel, "no registered model for " + device_id);
    ActiveModel a;
    a.entry = *entry;
    auto model = ae::deserialize(model_bytes(device_id, entry->model_hash));
    require(model.threshold().has_value(), Errc::CorruptModel, "model container carries no threshold");
    a.tau = *model.threshold();
    a.model = std::make_shared<ae::AutoencoderModel>(std::move(model));
    std::ifstream in(root_ / "devices" / device_id / "maps" / (entry->map_hash + ".json"));
    require(in.good(), Errc::MissingModel, "normalization map missing for " + device_id);
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(sha256_hex(text) == entry->map_hash, Errc::HashMismatch, "stored map fails its hash");
    a.map = json::parse(text).get<pipeline::QuantileMap>();
    return a;
  }

  // ---- authentication
  /// Normalizes with the device's own map, windows per its entry, and
  /// delegates to authd; emits allow/deny.
  authd::AuthVerdict authenticate(const std::string& device_id, const std::vector<FingerprintSample>& samples,
                                  authd::AuditLog* audit = nullptr) {
    const auto active = load_active(device_id);
    const auto config = active.entry.pipeline_config();
    require(samples.size() >= config.window_length, Errc::BatchTooShort,
            std::to_string(samples.size()) + " samples, one window needs " + std::to_string(config.window_length));
    const auto windows =
        pipeline::normalize_and_window(active.map, samples, config, pipeline::SplitTag::test, device_id);
    const auto verdict = authd::authenticate(active.entry.policy, active.model.get(), active.tau, windows.windows, audit);
    events_.emit(verdict.decision == authd::Decision::authenticated ? "allow" : "deny", device_id,
                 json{{"acceptance_rate", verdict.acceptance_rate}, {"theta", verdict.theta}, {"windows", verdict.windows}});
    return verdict;
  }

 private:
  fs::path device_dir(const std::string& device_id) const {
    require(!device_id.empty() && device_id.find('/') == std::string::npos && device_id != "." && device_id != "..",
            Errc::InvalidArgument, "invalid device id '" + device_id + "'");
    const auto dir = root_ / "devices" / device_id;
    fs::create_directories(dir);
    return dir;
  }

  std::mutex& device_mutex(const std::string& device_id) {
    std::lock_guard lock(table_mutex_);
    auto& m = mutexes_[device_id];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

  fs::path root_;
  StoreOptions options_;
  EventLog events_;
  std::mutex table_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> mutexes_;
};

}  // namespace fingerforge::registry

#endif  // FINGERFORGE_REGISTRY_HPP
