#ifndef FINGERFORGE_SAMPLE_HPP
#define FINGERFORGE_SAMPLE_HPP

// Fingerprint samples, feature schemas and the raw dataset formats
// (JSON Lines and columnar CSV) shared by the bench agent and the simulator.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/error.hpp"

namespace fingerforge {

using json = nlohmann::json;

enum class ProbeKind {
  cpu_sleep,
  string_hash,
  pseudo_random,
  random_fill,
  fibonacci,
  matrix_mul,
  matrix_sum,
  strided_copy,
  list_creation,
  mem_fill,
  file_read,
  storage_read,
  storage_write,
};

NLOHMANN_JSON_SERIALIZE_ENUM(ProbeKind, {
                                            {ProbeKind::cpu_sleep, "cpu_sleep"},
                                            {ProbeKind::string_hash, "string_hash"},
                                            {ProbeKind::pseudo_random, "pseudo_random"},
                                            {ProbeKind::random_fill, "random_fill"},
                                            {ProbeKind::fibonacci, "fibonacci"},
                                            {ProbeKind::matrix_mul, "matrix_mul"},
                                            {ProbeKind::matrix_sum, "matrix_sum"},
                                            {ProbeKind::strided_copy, "strided_copy"},
                                            {ProbeKind::list_creation, "list_creation"},
                                            {ProbeKind::mem_fill, "mem_fill"},
                                            {ProbeKind::file_read, "file_read"},
                                            {ProbeKind::storage_read, "storage_read"},
                                            {ProbeKind::storage_write, "storage_write"},
                                        })

inline std::optional<ProbeKind> parse_probe_kind(const std::string& name) {
  const json j = name;
  const auto kind = j.get<ProbeKind>();
  // The enum macro maps unknown strings to the first entry.
  if (kind == ProbeKind::cpu_sleep && name != "cpu_sleep") return std::nullopt;
  return kind;
}

inline std::string probe_kind_name(ProbeKind kind) { return json(kind).get<std::string>(); }

/// Payload sizes above this are rejected unless the caller raises the cap.
inline constexpr double kDefaultMaxPayloadBytes = 100.0 * 1024 * 1024;

struct ProbeSpec {
  ProbeKind kind = ProbeKind::cpu_sleep;
  std::map<std::string, double> params;

  double param(const std::string& name, double fallback) const {
    auto it = params.find(name);
    return it == params.end() ? fallback : it->second;
  }

  /// Checks duration > 0, repetitions >= 1 and payload sizes within the cap.
  /// A zero sleep duration is accepted as the degenerate zero-extent workload.
  void validate(double max_payload_bytes = kDefaultMaxPayloadBytes) const {
    for (const auto& [name, value] : params) {
      require(std::isfinite(value), Errc::InvalidArgument, "param " + name + " is not finite");
      if (name == "seconds")
        require(value >= 0, Errc::InvalidArgument, "sleep duration must be >= 0");
      else if (name == "repetitions")
        require(value >= 1, Errc::InvalidArgument, "repetitions must be >= 1");
      else if (name == "bytes")
        require(value > 0 && value <= max_payload_bytes, Errc::InvalidArgument,
                "payload size out of range");
      else if (name == "elements" || name == "size")
        require(value >= 1, Errc::InvalidArgument, name + " must be >= 1");
    }
  }
};

inline void to_json(json& j, const ProbeSpec& p) { j = json{{"kind", p.kind}, {"params", p.params}}; }
inline void from_json(const json& j, ProbeSpec& p) {
  const auto name = j.at("kind").get<std::string>();
  auto kind = parse_probe_kind(name);
  require(kind.has_value(), Errc::InvalidArgument, "unknown probe kind " + name);
  p.kind = *kind;
  p.params = j.value("params", std::map<std::string, double>{});
}

struct FeatureSpec {
  std::string name;
  ProbeSpec probe;
  std::string unit;  // "ticks" or "ns"
};

struct FeatureSchema {
  int schema_version = 1;
  std::vector<FeatureSpec> features;

  std::size_t size() const { return features.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(features.size());
    for (const auto& f : features) out.push_back(f.name);
    return out;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& f : features) {
      require(seen.insert(f.name).second, Errc::InvalidArgument, "duplicate feature " + f.name);
      f.probe.validate();
    }
  }
};

inline void to_json(json& j, const FeatureSchema& s) {
  j = json{{"schema_version", s.schema_version}, {"features", json::array()}};
  for (const auto& f : s.features)
    j["features"].push_back(json{{"name", f.name}, {"probe", f.probe}, {"unit", f.unit}});
}

inline void from_json(const json& j, FeatureSchema& s) {
  s.schema_version = j.value("schema_version", 1);
  s.features.clear();
  for (const auto& f : j.at("features"))
    s.features.push_back(FeatureSpec{f.at("name").get<std::string>(), f.at("probe").get<ProbeSpec>(),
                                     f.value("unit", std::string("ns"))});
  s.validate();
}

/// Scales the default schema's workloads; 1.0 is the full-size suite.
struct SchemaScale {
  double sleep = 1.0;
  double payload = 1.0;
};

/// 9 CPU probes, 3 compute kernels, 3 memory probes and 100 + 100 storage
/// measurements: 215 features.
inline FeatureSchema default_schema(SchemaScale scale = {}) {
  FeatureSchema s;
  auto add = [&](std::string name, ProbeKind kind, std::map<std::string, double> params,
                 std::string unit) {
    s.features.push_back(FeatureSpec{std::move(name), ProbeSpec{kind, std::move(params)}, std::move(unit)});
  };
  for (double secs : {1.0, 2.0, 5.0, 10.0, 120.0}) {
    std::ostringstream name;
    name << "cpu_sleep_" << secs << "s";
    add(name.str(), ProbeKind::cpu_sleep, {{"seconds", secs * scale.sleep}}, "ticks");
  }
  const double mb = 1024.0 * 1024.0;
  add("cpu_string_hash", ProbeKind::string_hash, {{"repetitions", 1000}}, "ticks");
  add("cpu_pseudo_random", ProbeKind::pseudo_random, {{"repetitions", 1}}, "ticks");
  add("cpu_urandom", ProbeKind::random_fill, {{"bytes", std::max(1.0, 100 * mb * scale.payload)}}, "ticks");
  add("cpu_fibonacci", ProbeKind::fibonacci, {{"n", 20}}, "ticks");
  add("kernel_matrix_mul", ProbeKind::matrix_mul, {{"size", 128}}, "ns");
  add("kernel_matrix_sum", ProbeKind::matrix_sum, {{"size", 512}}, "ns");
  add("kernel_strided_copy", ProbeKind::strided_copy, {{"size", 512}}, "ns");
  add("mem_list_creation", ProbeKind::list_creation, {{"elements", 1000}}, "ns");
  add("mem_fill", ProbeKind::mem_fill, {{"bytes", std::max(1.0, 100 * mb * scale.payload)}}, "ns");
  add("mem_csv_read", ProbeKind::file_read, {{"bytes", std::max(1.0, 500 * 1024.0 * scale.payload)}}, "ns");
  for (int i = 0; i < 100; ++i)
    add("storage_read_" + std::to_string(i), ProbeKind::storage_read,
        {{"bytes", std::max(1.0, 100 * 1024.0 * scale.payload)}}, "ns");
  for (int i = 0; i < 100; ++i)
    add("storage_write_" + std::to_string(i), ProbeKind::storage_write,
        {{"bytes", std::max(1.0, 100 * 1024.0 * scale.payload)}}, "ns");
  return s;
}

/// Missing features are NaN in memory and null on disk.
struct FingerprintSample {
  std::string device_id;
  double timestamp = 0.0;
  std::optional<double> temperature;
  std::vector<double> features;

  bool complete() const {
    for (double v : features)
      if (!std::isfinite(v)) return false;
    return true;
  }
  bool operator==(const FingerprintSample&) const = default;
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline json sample_to_json(const FingerprintSample& s) {
  json features = json::array();
  for (double v : s.features) features.push_back(std::isfinite(v) ? json(v) : json(nullptr));
  return json{{"device_id", s.device_id},
              {"timestamp", s.timestamp},
              {"temperature", s.temperature ? json(*s.temperature) : json(nullptr)},
              {"features", std::move(features)}};
}

inline FingerprintSample sample_from_json(const json& j) {
  FingerprintSample s;
  s.device_id = j.at("device_id").get<std::string>();
  s.timestamp = j.at("timestamp").get<double>();
  if (j.contains("temperature") && !j["temperature"].is_null())
    s.temperature = j["temperature"].get<double>();
  const auto& features = j.at("features");
  require(features.is_array(), Errc::SchemaMismatch, "features must be an array");
  s.features.reserve(features.size());
  for (const auto& v : features) {
    if (v.is_null())
      s.features.push_back(kMissing);
    else if (v.is_number())
      s.features.push_back(v.get<double>());
    else
      throw Error(Errc::SchemaMismatch, "feature value is not a number");
  }
  return s;
}

inline void write_jsonl(std::ostream& out, const std::vector<FingerprintSample>& samples) {
  for (const auto& s : samples) out << sample_to_json(s).dump() << '\n';
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<FingerprintSample>& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), Errc::IOError, "cannot write " + path.string());
  write_jsonl(out, samples);
}

inline std::vector<FingerprintSample> read_jsonl(std::istream& in) {
  std::vector<FingerprintSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(json::parse(line)));
  }
  return out;
}

inline std::vector<FingerprintSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::IOError, "cannot read " + path.string());
  return read_jsonl(in);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Columnar export: header row of feature names, empty cells for missing values.
inline void write_csv(std::ostream& out, const std::vector<std::string>& feature_names,
                      const std::vector<FingerprintSample>& samples) {
  out << "device_id,timestamp,temperature";
  for (const auto& n : feature_names) out << ',' << n;
  out << '\n';
  for (const auto& s : samples) {
    require(s.features.size() == feature_names.size(), Errc::SchemaMismatch, "feature count mismatch");
    out << s.device_id << ',' << format_double(s.timestamp) << ',';
    if (s.temperature) out << format_double(*s.temperature);
    for (double v : s.features) {
      out << ',';
      if (std::isfinite(v)) out << format_double(v);
    }
    out << '\n';
  }
}

/// Raw-file validation used by ingestion; returns an empty string when valid.
inline std::string validate_sample(const FingerprintSample& s, std::size_t feature_count) {
  if (s.device_id.empty()) return "empty device_id";
  if (s.features.size() != feature_count)
    return "expected " + std::to_string(feature_count) + " features, got " + std::to_string(s.features.size());
  if (!std::isfinite(s.timestamp)) return "non-finite timestamp";
  for (double v : s.features)
    if (std::isfinite(v) && v < 0) return "negative feature value";
  return {};
}

}  // namespace fingerforge

#endif  // FINGERFORGE_SAMPLE_HPP
