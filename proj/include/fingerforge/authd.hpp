#ifndef FINGERFORGE_AUTHD_HPP
#define FINGERFORGE_AUTHD_HPP

// Threshold calibration, window classification, authentication verdicts and
// the one-vs-all evaluation protocol.
//
// Terminology: the "FPR" reported here is a false-ACCEPTANCE rate, i.e. the
// fraction of another device's windows that device i's model calls normal.
// This is the reverse of the usual detector convention where a positive is
// an anomaly.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/error.hpp"
#include "fingerforge/parallel.hpp"
#include "fingerforge/pipeline.hpp"
#include "fingerforge/transformer.hpp"

namespace fingerforge::authd {

using json = nlohmann::json;
using nn::Matrix;

inline constexpr double kDefaultAlpha = 0.10;
inline constexpr double kDefaultMargin = 0.10;
inline constexpr std::size_t kDefaultBatchWindows = 20;

struct ThresholdCalibration {
  double tau = 0.0;
  double alpha = kDefaultAlpha;
  std::size_t count = 0;
  std::size_t exceeding = 0;
  double min = 0, median = 0, p90 = 0, max = 0;
};

inline void to_json(json& j, const ThresholdCalibration& c) {
  j = json{{"tau", c.tau},   {"alpha", c.alpha},   {"count", c.count}, {"exceeding", c.exceeding},
           {"min", c.min},   {"median", c.median}, {"p90", c.p90},     {"max", c.max}};
}

/// tau is the nearest-rank (1 - alpha) quantile of the training errors and a
/// window is anomalous iff its error is strictly greater than tau. When a tie
/// at that rank would leave the anomalous count more than one window away
/// from alpha*N, tau steps down to the next smaller distinct error if that
/// lands strictly closer.
inline ThresholdCalibration calibrate_threshold(std::vector<double> errors, double alpha = kDefaultAlpha) {
  require(errors.size() >= 10, Errc::TooFewWindows, "need >= 10 training windows, got " + std::to_string(errors.size()));
  require(alpha >= 0 && alpha < 1, Errc::InvalidArgument, "alpha must lie in [0,1)");
  for (double e : errors) require(std::isfinite(e), Errc::InvalidArgument, "non-finite training error");
  std::sort(errors.begin(), errors.end());
  const auto N = errors.size();
  const double target = alpha * static_cast<double>(N);
  auto exceeding = [&](double tau) {
    return static_cast<std::size_t>(errors.end() - std::upper_bound(errors.begin(), errors.end(), tau));
  };

  auto rank = static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(N) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, N);
  double tau = errors[rank - 1];
  auto over = exceeding(tau);
  if (std::abs(static_cast<double>(over) - target) > 1.0) {
    const auto first_tied = std::lower_bound(errors.begin(), errors.end(), tau);
    if (first_tied != errors.begin()) {
      const double lower = *(first_tied - 1);
      const auto lower_over = exceeding(lower);
      if (std::abs(static_cast<double>(lower_over) - target) < std::abs(static_cast<double>(over) - target)) {
        tau = lower;
        over = lower_over;
      }
    }
  }

  ThresholdCalibration c;
  c.tau = tau;
  c.alpha = alpha;
  c.count = N;
  c.exceeding = over;
  c.min = errors.front();
  c.max = errors.back();
  c.median = pipeline::sorted_quantile(errors, 0.5);
  c.p90 = pipeline::sorted_quantile(errors, 0.9);
  return c;
}

inline std::vector<double> reconstruction_errors(const ae::AutoencoderModel& model, const std::vector<Matrix>& windows) {
  std::vector<double> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(model.reconstruction_error(w));
  return out;
}

inline ThresholdCalibration calibrate_threshold(const ae::AutoencoderModel& model, const std::vector<Matrix>& train,
                                                double alpha = kDefaultAlpha) {
  require(train.size() >= 10, Errc::TooFewWindows, "need >= 10 training windows, got " + std::to_string(train.size()));
  return calibrate_threshold(reconstruction_errors(model, train), alpha);
}

enum class WindowClass { normal, anomaly };

inline WindowClass classify_error(double error, double tau) {
  return error > tau ? WindowClass::anomaly : WindowClass::normal;
}

inline WindowClass classify_window(const ae::AutoencoderModel& model, double tau, const Matrix& window) {
  return classify_error(model.reconstruction_error(window), tau);
}

inline std::vector<WindowClass> classify_batch(const ae::AutoencoderModel& model, double tau,
                                               const std::vector<Matrix>& windows) {
  std::vector<WindowClass> out;
  out.reserve(windows.size());
  for (double e : reconstruction_errors(model, windows)) out.push_back(classify_error(e, tau));
  return out;
}

inline double acceptance_rate_from_errors(const std::vector<double>& errors, double tau) {
  require(!errors.empty(), Errc::EmptySet, "no windows to evaluate");
  const auto normal = std::count_if(errors.begin(), errors.end(), [&](double e) { return e <= tau; });
  return static_cast<double>(normal) / static_cast<double>(errors.size());
}

/// Fraction of windows classified normal.
inline double acceptance_rate(const ae::AutoencoderModel& model, double tau, const std::vector<Matrix>& windows) {
  require(!windows.empty(), Errc::EmptySet, "no windows to evaluate");
  return acceptance_rate_from_errors(reconstruction_errors(model, windows), tau);
}

struct AuthPolicy {
  std::string device_id;
  double theta = 0.0;
  double validation_tpr = 0.0;
  double margin = kDefaultMargin;
};

inline void to_json(json& j, const AuthPolicy& p) {
  j = json{{"device_id", p.device_id}, {"theta", p.theta}, {"validation_tpr", p.validation_tpr}, {"margin", p.margin}};
}
inline void from_json(const json& j, AuthPolicy& p) {
  p.device_id = j.at("device_id").get<std::string>();
  p.theta = j.at("theta").get<double>();
  p.validation_tpr = j.value("validation_tpr", 0.0);
  p.margin = j.value("margin", kDefaultMargin);
}

/// theta = max(0, TPR - margin).
inline AuthPolicy derive_policy(std::string device_id, double validation_tpr, double margin = kDefaultMargin) {
  require(validation_tpr >= 0 && validation_tpr <= 1, Errc::InvalidArgument, "TPR must lie in [0,1]");
  return AuthPolicy{std::move(device_id), std::clamp(validation_tpr - margin, 0.0, 1.0), validation_tpr, margin};
}

enum class Decision { authenticated, rejected };

inline std::string to_string(Decision d) { return d == Decision::authenticated ? "authenticated" : "rejected"; }

struct AuthVerdict {
  std::string device_id;
  std::size_t windows = 0;
  double acceptance_rate = 0.0;
  double theta = 0.0;
  Decision decision = Decision::rejected;
  double timestamp = 0.0;

  static Decision decide(double rate, double theta) { return rate >= theta ? Decision::authenticated : Decision::rejected; }
};

inline void to_json(json& j, const AuthVerdict& v) {
  j = json{{"device_id", v.device_id},
           {"windows", v.windows},
           {"acceptance_rate", v.acceptance_rate},
           {"theta", v.theta},
           {"decision", to_string(v.decision)},
           {"timestamp", v.timestamp}};
}
inline void from_json(const json& j, AuthVerdict& v) {
  v.device_id = j.at("device_id").get<std::string>();
  v.windows = j.at("windows").get<std::size_t>();
  v.acceptance_rate = j.at("acceptance_rate").get<double>();
  v.theta = j.at("theta").get<double>();
  v.decision = j.at("decision").get<std::string>() == "authenticated" ? Decision::authenticated : Decision::rejected;
  v.timestamp = j.value("timestamp", 0.0);
}

/// Append-only JSON Lines verdict log; appends are serialized.
class AuditLog {
 public:
  explicit AuditLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  void append(const AuthVerdict& v) {
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::app);
    require(out.good(), Errc::IOError, "cannot append to " + path_.string());
    out << json(v).dump() << '\n';
  }

  std::vector<AuthVerdict> read() const {
    std::lock_guard lock(mutex_);
    std::vector<AuthVerdict> out;
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(json::parse(line).get<AuthVerdict>());
    return out;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

inline double unix_now() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

/// Batch windows must already be normalized with the claimed device's map.
inline AuthVerdict authenticate(const AuthPolicy& policy, const ae::AutoencoderModel* model, double tau,
                                const std::vector<Matrix>& batch, AuditLog* log = nullptr) {
  require(model != nullptr, Errc::MissingModel, "no trained model for " + policy.device_id);
  require(!batch.empty(), Errc::EmptyBatch, "empty authentication batch");
  AuthVerdict v;
  v.device_id = policy.device_id;
  v.windows = batch.size();
  v.acceptance_rate = acceptance_rate(*model, tau, batch);
  v.theta = policy.theta;
  v.decision = AuthVerdict::decide(v.acceptance_rate, v.theta);
  v.timestamp = unix_now();
  if (log) log->append(v);
  return v;
}

struct ResourceEntry {
  std::string device_id;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
  std::size_t model_bytes = 0;
};

inline void to_json(json& j, const ResourceEntry& r) {
  j = json{{"device_id", r.device_id},
           {"train_seconds", r.train_seconds},
           {"eval_seconds", r.eval_seconds},
           {"model_bytes", r.model_bytes}};
}

/// Wall-clock helper used for training and evaluation timings.
template <class F>
double timed_seconds(F&& f) {
  const auto start = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Builds one resource-log entry; the size is the on-disk byte count.
inline ResourceEntry measure_resources(std::string device_id, double train_seconds, double eval_seconds,
                                       const std::filesystem::path& model_file) {
  return ResourceEntry{std::move(device_id), train_seconds, eval_seconds,
                       static_cast<std::size_t>(std::filesystem::file_size(model_file))};
}

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
};

inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  if (v.empty()) return a;
  a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.sd = std::sqrt(ss / static_cast<double>(v.size()));
  return a;
}

struct EvalReport {
  std::vector<std::string> devices;
  std::vector<std::vector<double>> rates;  // rates[i][j]: model i on device j's test windows
  std::vector<double> tpr, max_fpr;
  Aggregate tpr_stats, max_fpr_stats;
  std::size_t devices_authenticated = 0;
  std::vector<ResourceEntry> resources;

  /// Fills per-device and aggregate fields from the matrix.
  void summarize() {
    const auto n = rates.size();
    tpr.assign(n, 0.0);
    max_fpr.assign(n, 0.0);
    devices_authenticated = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tpr[i] = rates[i][i];
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) max_fpr[i] = std::max(max_fpr[i], rates[i][j]);
      if (tpr[i] > max_fpr[i]) ++devices_authenticated;
    }
    tpr_stats = aggregate(tpr);
    max_fpr_stats = aggregate(max_fpr);
  }
};

inline void to_json(json& j, const Aggregate& a) { j = json{{"mean", a.mean}, {"sd", a.sd}}; }

inline void to_json(json& j, const EvalReport& r) {
  json per_device = json::array();
  for (std::size_t i = 0; i < r.devices.size(); ++i)
    per_device.push_back(json{{"device_id", r.devices[i]},
                              {"tpr", r.tpr[i]},
                              {"max_fpr", r.max_fpr[i]},
                              {"authenticated", r.tpr[i] > r.max_fpr[i]}});
  j = json{{"devices", r.devices},
           {"matrix", r.rates},
           {"per_device", per_device},
           {"tpr", r.tpr_stats},
           {"max_fpr", r.max_fpr_stats},
           {"devices_authenticated", r.devices_authenticated},
           {"resources", r.resources}};
}

/// A trained device: its model (with calibrated tau) and normalization map.
struct DeviceArtifacts {
  std::string device_id;
  std::shared_ptr<const ae::AutoencoderModel> model;
  pipeline::QuantileMap map;
  double tau = 0.0;
};

/// Every device's model scores its own test set and every other device's,
/// each renormalized with the evaluating device's map before windowing.
/// `test_sets[j]` holds device j's raw (cleaned) test samples.
inline EvalReport one_vs_all(const std::vector<DeviceArtifacts>& devices,
                             const std::vector<std::vector<FingerprintSample>>& test_sets,
                             const pipeline::PipelineConfig& config, std::size_t workers = 1) {
  require(devices.size() >= 2, Errc::NeedTwoDevices, "one-vs-all needs at least two devices");
  require(test_sets.size() == devices.size(), Errc::InvalidArgument, "one test set per device required");
  const auto n = devices.size();
  EvalReport report;
  for (const auto& d : devices) report.devices.push_back(d.device_id);
  report.rates.assign(n, std::vector<double>(n, 0.0));
  std::vector<double> eval_seconds(n, 0.0);

  parallel_for(n, workers, [&](std::size_t i) {
    const auto& di = devices[i];
    require(di.model != nullptr, Errc::MissingModel, "no model for " + di.device_id);
    require(di.map.device_id == di.device_id, Errc::InvalidArgument,
            "map tagged " + di.map.device_id + " wired to model of " + di.device_id);
    for (std::size_t j = 0; j < n; ++j) {
      try {
        const double secs = timed_seconds([&] {
          const auto windows = pipeline::normalize_and_window(di.map, test_sets[j], config, pipeline::SplitTag::test,
                                                              devices[j].device_id);
          report.rates[i][j] = acceptance_rate(*di.model, di.tau, windows.windows);
        });
        if (i == j) eval_seconds[i] = secs;
      } catch (const Error& e) {
        throw Error(e.code(), "cell (" + di.device_id + ", " + devices[j].device_id + "): " + e.what());
      }
    }
  });
  report.summarize();
  for (std::size_t i = 0; i < n; ++i) report.resources.push_back(ResourceEntry{devices[i].device_id, 0.0, eval_seconds[i], 0});
  return report;
}

inline void write_matrix_csv(const std::filesystem::path& path, const EvalReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), Errc::IOError, "cannot write " + path.string());
  out << "model";
  for (const auto& d : r.devices) out << ',' << d;
  out << '\n';
  for (std::size_t i = 0; i < r.devices.size(); ++i) {
    out << r.devices[i];
    for (double v : r.rates[i]) out << ',' << format_double(v);
    out << '\n';
  }
}

/// Long format (device, role, value) with roles TPR and maxFPR.
inline void write_long_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  require(out.good(), Errc::IOError, "cannot write " + path.string());
  out << "device,role,value\n";
  for (std::size_t i = 0; i < r.devices.size(); ++i) {
    out << r.devices[i] << ",TPR," << format_double(r.tpr[i]) << '\n';
    out << r.devices[i] << ",maxFPR," << format_double(r.max_fpr[i]) << '\n';
  }
}

/// matrix.csv + report.json + tpr_fpr_long.csv under `dir`.
inline void write_report(const std::filesystem::path& dir, const EvalReport& r, const json& extra = json::object()) {
  std::filesystem::create_directories(dir);
  write_matrix_csv(dir / "matrix.csv", r);
  write_long_csv(dir / "tpr_fpr_long.csv", r);
  json j = r;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream(dir / "report.json") << j.dump(2) << '\n';
}

}  // namespace fingerforge::authd

#endif  // FINGERFORGE_AUTHD_HPP
