#ifndef FINGERFORGE_EXPERIMENT_HPP
#define FINGERFORGE_EXPERIMENT_HPP

// End-to-end run: data source -> per-device pipeline -> grid search ->
// policy -> one-vs-all -> authentication fixture -> report bundle.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/authd.hpp"
#include "fingerforge/pipeline.hpp"
#include "fingerforge/search.hpp"
#include "fingerforge/simulator.hpp"
#include "fingerforge/transformer.hpp"

namespace fingerforge::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct SimSource {
  std::vector<sim::DeviceModelTemplate> templates;
  std::string devices;  // "model:count,..."
  std::size_t samples_per_device = 2000;
  sim::Variation variation{0.001, 5.0};
  bool temperature_drift = true;  // AR(1) trace; false: constant 45 C
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  std::string source = "sim";  // sim | dataset
  SimSource sim;
  fs::path dataset;  // directory of per-device JSON Lines files
  pipeline::PipelineConfig pipeline;
  ae::TransformerConfig model;
  search::SearchGrid grid;
  std::size_t budget = 24;
  double alpha = authd::kDefaultAlpha;
  double margin = authd::kDefaultMargin;
  std::size_t batch_windows = authd::kDefaultBatchWindows;
  std::size_t workers = 1;
};

inline ExperimentConfig config_from_json(const json& j, const fs::path& base_dir = {}) {
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.seed = j.value("seed", c.seed);
  const auto& src = j.at("source");
  c.source = src.at("kind").get<std::string>();
  if (c.source == "sim") {
    c.sim.templates = sim::templates_from_json(src);
    c.sim.devices = src.at("devices").get<std::string>();
    c.sim.samples_per_device = src.value("samples_per_device", c.sim.samples_per_device);
    c.sim.variation.skew_sigma = src.value("skew_sigma", c.sim.variation.skew_sigma);
    c.sim.variation.bias_sigma = src.value("bias_sigma", c.sim.variation.bias_sigma);
    c.sim.temperature_drift = src.value("temperature_drift", c.sim.temperature_drift);
  } else if (c.source == "dataset") {
    c.dataset = src.at("dir").get<std::string>();
    if (c.dataset.is_relative() && !base_dir.empty()) c.dataset = base_dir / c.dataset;
  } else {
    throw Error(Errc::InvalidArgument, "unknown source kind '" + c.source + "'");
  }
  if (j.contains("pipeline")) c.pipeline = j["pipeline"].get<pipeline::PipelineConfig>();
  if (j.contains("model")) c.model = j["model"].get<ae::TransformerConfig>();
  if (j.contains("grid")) c.grid = j["grid"].get<search::SearchGrid>();
  c.budget = j.value("budget", c.budget);
  c.alpha = j.value("alpha", c.alpha);
  c.margin = j.value("margin", c.margin);
  c.batch_windows = j.value("batch_windows", c.batch_windows);
  c.workers = j.value("workers", c.workers);
  require(c.batch_windows >= 1, Errc::InvalidArgument, "batch_windows must be >= 1");
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::IOError, "cannot read " + path.string());
  return config_from_json(json::parse(in), path.parent_path());
}

/// Raw streams plus, for simulated sources, an independent fresh stream per
/// device used for the authentication fixture.
struct DeviceData {
  std::string device_id;
  std::vector<FingerprintSample> samples;
  std::vector<FingerprintSample> fresh;
};

inline std::vector<DeviceData> simulate(const ExperimentConfig& c) {
  std::map<std::string, std::shared_ptr<const sim::DeviceModelTemplate>> by_name;
  for (const auto& t : c.sim.templates) by_name[t.model_name] = std::make_shared<sim::DeviceModelTemplate>(t);
  const std::size_t fresh_n = c.batch_windows * c.pipeline.window_length;
  std::vector<DeviceData> out;
  for (const auto& [name, count] : sim::parse_device_spec(c.sim.devices)) {
    const auto it = by_name.find(name);
    require(it != by_name.end(), Errc::InvalidArgument, "device spec names unknown template '" + name + "'");
    for (auto profile : sim::gen_population(it->second, count, c.sim.variation, c.seed)) {
      const auto salt = sim::detail::fnv1a(profile.device_id);
      const auto n = c.sim.samples_per_device;
      const auto trace = c.sim.temperature_drift ? sim::ar1_trace(n + fresh_n, c.seed ^ salt) : sim::constant_trace(n + fresh_n);
      DeviceData d;
      d.device_id = profile.device_id;
      d.samples = sim::gen_samples(profile, n, trace);
      // Later samples in time, separate noise stream.
      sim::EnvironmentTrace tail{{trace.temperature.begin() + static_cast<std::ptrdiff_t>(n), trace.temperature.end()}};
      sim::SampleOptions later;
      later.start_time += later.interval * static_cast<double>(n);
      profile.seed = profile.seed ^ 0x9e3779b97f4a7c15ull;
      d.fresh = sim::gen_samples(profile, fresh_n, tail, later);
      out.push_back(std::move(d));
    }
  }
  return out;
}

/// One JSON Lines file per device, in file-name order.
inline std::vector<DeviceData> read_dataset(const fs::path& dir) {
  require(fs::is_directory(dir), Errc::IOError, "dataset directory missing: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<DeviceData> out;
  for (const auto& f : files) {
    DeviceData d;
    d.samples = read_jsonl(f);
    if (d.samples.empty()) continue;
    d.device_id = d.samples.front().device_id;
    out.push_back(std::move(d));
  }
  return out;
}

struct DeviceOutcome {
  std::string device_id;
  std::string status = "ok";  // ok | failed
  std::string error;
  pipeline::DropReport drops;
  std::size_t train_windows = 0, val_windows = 0, test_windows = 0;
  search::SearchEntry best;
  authd::AuthPolicy policy;
  authd::ThresholdCalibration calibration;
  std::size_t model_bytes = 0;
  double search_seconds = 0.0;
};

inline void to_json(json& j, const DeviceOutcome& o) {
  j = json{{"device_id", o.device_id}, {"status", o.status}};
  if (o.status != "ok") {
    j["error"] = o.error;
    return;
  }
  j["drops"] = o.drops;
  j["windows"] = json{{"train", o.train_windows}, {"val", o.val_windows}, {"test", o.test_windows}};
  j["selected"] = o.best;
  j["policy"] = o.policy;
  j["calibration"] = o.calibration;
  j["model_bytes"] = o.model_bytes;
  j["search_seconds"] = o.search_seconds;
}

struct FixtureResult {
  std::vector<authd::AuthVerdict> legitimate;  // one per device
  std::vector<std::pair<std::string, authd::AuthVerdict>> impostor;  // (true source, verdict for claimed id)
  bool all_legitimate_accepted() const {
    return std::all_of(legitimate.begin(), legitimate.end(),
                       [](const auto& v) { return v.decision == authd::Decision::authenticated; });
  }
  bool all_impostors_rejected() const {
    return std::all_of(impostor.begin(), impostor.end(),
                       [](const auto& p) { return p.second.decision == authd::Decision::rejected; });
  }
};

inline void to_json(json& j, const FixtureResult& f) {
  json imp = json::array();
  for (const auto& [src, v] : f.impostor) imp.push_back(json{{"source", src}, {"verdict", v}});
  j = json{{"legitimate", f.legitimate},
           {"impostor", imp},
           {"all_legitimate_accepted", f.all_legitimate_accepted()},
           {"all_impostors_rejected", f.all_impostors_rejected()}};
}

struct ExperimentResult {
  authd::EvalReport report;
  std::vector<DeviceOutcome> devices;
  FixtureResult fixture;
};

/// Runs every stage and writes the bundle under `out_dir`:
///   devices/<id>/{model.ffae, model.ffae.json, map.json, policy.json, search.json}
///   report/{matrix.csv, tpr_fpr_long.csv, report.json}, fixture.json, audit.jsonl
inline ExperimentResult run(const ExperimentConfig& c, const fs::path& out_dir) {
  auto data = c.source == "sim" ? simulate(c) : read_dataset(c.dataset);
  fs::create_directories(out_dir);
  const auto n = data.size();

  std::vector<DeviceOutcome> outcomes(n);
  std::vector<authd::DeviceArtifacts> artifacts(n);
  std::vector<std::vector<FingerprintSample>> tests(n), fresh(n);
  std::vector<double> train_seconds(n, 0.0);

  const auto candidates = search::enumerate(c.grid, c.model);
  // Per-device failures are recorded and the device is left out of the matrix.
  parallel_for(n, c.workers, [&](std::size_t i) {
    auto& o = outcomes[i];
    o.device_id = data[i].device_id;
    try {
      const auto prep = pipeline::prepare_device(o.device_id, data[i].samples, c.pipeline);
      o.drops = prep.drops;
      o.train_windows = prep.train.windows.size();
      o.val_windows = prep.val.windows.size();
      o.test_windows = prep.test.windows.size();

      auto device_candidates = candidates;
      const auto salt = sim::detail::fnv1a(o.device_id);
      for (auto& cand : device_candidates) {
        cand.window = static_cast<int>(c.pipeline.window_length);
        cand.features = static_cast<int>(prep.map.landmarks.size());
        cand.seed = c.model.seed ^ salt;
      }
      search::SearchOptions so;
      so.budget = c.budget;
      so.seed = c.seed ^ salt;
      so.alpha = c.alpha;
      search::SearchResult sr;
      o.search_seconds = authd::timed_seconds([&] { sr = search::grid_search(prep.train.windows, prep.val.windows, device_candidates, so); });
      o.best = sr.best;
      o.calibration = sr.calibration;
      o.policy = authd::derive_policy(o.device_id, sr.best.val_tpr, c.margin);
      train_seconds[i] = sr.best.train_seconds;

      const auto dir = out_dir / "devices" / o.device_id;
      fs::create_directories(dir);
      o.model_bytes = ae::save(*sr.model, dir / "model.ffae", json{{"calibration", sr.calibration}});
      std::ofstream(dir / "map.json") << json(prep.map).dump() << '\n';
      std::ofstream(dir / "policy.json") << json(o.policy).dump(2) << '\n';
      std::ofstream(dir / "search.json") << json(sr.log).dump(2) << '\n';

      artifacts[i] = authd::DeviceArtifacts{o.device_id, sr.model, prep.map, sr.calibration.tau};
      tests[i] = prep.raw.test;
      fresh[i] = data[i].fresh.empty() ? prep.raw.test : data[i].fresh;
    } catch (const Error& e) {
      o.status = "failed";
      o.error = std::string(to_string(e.code())) + ": " + e.what();
    }
  });

  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < n; ++i)
    if (outcomes[i].status == "ok") ok.push_back(i);
  std::vector<authd::DeviceArtifacts> live;
  std::vector<std::vector<FingerprintSample>> live_tests;
  for (auto i : ok) {
    live.push_back(artifacts[i]);
    live_tests.push_back(tests[i]);
  }

  ExperimentResult result;
  result.devices = outcomes;
  result.report = authd::one_vs_all(live, live_tests, c.pipeline, c.workers);
  for (std::size_t k = 0; k < ok.size(); ++k) {
    auto& r = result.report.resources[k];
    r.train_seconds = train_seconds[ok[k]];
    r.model_bytes = outcomes[ok[k]].model_bytes;
  }

  // Authentication fixture: each device's fresh batch under its own claim,
  // and every other device's batch claiming to be it.
  authd::AuditLog audit(out_dir / "audit.jsonl");
  fs::remove(audit.path());
  auto batch_for = [&](std::size_t claimed, std::size_t source) {
    auto series = pipeline::normalize_and_window(live[claimed].map, fresh[ok[source]], c.pipeline,
                                                 pipeline::SplitTag::test, live[source].device_id);
    if (series.windows.size() > c.batch_windows) series.windows.resize(c.batch_windows);
    return series.windows;
  };
  for (std::size_t i = 0; i < live.size(); ++i) {
    const auto& policy = outcomes[ok[i]].policy;
    result.fixture.legitimate.push_back(
        authd::authenticate(policy, live[i].model.get(), live[i].tau, batch_for(i, i), &audit));
    for (std::size_t j = 0; j < live.size(); ++j) {
      if (j == i) continue;
      result.fixture.impostor.emplace_back(
          live[j].device_id, authd::authenticate(policy, live[i].model.get(), live[i].tau, batch_for(i, j), &audit));
    }
  }

  json extra{{"name", c.name}, {"seed", c.seed}, {"device_outcomes", outcomes}};
  authd::write_report(out_dir / "report", result.report, extra);
  std::ofstream(out_dir / "fixture.json") << json(result.fixture).dump(2) << '\n';
  return result;
}

}  // namespace fingerforge::experiment

#endif  // FINGERFORGE_EXPERIMENT_HPP
