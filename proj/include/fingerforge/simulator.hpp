#ifndef FINGERFORGE_SIMULATOR_HPP
#define FINGERFORGE_SIMULATOR_HPP

// Synthetic multi-device fingerprint populations.
//
// Each feature of device d at sample t is
//   base_means[f] * (1 + skew_d) + bias_d[f] + temp_coeffs[f] * (T(t) - T0) + noise
// with Gaussian noise of standard deviation base_noise[f]. All randomness is
// derived from explicit seeds, so a (template, variation, seed, n, trace)
// tuple fully determines the emitted samples.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fingerforge/error.hpp"
#include "fingerforge/sample.hpp"

namespace fingerforge::sim {

struct DeviceModelTemplate {
  std::string model_name;
  std::vector<double> base_means;
  std::vector<double> base_noise;
  std::vector<double> temp_coeffs;

  std::size_t feature_count() const { return base_means.size(); }

  void validate() const {
    const auto f = base_means.size();
    require(f >= 1, Errc::InvalidArgument, "template has no features");
    require(base_noise.size() == f && temp_coeffs.size() == f, Errc::InvalidArgument,
            "template vectors differ in length");
    for (double s : base_noise) require(s > 0, Errc::InvalidArgument, "base_noise must be strictly positive");
  }
};

struct Variation {
  double skew_sigma = 0.001;
  double bias_sigma = 1.0;  // in units of base_noise
};

struct DeviceProfile {
  std::string device_id;
  std::shared_ptr<const DeviceModelTemplate> model;
  double skew = 0.0;
  std::vector<double> feature_bias;
  std::uint64_t seed = 0;

  bool operator==(const DeviceProfile& o) const {
    return device_id == o.device_id && model == o.model && skew == o.skew && feature_bias == o.feature_bias &&
           seed == o.seed;
  }
};

struct EnvironmentTrace {
  std::vector<double> temperature;
};

inline constexpr double kMaxSkew = 0.05;
inline constexpr double kReferenceTemperature = 45.0;

namespace detail {

// FNV-1a; stable across platforms unlike std::hash.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

/// Profiles for `k` devices of one model family.
inline std::vector<DeviceProfile> gen_population(std::shared_ptr<const DeviceModelTemplate> model, std::size_t k,
                                                 const Variation& variation, std::uint64_t seed) {
  require(model != nullptr, Errc::InvalidArgument, "null template");
  model->validate();
  require(k >= 1, Errc::InvalidArgument, "k must be >= 1");
  require(variation.skew_sigma >= 0 && variation.bias_sigma >= 0, Errc::InvalidArgument, "sigmas must be >= 0");

  std::seed_seq seq{seed, detail::fnv1a(model->model_name)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<DeviceProfile> out;
  out.reserve(k);
  for (std::size_t d = 0; d < k; ++d) {
    DeviceProfile p;
    p.model = model;
    std::ostringstream id;
    id << model->model_name << '-' << (d < 10 ? "0" : "") << d;
    p.device_id = id.str();
    do {
      p.skew = variation.skew_sigma * unit(rng);
    } while (std::abs(p.skew) >= kMaxSkew);
    p.feature_bias.resize(model->feature_count());
    for (std::size_t f = 0; f < p.feature_bias.size(); ++f)
      p.feature_bias[f] = variation.bias_sigma * model->base_noise[f] * unit(rng);
    p.seed = rng();
    out.push_back(std::move(p));
  }
  return out;
}

/// AR(1) temperature process around `mean`.
inline EnvironmentTrace ar1_trace(std::size_t n, std::uint64_t seed, double mean = kReferenceTemperature,
                                  double coefficient = 0.99, double innovation_sd = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, innovation_sd);
  EnvironmentTrace trace;
  trace.temperature.resize(n);
  double t = mean;
  for (std::size_t i = 0; i < n; ++i) {
    trace.temperature[i] = t;
    t = mean + coefficient * (t - mean) + noise(rng);
  }
  return trace;
}

inline EnvironmentTrace constant_trace(std::size_t n, double temperature = kReferenceTemperature) {
  return EnvironmentTrace{std::vector<double>(n, temperature)};
}

struct SampleOptions {
  double start_time = 1.6e9;
  double interval = 60.0;
  double noise_scale = 1.0;  // 0 gives the noiseless limit
  // Heavy-tail mixture: with this probability a feature's noise is inflated.
  double contamination_prob = 0.0;
  double contamination_scale = 10.0;
};

inline std::vector<FingerprintSample> gen_samples(const DeviceProfile& profile, std::size_t n,
                                                  const EnvironmentTrace& env, const SampleOptions& options = {}) {
  require(n >= 1, Errc::InvalidArgument, "n must be >= 1");
  require(env.temperature.size() >= n, Errc::EnvTooShort,
          "trace has " + std::to_string(env.temperature.size()) + " values, need " + std::to_string(n));
  require(options.noise_scale >= 0, Errc::InvalidArgument, "noise_scale must be >= 0");
  const auto& m = *profile.model;
  const auto F = m.feature_count();

  std::mt19937_64 rng(profile.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<FingerprintSample> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto& s = out[t];
    s.device_id = profile.device_id;
    s.timestamp = options.start_time + options.interval * static_cast<double>(t);
    s.temperature = env.temperature[t];
    s.features.resize(F);
    const double dT = env.temperature[t] - kReferenceTemperature;
    for (std::size_t f = 0; f < F; ++f) {
      double eps = unit(rng) * m.base_noise[f] * options.noise_scale;
      if (options.contamination_prob > 0 && coin(rng) < options.contamination_prob) eps *= options.contamination_scale;
      s.features[f] = m.base_means[f] * (1.0 + profile.skew) + profile.feature_bias[f] + m.temp_coeffs[f] * dT + eps;
    }
  }
  return out;
}

/// A synthetic model family: per-feature magnitudes log-uniform over
/// [1e3, 1e7] (tick counts / nanoseconds), coefficient of variation in
/// [0.5%, 3%], temperature drift of a few percent of the noise per degree.
inline DeviceModelTemplate synthetic_template(std::string model_name, std::size_t features, std::uint64_t seed) {
  require(features >= 1, Errc::InvalidArgument, "features must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> log_mag(3.0, 7.0), cv(0.005, 0.03);
  std::normal_distribution<double> drift(0.0, 0.05);
  DeviceModelTemplate t;
  t.model_name = std::move(model_name);
  t.base_means.resize(features);
  t.base_noise.resize(features);
  t.temp_coeffs.resize(features);
  for (std::size_t f = 0; f < features; ++f) {
    t.base_means[f] = std::pow(10.0, log_mag(rng));
    t.base_noise[f] = t.base_means[f] * cv(rng);
    t.temp_coeffs[f] = t.base_noise[f] * drift(rng);
  }
  return t;
}

/// Templates document: {"templates": [ {model_name, base_means, base_noise,
/// temp_coeffs} | {model_name, synthetic: {features, seed}} ]}.
inline std::vector<DeviceModelTemplate> templates_from_json(const json& doc) {
  std::vector<DeviceModelTemplate> out;
  for (const auto& t : doc.at("templates")) {
    DeviceModelTemplate m;
    if (t.contains("synthetic")) {
      const auto& syn = t["synthetic"];
      m = synthetic_template(t.at("model_name").get<std::string>(), syn.at("features").get<std::size_t>(),
                             syn.value("seed", std::uint64_t{1}));
    } else {
      m.model_name = t.at("model_name").get<std::string>();
      m.base_means = t.at("base_means").get<std::vector<double>>();
      m.base_noise = t.at("base_noise").get<std::vector<double>>();
      m.temp_coeffs = t.value("temp_coeffs", std::vector<double>(m.base_means.size(), 0.0));
    }
    m.validate();
    out.push_back(std::move(m));
  }
  return out;
}

inline json templates_to_json(const std::vector<DeviceModelTemplate>& templates) {
  json doc{{"templates", json::array()}};
  for (const auto& t : templates)
    doc["templates"].push_back(json{{"model_name", t.model_name},
                                    {"base_means", t.base_means},
                                    {"base_noise", t.base_noise},
                                    {"temp_coeffs", t.temp_coeffs}});
  return doc;
}

/// Parses "rpi4:15,rpi3:10" into (model name, device count) pairs.
inline std::vector<std::pair<std::string, std::size_t>> parse_device_spec(const std::string& spec) {
  std::vector<std::pair<std::string, std::size_t>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    require(colon != std::string::npos && colon > 0, Errc::InvalidArgument, "bad device spec entry: " + item);
    const auto count = std::stoul(item.substr(colon + 1));
    require(count >= 1, Errc::InvalidArgument, "device count must be >= 1");
    out.emplace_back(item.substr(0, colon), count);
  }
  require(!out.empty(), Errc::InvalidArgument, "empty device spec");
  return out;
}

/// The 45-device deployment census and its per-model sample volumes.
struct CensusEntry {
  std::string model_name;
  std::size_t devices;
  std::size_t total_samples;
};

inline std::vector<CensusEntry> deployment_census() {
  return {{"rpi4", 15, 784095}, {"rpi3", 10, 547800}, {"rpi1", 10, 505584}, {"rpizero", 10, 548647}};
}

}  // namespace fingerforge::sim

#endif  // FINGERFORGE_SIMULATOR_HPP
