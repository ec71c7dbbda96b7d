#ifndef FINGERFORGE_SEARCH_HPP
#define FINGERFORGE_SEARCH_HPP

// Per-device hyperparameter search: every sampled configuration is trained,
// its threshold calibrated on the training windows, and the configuration
// with the highest validation acceptance rate (TPR) wins.

#include <algorithm>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/authd.hpp"
#include "fingerforge/parallel.hpp"
#include "fingerforge/transformer.hpp"

namespace fingerforge::search {

using json = nlohmann::json;
using nn::Matrix;

struct SearchGrid {
  std::vector<int> dff{32, 64, 128, 256, 1024};
  std::vector<int> num_layers{1, 2, 3};
  std::vector<int> epochs{10, 20, 50};
  std::vector<int> batch_size{32, 128, 256, 512};
  // Extension axes; the reference grid fixes neither.
  std::vector<int> d_model{64};
  std::vector<int> num_heads{4};

  /// The reference Transformer grid: 5 x 3 x 3 x 4 = 180 configurations.
  static SearchGrid reference() { return SearchGrid{}; }

  std::size_t size() const {
    return dff.size() * num_layers.size() * epochs.size() * batch_size.size() * d_model.size() * num_heads.size();
  }
};

inline void to_json(json& j, const SearchGrid& g) {
  j = json{{"dff", g.dff},         {"num_layers", g.num_layers}, {"epochs", g.epochs},
           {"batch_size", g.batch_size}, {"d_model", g.d_model}, {"num_heads", g.num_heads}};
}

inline void from_json(const json& j, SearchGrid& g) {
  SearchGrid d;
  g.dff = j.value("dff", d.dff);
  g.num_layers = j.value("num_layers", d.num_layers);
  g.epochs = j.value("epochs", d.epochs);
  g.batch_size = j.value("batch_size", d.batch_size);
  g.d_model = j.value("d_model", d.d_model);
  g.num_heads = j.value("num_heads", d.num_heads);
  require(g.size() > 0, Errc::InvalidArgument, "empty search grid");
}

/// Cross product in a fixed order (dff outermost, num_heads innermost);
/// combinations with d_model not divisible by num_heads are left out.
inline std::vector<ae::TransformerConfig> enumerate(const SearchGrid& grid, const ae::TransformerConfig& base) {
  std::vector<ae::TransformerConfig> out;
  for (int dff : grid.dff)
    for (int layers : grid.num_layers)
      for (int epochs : grid.epochs)
        for (int batch : grid.batch_size)
          for (int d_model : grid.d_model)
            for (int heads : grid.num_heads) {
              if (heads <= 0 || d_model % heads != 0) continue;
              auto c = base;
              c.dff = dff;
              c.num_layers = layers;
              c.epochs = epochs;
              c.batch_size = batch;
              c.d_model = d_model;
              c.num_heads = heads;
              out.push_back(c);
            }
  return out;
}

/// Uniform subsample of `budget` configurations (enumeration order kept);
/// the full list when the budget covers it.
inline std::vector<ae::TransformerConfig> subsample(const std::vector<ae::TransformerConfig>& configs, std::size_t budget,
                                                    std::uint64_t seed) {
  if (budget == 0 || budget >= configs.size()) return configs;
  std::vector<ae::TransformerConfig> out;
  std::mt19937_64 rng(seed);
  std::sample(configs.begin(), configs.end(), std::back_inserter(out), budget, rng);
  return out;
}

struct SearchEntry {
  ae::TransformerConfig config;
  std::string status = "pending";  // ok | infeasible | diverged
  std::string message;
  double val_tpr = 0.0;
  double val_mean_error = 0.0;
  double tau = 0.0;
  std::size_t parameters = 0;
  double train_seconds = 0.0;
};

inline void to_json(json& j, const SearchEntry& e) {
  j = json{{"config", e.config},       {"status", e.status},     {"message", e.message},
           {"val_tpr", e.val_tpr},     {"val_mean_error", e.val_mean_error}, {"tau", e.tau},
           {"parameters", e.parameters}, {"train_seconds", e.train_seconds}};
}

struct SearchResult {
  std::size_t best_index = 0;
  SearchEntry best;
  std::shared_ptr<ae::AutoencoderModel> model;  // threshold set
  authd::ThresholdCalibration calibration;
  std::vector<SearchEntry> log;
};

struct SearchOptions {
  std::size_t budget = 24;
  std::uint64_t seed = 1;
  double alpha = authd::kDefaultAlpha;
  std::size_t workers = 1;
};

/// True when `a` should be preferred over `b`.
inline bool better(const SearchEntry& a, const SearchEntry& b) {
  if (a.val_tpr != b.val_tpr) return a.val_tpr > b.val_tpr;
  if (a.parameters != b.parameters) return a.parameters < b.parameters;
  return a.val_mean_error < b.val_mean_error;
}

/// Configurations whose batch size exceeds the training windows are logged as
/// infeasible and do not count against the budget.
inline SearchResult grid_search(const std::vector<Matrix>& train, const std::vector<Matrix>& val,
                                const std::vector<ae::TransformerConfig>& candidates, const SearchOptions& options = {}) {
  require(!candidates.empty(), Errc::InvalidArgument, "empty search grid");
  require(!val.empty(), Errc::EmptySet, "no validation windows");
  std::vector<ae::TransformerConfig> feasible;
  std::vector<SearchEntry> skipped;
  for (const auto& c : candidates) {
    if (train.size() >= static_cast<std::size_t>(c.batch_size)) {
      feasible.push_back(c);
      continue;
    }
    SearchEntry e;
    e.config = c;
    e.status = "infeasible";
    e.message = "batch_size exceeds the " + std::to_string(train.size()) + " training windows";
    skipped.push_back(e);
  }
  const auto configs = subsample(feasible, options.budget, options.seed);

  std::vector<SearchEntry> log(configs.size());
  std::vector<std::shared_ptr<ae::AutoencoderModel>> models(configs.size());
  std::vector<authd::ThresholdCalibration> calibrations(configs.size());

  parallel_for(configs.size(), options.workers, [&](std::size_t i) {
    auto& entry = log[i];
    entry.config = configs[i];
    try {
      ae::AutoencoderModel model;
      entry.train_seconds = authd::timed_seconds([&] { model = ae::train(train, configs[i]); });
      const auto cal = authd::calibrate_threshold(model, train, options.alpha);
      model.set_threshold(cal.tau);
      const auto errors = authd::reconstruction_errors(model, val);
      entry.val_tpr = authd::acceptance_rate_from_errors(errors, cal.tau);
      entry.val_mean_error = std::accumulate(errors.begin(), errors.end(), 0.0) / static_cast<double>(errors.size());
      entry.tau = cal.tau;
      entry.parameters = model.parameters().scalar_count();
      entry.status = "ok";
      calibrations[i] = cal;
      models[i] = std::make_shared<ae::AutoencoderModel>(std::move(model));
    } catch (const Error& e) {
      if (e.code() != Errc::DivergenceDetected && e.code() != Errc::NonFiniteActivation) throw;
      entry.status = "diverged";
      entry.message = e.what();
    }
  });
  log.insert(log.end(), skipped.begin(), skipped.end());

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < log.size(); ++i)
    if (log[i].status == "ok" && (!best || better(log[i], log[*best]))) best = i;
  require(best.has_value(), Errc::DivergenceDetected, "no configuration trained successfully");

  SearchResult result;
  result.best_index = *best;
  result.best = log[*best];
  result.model = models[*best];
  result.calibration = calibrations[*best];
  result.log = std::move(log);
  return result;
}

}  // namespace fingerforge::search

#endif  // FINGERFORGE_SEARCH_HPP
