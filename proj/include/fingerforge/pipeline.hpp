#ifndef FINGERFORGE_PIPELINE_HPP
#define FINGERFORGE_PIPELINE_HPP

// Raw samples -> model-ready windows: cleaning, unshuffled split,
// per-device quantile normalization and windowing.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fingerforge/error.hpp"
#include "fingerforge/sample.hpp"

namespace fingerforge::pipeline {

using Matrix = Eigen::MatrixXd;

struct DropReport {
  std::size_t input = 0;
  std::size_t missing = 0;  // null or non-finite feature
  std::size_t outlier = 0;  // robust IQR filter
  std::size_t dropped() const { return missing + outlier; }
};

inline void to_json(json& j, const DropReport& r) {
  j = json{{"input", r.input}, {"missing", r.missing}, {"outlier", r.outlier}, {"dropped", r.dropped()}};
}

struct CleanOptions {
  bool robust_filter = false;
  double iqr_multiplier = 3.0;
};

/// Linear-interpolation quantile of an already sorted range.
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.size() == 1) return sorted.front();
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline std::pair<std::vector<FingerprintSample>, DropReport> clean(const std::vector<FingerprintSample>& samples,
                                                                   const CleanOptions& options = {}) {
  DropReport report;
  report.input = samples.size();
  std::vector<FingerprintSample> kept;
  kept.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.complete())
      kept.push_back(s);
    else
      ++report.missing;
  }

  if (options.robust_filter && !kept.empty()) {
    const auto F = kept.front().features.size();
    std::vector<double> lo(F), hi(F), column(kept.size());
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t i = 0; i < kept.size(); ++i) column[i] = kept[i].features[f];
      std::sort(column.begin(), column.end());
      const double q1 = sorted_quantile(column, 0.25), q3 = sorted_quantile(column, 0.75);
      lo[f] = q1 - options.iqr_multiplier * (q3 - q1);
      hi[f] = q3 + options.iqr_multiplier * (q3 - q1);
    }
    std::vector<FingerprintSample> inliers;
    inliers.reserve(kept.size());
    for (auto& s : kept) {
      bool ok = true;
      for (std::size_t f = 0; f < F && ok; ++f) ok = s.features[f] >= lo[f] && s.features[f] <= hi[f];
      if (ok)
        inliers.push_back(std::move(s));
      else
        ++report.outlier;
    }
    kept = std::move(inliers);
  }

  require(!kept.empty(), Errc::EmptyAfterCleaning, "all " + std::to_string(report.input) + " samples dropped");
  return {std::move(kept), report};
}

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
  bool shuffle = false;
  bool strict_order = true;  // forbids shuffling
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train, val, test})
      require(f > 0 && f < 1, Errc::InvalidArgument, "split fractions must lie in (0,1)");
    require(std::abs(train + val + test - 1.0) <= 1e-9, Errc::InvalidArgument, "split fractions must sum to 1");
    require(!(shuffle && strict_order), Errc::ShuffleForbidden, "splits must preserve time order");
  }
};

template <class T>
struct Splits {
  std::vector<T> train, val, test;
};

/// Contiguous time-ordered partition; floors for train/val, remainder to test.
template <class T>
Splits<T> split(const std::vector<T>& items, const SplitSpec& spec) {
  spec.validate();
  const auto N = items.size();
  require(N >= 10, Errc::TooFewSamples, "need >= 10 samples, got " + std::to_string(N));
  // The epsilon absorbs representation error, e.g. 0.7 * 1000 -> 699.999...
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(N) * spec.train + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(N) * spec.val + 1e-9));

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  if (spec.shuffle) {
    std::mt19937_64 rng(spec.seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  Splits<T> out;
  for (std::size_t i = 0; i < N; ++i) {
    auto& dst = i < n_train ? out.train : i < n_train + n_val ? out.val : out.test;
    dst.push_back(items[order[i]]);
  }
  return out;
}

/// Per-feature empirical quantile landmarks; values map onto [0,1].
struct QuantileMap {
  static constexpr int kVersion = 1;
  std::string device_id;
  std::vector<std::vector<double>> landmarks;

  std::size_t feature_count() const { return landmarks.size(); }

  /// Ties among landmarks map to the midpoint of the positions they occupy,
  /// so a constant feature sends its value to 0.5.
  double transform(std::size_t feature, double x) const {
    const auto& L = landmarks[feature];
    const auto m = L.size();
    if (x < L.front()) return 0.0;
    if (x > L.back()) return 1.0;
    const double step = 1.0 / static_cast<double>(m - 1);
    auto position = [&](std::size_t k) { return static_cast<double>(k) * step; };
    auto lo_it = std::lower_bound(L.begin(), L.end(), x);
    auto hi_it = std::upper_bound(L.begin(), L.end(), x);
    const auto lo = static_cast<std::size_t>(lo_it - L.begin());
    const auto hi = static_cast<std::size_t>(hi_it - L.begin());
    if (lo < hi) return 0.5 * (position(lo) + position(hi - 1));  // x equals one or more landmarks
    // Strictly between L[lo-1] and L[lo].
    const double a = L[lo - 1], b = L[lo];
    return position(lo - 1) + (x - a) / (b - a) * step;
  }
};

inline void to_json(json& j, const QuantileMap& m) {
  j = json{{"version", QuantileMap::kVersion},
           {"device_id", m.device_id},
           {"output", "uniform"},
           {"landmarks", m.landmarks}};
}

inline void from_json(const json& j, QuantileMap& m) {
  require(j.value("version", 0) == QuantileMap::kVersion, Errc::SchemaMismatch, "unsupported map version");
  m.device_id = j.value("device_id", std::string{});
  m.landmarks = j.at("landmarks").get<std::vector<std::vector<double>>>();
  for (const auto& L : m.landmarks) {
    require(L.size() >= 2, Errc::SchemaMismatch, "map feature needs >= 2 landmarks");
    require(std::is_sorted(L.begin(), L.end()), Errc::SchemaMismatch, "landmarks must be non-decreasing");
  }
}

/// Rows are samples, columns are features.
inline QuantileMap fit_quantile(const Matrix& train, std::size_t landmarks, std::string device_id = {}) {
  require(train.rows() > 0 && train.cols() > 0, Errc::InvalidArgument, "empty training data");
  require(landmarks >= 2, Errc::InvalidArgument, "need Q >= 2 landmarks");
  QuantileMap map;
  map.device_id = std::move(device_id);
  map.landmarks.resize(static_cast<std::size_t>(train.cols()));
  std::vector<double> column(static_cast<std::size_t>(train.rows()));
  for (Eigen::Index f = 0; f < train.cols(); ++f) {
    for (Eigen::Index i = 0; i < train.rows(); ++i) column[static_cast<std::size_t>(i)] = train(i, f);
    std::sort(column.begin(), column.end());
    std::size_t unique_count = column.empty() ? 0 : 1;
    for (std::size_t i = 1; i < column.size(); ++i) unique_count += column[i] != column[i - 1];
    const auto m = std::max<std::size_t>(2, std::min(landmarks, unique_count));
    auto& L = map.landmarks[static_cast<std::size_t>(f)];
    L.resize(m);
    for (std::size_t k = 0; k < m; ++k)
      L[k] = sorted_quantile(column, static_cast<double>(k) / static_cast<double>(m - 1));
    // Interpolation rounding must not break monotonicity.
    for (std::size_t k = 1; k < m; ++k) L[k] = std::max(L[k], L[k - 1]);
  }
  return map;
}

inline Matrix apply_quantile(const QuantileMap& map, const Matrix& data) {
  require(static_cast<std::size_t>(data.cols()) == map.feature_count(), Errc::SchemaMismatch,
          "data has " + std::to_string(data.cols()) + " features, map has " + std::to_string(map.feature_count()));
  Matrix out(data.rows(), data.cols());
  for (Eigen::Index f = 0; f < data.cols(); ++f)
    for (Eigen::Index i = 0; i < data.rows(); ++i) out(i, f) = map.transform(static_cast<std::size_t>(f), data(i, f));
  return out;
}

/// Model input: performance features, optionally followed by temperature.
/// Timestamps never enter the model.
inline Matrix to_matrix(const std::vector<FingerprintSample>& samples, bool include_temperature = false) {
  require(!samples.empty(), Errc::InvalidArgument, "no samples");
  const auto F = samples.front().features.size();
  const auto cols = F + (include_temperature ? 1 : 0);
  Matrix m(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(s.features.size() == F, Errc::SchemaMismatch, "inconsistent feature counts");
    for (std::size_t f = 0; f < F; ++f) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) = s.features[f];
    if (include_temperature) {
      require(s.temperature.has_value(), Errc::SchemaMismatch, "temperature requested but missing");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(F)) = *s.temperature;
    }
  }
  return m;
}

enum class SplitTag { train, val, test };

inline std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "unknown";
}

struct WindowedSeries {
  std::vector<Matrix> windows;  // each W x F
  std::size_t window_length = 0;
  std::size_t stride = 0;
  SplitTag split = SplitTag::train;
  std::string device_id;
  std::size_t source_offset = 0;     // index of the split's first sample in the full stream
  std::vector<std::size_t> starts;   // per-window start index within the split

  std::size_t size() const { return windows.size(); }
  /// Lengths outside 10..100 are allowed but outside the reference range.
  bool flagged() const { return window_length < 10 || window_length > 100; }
};

inline WindowedSeries window(const Matrix& rows, std::size_t W, std::size_t stride, SplitTag tag = SplitTag::train,
                             std::string device_id = {}, std::size_t source_offset = 0) {
  require(W >= 1 && stride >= 1, Errc::InvalidArgument, "window and stride must be >= 1");
  const auto N = static_cast<std::size_t>(rows.rows());
  require(N >= W, Errc::SeriesTooShort, std::to_string(N) + " samples < window " + std::to_string(W));
  WindowedSeries out;
  out.window_length = W;
  out.stride = stride;
  out.split = tag;
  out.device_id = std::move(device_id);
  out.source_offset = source_offset;
  const auto count = (N - W) / stride + 1;
  out.windows.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto start = k * stride;
    out.starts.push_back(start);
    out.windows.push_back(rows.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(W)));
  }
  return out;
}

struct PipelineConfig {
  SplitSpec split;
  std::size_t window_length = 20;
  std::size_t stride = 0;  // 0: non-overlapping (stride = window_length)
  std::size_t landmarks = 1000;
  bool include_temperature = false;
  CleanOptions clean;

  std::size_t effective_stride() const { return stride == 0 ? window_length : stride; }
};

inline void to_json(json& j, const PipelineConfig& c) {
  j = json{{"split", {c.split.train, c.split.val, c.split.test}},
           {"window", c.window_length},
           {"stride", c.effective_stride()},
           {"landmarks", c.landmarks},
           {"include_temperature", c.include_temperature},
           {"robust_filter", c.clean.robust_filter}};
}

inline void from_json(const json& j, PipelineConfig& c) {
  if (j.contains("split")) {
    const auto s = j["split"].get<std::vector<double>>();
    require(s.size() == 3, Errc::InvalidArgument, "split needs three fractions");
    c.split.train = s[0];
    c.split.val = s[1];
    c.split.test = s[2];
  }
  c.window_length = j.value("window", c.window_length);
  c.stride = j.value("stride", c.stride);
  c.landmarks = j.value("landmarks", c.landmarks);
  c.include_temperature = j.value("include_temperature", c.include_temperature);
  c.clean.robust_filter = j.value("robust_filter", c.clean.robust_filter);
}

/// One device's stream after cleaning, splitting and normalization with its own map.
struct PreparedDevice {
  std::string device_id;
  DropReport drops;
  Splits<FingerprintSample> raw;
  QuantileMap map;
  WindowedSeries train, val, test;
};

/// Normalizes raw samples with `map` and windows them; used for both the
/// device's own splits and for cross-device evaluation.
inline WindowedSeries normalize_and_window(const QuantileMap& map, const std::vector<FingerprintSample>& samples,
                                           const PipelineConfig& config, SplitTag tag, std::string device_id,
                                           std::size_t source_offset = 0) {
  const auto normalized = apply_quantile(map, to_matrix(samples, config.include_temperature));
  return window(normalized, config.window_length, config.effective_stride(), tag, std::move(device_id),
                source_offset);
}

inline PreparedDevice prepare_device(const std::string& device_id, const std::vector<FingerprintSample>& samples,
                                     const PipelineConfig& config) {
  PreparedDevice out;
  out.device_id = device_id;
  auto [kept, drops] = clean(samples, config.clean);
  out.drops = drops;
  out.raw = split(kept, config.split);
  out.map = fit_quantile(to_matrix(out.raw.train, config.include_temperature),
                         std::min(config.landmarks, out.raw.train.size()), device_id);
  const auto n_train = out.raw.train.size(), n_val = out.raw.val.size();
  out.train = normalize_and_window(out.map, out.raw.train, config, SplitTag::train, device_id, 0);
  out.val = normalize_and_window(out.map, out.raw.val, config, SplitTag::val, device_id, n_train);
  out.test = normalize_and_window(out.map, out.raw.test, config, SplitTag::test, device_id, n_train + n_val);
  return out;
}

/// Tensor CSV: one line per window row, "window,step,f0,...".
inline void write_windows_csv(const std::filesystem::path& path, const WindowedSeries& series) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), Errc::IOError, "cannot write " + path.string());
  const auto F = series.windows.empty() ? 0 : series.windows.front().cols();
  out << "window,step";
  for (Eigen::Index f = 0; f < F; ++f) out << ",f" << f;
  out << '\n';
  for (std::size_t w = 0; w < series.windows.size(); ++w) {
    const auto& m = series.windows[w];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      out << w << ',' << r;
      for (Eigen::Index f = 0; f < m.cols(); ++f) out << ',' << format_double(m(r, f));
      out << '\n';
    }
  }
}

inline WindowedSeries read_windows_csv(const std::filesystem::path& path, SplitTag tag = SplitTag::train) {
  std::ifstream in(path);
  require(in.good(), Errc::IOError, "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::vector<double>>> rows_by_window;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const auto w = std::stoul(cell);
    std::getline(ss, cell, ',');
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    if (rows_by_window.size() <= w) rows_by_window.resize(w + 1);
    rows_by_window[w].push_back(std::move(values));
  }
  WindowedSeries series;
  series.split = tag;
  for (const auto& rows : rows_by_window) {
    require(!rows.empty(), Errc::SchemaMismatch, "window with no rows in " + path.string());
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == rows.front().size(), Errc::SchemaMismatch, "ragged tensor row");
      for (std::size_t f = 0; f < rows[r].size(); ++f)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) = rows[r][f];
    }
    series.windows.push_back(std::move(m));
  }
  if (!series.windows.empty()) {
    series.window_length = static_cast<std::size_t>(series.windows.front().rows());
    series.stride = series.window_length;
    for (std::size_t i = 0; i < series.windows.size(); ++i) series.starts.push_back(i * series.window_length);
  }
  return series;
}

}  // namespace fingerforge::pipeline

#endif  // FINGERFORGE_PIPELINE_HPP
