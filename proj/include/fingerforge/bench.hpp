#ifndef FINGERFORGE_BENCH_HPP
#define FINGERFORGE_BENCH_HPP

// Local fingerprint collection: each probe times a fixed workload against a
// pair of independent clocks. Sleep-style probes bound the workload with the
// reference clock and count ticks of the counting clock; fixed-work probes
// report reference-clock nanoseconds.

#include <fcntl.h>
#include <sched.h>
#include <sys/resource.h>
#include <sys/stat.h>
#include <time.h>
#include <unistd.h>

#if defined(__x86_64__) || defined(__i386__)
#include <x86intrin.h>
#define FINGERFORGE_HAS_TSC 1
#endif

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <list>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fingerforge/error.hpp"
#include "fingerforge/sample.hpp"

namespace fingerforge::bench {

enum class ClockSource { monotonic, monotonic_raw, monotonic_coarse, thread_cputime, tsc };

inline std::string clock_name(ClockSource c) {
  switch (c) {
    case ClockSource::monotonic: return "monotonic";
    case ClockSource::monotonic_raw: return "monotonic_raw";
    case ClockSource::monotonic_coarse: return "monotonic_coarse";
    case ClockSource::thread_cputime: return "thread_cputime";
    case ClockSource::tsc: return "tsc";
  }
  return "unknown";
}

namespace detail {

inline std::optional<clockid_t> posix_id(ClockSource c) {
  switch (c) {
    case ClockSource::monotonic: return CLOCK_MONOTONIC;
    case ClockSource::monotonic_raw: return CLOCK_MONOTONIC_RAW;
    case ClockSource::monotonic_coarse: return CLOCK_MONOTONIC_COARSE;
    case ClockSource::thread_cputime: return CLOCK_THREAD_CPUTIME_ID;
    case ClockSource::tsc: return std::nullopt;
  }
  return std::nullopt;
}

template <class T>
inline void do_not_optimize(const T& value) {
  asm volatile("" : : "r,m"(value) : "memory");
}

inline std::uint64_t fibonacci(unsigned n) { return n < 2 ? n : fibonacci(n - 1) + fibonacci(n - 2); }

}  // namespace detail

inline bool clock_available(ClockSource c) {
  if (c == ClockSource::tsc) {
#ifdef FINGERFORGE_HAS_TSC
    return true;
#else
    return false;
#endif
  }
  timespec ts{};
  return clock_gettime(*detail::posix_id(c), &ts) == 0;
}

/// Nominal granularity in nanoseconds. The TSC is treated as sub-nanosecond.
inline std::optional<double> clock_resolution_ns(ClockSource c) {
  if (!clock_available(c)) return std::nullopt;
  if (c == ClockSource::tsc) return 1.0;
  timespec res{};
  if (clock_getres(*detail::posix_id(c), &res) != 0) return std::nullopt;
  return static_cast<double>(res.tv_sec) * 1e9 + static_cast<double>(res.tv_nsec);
}

inline std::uint64_t read_clock(ClockSource c) {
  if (c == ClockSource::tsc) {
#ifdef FINGERFORGE_HAS_TSC
    return __rdtsc();
#else
    throw Error(Errc::ClockUnavailable, "tsc");
#endif
  }
  timespec ts{};
  clock_gettime(*detail::posix_id(c), &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1000000000ull + static_cast<std::uint64_t>(ts.tv_nsec);
}

struct ClockPair {
  ClockSource reference = ClockSource::monotonic;
  ClockSource counting = ClockSource::monotonic_raw;
};

/// Reference: monotonic wall clock. Counting: hardware tick counter when the
/// CPU exposes one, otherwise the raw (NTP-unslewed) monotonic clock.
inline ClockPair default_clock_pair() {
  ClockPair pair;
  pair.counting = clock_available(ClockSource::tsc) ? ClockSource::tsc : ClockSource::monotonic_raw;
  return pair;
}

inline void check_clocks(const ClockPair& pair) {
  for (ClockSource c : {pair.reference, pair.counting}) {
    auto res = clock_resolution_ns(c);
    require(res.has_value(), Errc::ClockUnavailable, clock_name(c));
    require(*res <= 1000.0, Errc::InsufficientResolution,
            clock_name(c) + " granularity " + std::to_string(*res) + " ns exceeds 1 us");
  }
}

inline std::filesystem::path scratch_dir() {
  if (const char* env = std::getenv("FINGERFORGE_SCRATCH"); env && *env) return env;
  return std::filesystem::temp_directory_path() / "fingerforge-scratch";
}

struct ProbeOptions {
  std::filesystem::path scratch = scratch_dir();
  double max_payload_bytes = kDefaultMaxPayloadBytes;
};

namespace detail {

inline std::filesystem::path ensure_scratch(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::ScratchIOError, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

inline void write_file_synced(const std::filesystem::path& path, std::size_t bytes, unsigned char fill) {
  int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0600);
  if (fd < 0) throw Error(Errc::ScratchIOError, "open " + path.string() + ": " + std::strerror(errno));
  std::vector<unsigned char> buf(std::min<std::size_t>(bytes, 1 << 20), fill);
  std::size_t left = bytes;
  while (left > 0) {
    const auto chunk = std::min(left, buf.size());
    const auto n = ::write(fd, buf.data(), chunk);
    if (n <= 0) {
      ::close(fd);
      throw Error(Errc::ScratchIOError, "write " + path.string());
    }
    left -= static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw Error(Errc::ScratchIOError, "fsync " + path.string());
  }
  ::close(fd);
}

inline std::size_t read_file(const std::filesystem::path& path, bool drop_cache) {
  int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw Error(Errc::ScratchIOError, "open " + path.string() + ": " + std::strerror(errno));
  if (drop_cache) ::posix_fadvise(fd, 0, 0, POSIX_FADV_DONTNEED);
  std::vector<unsigned char> buf(64 * 1024);
  std::size_t total = 0;
  for (;;) {
    const auto n = ::read(fd, buf.data(), buf.size());
    if (n < 0) {
      ::close(fd);
      throw Error(Errc::ScratchIOError, "read " + path.string());
    }
    if (n == 0) break;
    total += static_cast<std::size_t>(n);
  }
  ::close(fd);
  do_not_optimize(buf[0]);
  return total;
}

inline void sleep_until_reference(ClockSource reference, std::uint64_t deadline_ns) {
  if (auto id = posix_id(reference)) {
    timespec ts{static_cast<time_t>(deadline_ns / 1000000000ull), static_cast<long>(deadline_ns % 1000000000ull)};
    while (clock_nanosleep(*id, TIMER_ABSTIME, &ts, nullptr) == EINTR) {
    }
    return;
  }
  while (read_clock(reference) < deadline_ns) std::this_thread::yield();
}

}  // namespace detail

/// Runs one probe and returns its measurement (ticks or nanoseconds, > 0).
inline double run_probe(const ProbeSpec& spec, const ClockPair& clocks = default_clock_pair(),
                        const ProbeOptions& options = {}) {
  spec.validate(options.max_payload_bytes);
  check_clocks(clocks);

  auto ticks = [&](auto&& workload) {
    const auto start = read_clock(clocks.counting);
    workload();
    const auto end = read_clock(clocks.counting);
    return static_cast<double>(end - start);
  };
  auto nanos = [&](auto&& workload) {
    const auto start = read_clock(clocks.reference);
    workload();
    const auto end = read_clock(clocks.reference);
    return static_cast<double>(end - start);
  };

  double result = 0.0;
  switch (spec.kind) {
    case ProbeKind::cpu_sleep: {
      const double seconds = spec.param("seconds", 1.0);
      result = ticks([&] {
        if (seconds > 0) {
          const auto deadline = read_clock(clocks.reference) + static_cast<std::uint64_t>(seconds * 1e9);
          detail::sleep_until_reference(clocks.reference, deadline);
        }
      });
      break;
    }
    case ProbeKind::string_hash: {
      static constexpr std::string_view kText =
          "the quick brown fox jumps over the lazy dog 0123456789 fingerprint payload";
      const auto reps = static_cast<long>(spec.param("repetitions", 1000));
      result = ticks([&] {
        std::size_t acc = 0;
        for (long i = 0; i < reps; ++i) {
          acc ^= std::hash<std::string_view>{}(kText) + 0x9e3779b97f4a7c15ull + (acc << 6) + (acc >> 2);
          detail::do_not_optimize(acc);
        }
      });
      break;
    }
    case ProbeKind::pseudo_random: {
      const auto reps = static_cast<long>(spec.param("repetitions", 1));
      result = ticks([&] {
        std::mt19937 gen(12345u);
        for (long i = 0; i < reps; ++i) {
          auto v = gen();
          detail::do_not_optimize(v);
        }
      });
      break;
    }
    case ProbeKind::random_fill: {
      const auto bytes = static_cast<std::size_t>(spec.param("bytes", 1 << 20));
      std::vector<char> buf(std::min<std::size_t>(bytes, 1 << 20));
      std::ifstream urandom("/dev/urandom", std::ios::binary);
      require(urandom.good(), Errc::ProbeFailed, "/dev/urandom unavailable");
      result = ticks([&] {
        std::size_t left = bytes;
        while (left > 0) {
          const auto chunk = std::min(left, buf.size());
          urandom.read(buf.data(), static_cast<std::streamsize>(chunk));
          left -= chunk;
        }
        detail::do_not_optimize(buf[0]);
      });
      require(urandom.good(), Errc::ProbeFailed, "/dev/urandom read failed");
      break;
    }
    case ProbeKind::fibonacci: {
      const auto n = static_cast<unsigned>(spec.param("n", 20));
      result = ticks([&] {
        auto v = detail::fibonacci(n);
        detail::do_not_optimize(v);
      });
      break;
    }
    case ProbeKind::matrix_mul: {
      const auto n = static_cast<std::size_t>(spec.param("size", 128));
      std::vector<double> a(n * n, 1.0001), b(n * n, 0.9999), c(n * n, 0.0);
      result = nanos([&] {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < n; ++k) {
            const double aik = a[i * n + k];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aik * b[k * n + j];
          }
        detail::do_not_optimize(c[0]);
      });
      break;
    }
    case ProbeKind::matrix_sum: {
      const auto n = static_cast<std::size_t>(spec.param("size", 512));
      std::vector<double> a(n * n, 1.5), b(n * n, 2.5), c(n * n);
      result = nanos([&] {
        for (std::size_t i = 0; i < n * n; ++i) c[i] = a[i] + b[i];
        detail::do_not_optimize(c[n]);
      });
      break;
    }
    case ProbeKind::strided_copy: {
      const auto n = static_cast<std::size_t>(spec.param("size", 512));
      std::vector<float> x(n * n, 0.5f), y(n * n);
      result = nanos([&] {
        // Column-major walk over a row-major buffer.
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t i = 0; i < n; ++i) y[j * n + i] = x[i * n + j];
        detail::do_not_optimize(y[1]);
      });
      break;
    }
    case ProbeKind::list_creation: {
      const auto n = static_cast<std::size_t>(spec.param("elements", 1000));
      result = nanos([&] {
        std::list<std::size_t> items;
        for (std::size_t i = 0; i < n; ++i) items.push_back(i);
        detail::do_not_optimize(items.back());
      });
      break;
    }
    case ProbeKind::mem_fill: {
      const auto bytes = static_cast<std::size_t>(spec.param("bytes", 1 << 20));
      result = nanos([&] {
        std::vector<unsigned char> block(bytes);
        std::fill(block.begin(), block.end(), static_cast<unsigned char>(0xA5));
        detail::do_not_optimize(block[bytes / 2]);
      });
      break;
    }
    case ProbeKind::file_read: {
      const auto bytes = static_cast<std::size_t>(spec.param("bytes", 500 * 1024));
      const auto dir = detail::ensure_scratch(options.scratch);
      const auto path = dir / ("table_" + std::to_string(bytes) + ".csv");
      std::error_code ec;
      if (!std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) != bytes) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::ScratchIOError, "cannot create " + path.string());
        std::string row = "1234,5678,9012,3456\n";
        for (std::size_t written = 0; written < bytes; written += row.size())
          out.write(row.data(), static_cast<std::streamsize>(std::min(row.size(), bytes - written)));
      }
      result = nanos([&] {
        std::ifstream in(path);
        std::string line;
        std::size_t rows = 0;
        while (std::getline(in, line)) ++rows;
        detail::do_not_optimize(rows);
      });
      break;
    }
    case ProbeKind::storage_read: {
      const auto bytes = static_cast<std::size_t>(spec.param("bytes", 100 * 1024));
      const auto path = detail::ensure_scratch(options.scratch) / "storage_read.bin";
      detail::write_file_synced(path, bytes, 0x5A);
      result = nanos([&] {
        auto n = detail::read_file(path, true);
        detail::do_not_optimize(n);
      });
      break;
    }
    case ProbeKind::storage_write: {
      const auto bytes = static_cast<std::size_t>(spec.param("bytes", 100 * 1024));
      const auto path = detail::ensure_scratch(options.scratch) / "storage_write.bin";
      result = nanos([&] { detail::write_file_synced(path, bytes, 0xC3); });
      break;
    }
  }
  // A workload shorter than one tick still took nonzero time.
  return std::max(result, 1.0);
}

/// Best-effort core temperature in degrees Celsius.
inline std::optional<double> read_temperature(
    const std::filesystem::path& zone = "/sys/class/thermal/thermal_zone0/temp") {
  std::ifstream in(zone);
  double millidegrees = 0;
  if (!(in >> millidegrees)) return std::nullopt;
  return millidegrees / 1000.0;
}

enum class FailurePolicy { abort, skip };

using ProbeRunner = std::function<double(const ProbeSpec&)>;

struct CollectOptions {
  std::string device_id = "local";
  FailurePolicy policy = FailurePolicy::abort;
  ProbeRunner runner;  // defaults to run_probe with the default clock pair
  std::function<std::optional<double>()> temperature = [] { return read_temperature(); };
  std::function<void(const FingerprintSample&)> on_sample;
};

/// Collects `n` samples; probes within a sample run in schema order.
inline std::vector<FingerprintSample> collect(const FeatureSchema& schema, std::size_t n, double interval,
                                              CollectOptions options = {}) {
  require(n >= 1, Errc::InvalidArgument, "n must be >= 1");
  require(interval >= 0, Errc::InvalidArgument, "interval must be >= 0");
  schema.validate();
  if (!options.runner) {
    const auto clocks = default_clock_pair();
    options.runner = [clocks](const ProbeSpec& p) { return run_probe(p, clocks); };
  }

  std::vector<FingerprintSample> out;
  out.reserve(n);
  double last_ts = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && interval > 0) std::this_thread::sleep_for(std::chrono::duration<double>(interval));
    FingerprintSample s;
    s.device_id = options.device_id;
    const auto now = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    s.timestamp = std::max(now, last_ts);
    last_ts = s.timestamp;
    s.temperature = options.temperature ? options.temperature() : std::nullopt;
    s.features.reserve(schema.size());
    for (const auto& feature : schema.features) {
      try {
        s.features.push_back(options.runner(feature.probe));
      } catch (const Error&) {
        if (options.policy == FailurePolicy::abort) throw;
        s.features.push_back(kMissing);
      }
    }
    if (options.on_sample) options.on_sample(s);
    out.push_back(std::move(s));
  }
  return out;
}

/// Handoff between the collecting thread and a sender task.
class SampleQueue {
 public:
  void push(FingerprintSample sample) {
    {
      std::lock_guard lock(mutex_);
      items_.push_back(std::move(sample));
    }
    cv_.notify_one();
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  /// Blocks until a sample is available; nullopt once closed and drained.
  std::optional<FingerprintSample> pop() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    auto s = std::move(items_.front());
    items_.pop_front();
    return s;
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<FingerprintSample> items_;
  bool closed_ = false;
};

enum class ControlStatus { applied, unsupported, denied };

inline std::string to_string(ControlStatus s) {
  switch (s) {
    case ControlStatus::applied: return "applied";
    case ControlStatus::unsupported: return "unsupported";
    case ControlStatus::denied: return "denied";
  }
  return "unknown";
}

struct StabilityConfig {
  int core = -1;       // -1: the core the thread is currently running on
  int nice_value = -10;
  std::filesystem::path governor_path = "/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor";
  std::filesystem::path aslr_path = "/proc/sys/kernel/randomize_va_space";
};

struct StabilityReport {
  ControlStatus pinning = ControlStatus::unsupported;
  int pinned_core = -1;
  ControlStatus priority = ControlStatus::unsupported;
  std::optional<std::string> governor;  // recorded, never changed
  std::optional<std::string> aslr;      // "disabled", "partial" or "full"

  json to_json() const {
    return json{{"pinning", to_string(pinning)},
                {"pinned_core", pinned_core},
                {"priority", to_string(priority)},
                {"frequency_governor", governor ? json(*governor) : json("unsupported")},
                {"aslr", aslr ? json(*aslr) : json("unsupported")}};
  }
};

/// Never throws: controls that cannot be applied are reported instead.
inline StabilityReport apply_stability_controls(const StabilityConfig& config = {}) {
  StabilityReport report;

  int core = config.core >= 0 ? config.core : sched_getcpu();
  if (core >= 0) {
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(core, &set);
    if (sched_setaffinity(0, sizeof(set), &set) == 0) {
      report.pinning = ControlStatus::applied;
      report.pinned_core = core;
    } else {
      report.pinning = (errno == EPERM) ? ControlStatus::denied : ControlStatus::unsupported;
    }
  }

  errno = 0;
  if (setpriority(PRIO_PROCESS, 0, config.nice_value) == 0)
    report.priority = ControlStatus::applied;
  else
    report.priority = (errno == EACCES || errno == EPERM) ? ControlStatus::denied : ControlStatus::unsupported;

  if (std::ifstream in(config.governor_path); in) {
    std::string g;
    if (in >> g) report.governor = g;
  }
  if (std::ifstream in(config.aslr_path); in) {
    int level = -1;
    if (in >> level) report.aslr = level == 0 ? "disabled" : level == 1 ? "partial" : "full";
  }
  return report;
}

}  // namespace fingerforge::bench

#endif  // FINGERFORGE_BENCH_HPP
