// fingerforge: bench | sim | pipeline | ae | authd | serve | experiment

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "fingerforge/authd.hpp"
#include "fingerforge/bench.hpp"
#include "fingerforge/experiment.hpp"
#include "fingerforge/pipeline.hpp"
#include "fingerforge/registry.hpp"
#include "fingerforge/search.hpp"
#include "fingerforge/service.hpp"
#include "fingerforge/simulator.hpp"
#include "fingerforge/transformer.hpp"

using namespace fingerforge;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Exit code for probe failures under the abort policy.
constexpr int kProbeErrorExit = 2;

json read_json(const fs::path& p) {
  std::ifstream in(p);
  require(in.good(), Errc::IOError, "cannot read " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  require(out.good(), Errc::IOError, "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

std::vector<double> parse_split(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  require(out.size() == 3, Errc::InvalidArgument, "--split needs three comma-separated fractions");
  return out;
}

/// Raw samples for one device: a JSON Lines file, or <dir>/<device>.jsonl.
std::vector<FingerprintSample> load_device_samples(const fs::path& in, const std::string& device) {
  if (fs::is_regular_file(in)) {
    auto all = read_jsonl(in);
    if (device.empty()) return all;
    std::vector<FingerprintSample> out;
    for (auto& s : all)
      if (s.device_id == device) out.push_back(std::move(s));
    return out;
  }
  const auto file = in / (device + ".jsonl");
  require(fs::exists(file), Errc::IOError, "no samples for " + device + " under " + in.string());
  return read_jsonl(file);
}

struct Globals {
  std::uint64_t seed = 1;
  std::string data_dir;
  fs::path data() const { return data_dir; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hardware-performance fingerprinting and device authentication"};
  app.require_subcommand(1);
  Globals g;
  const char* env_dir = std::getenv("FINGERFORGE_DATA_DIR");
  g.data_dir = env_dir && *env_dir ? env_dir : "fingerforge-data";
  app.add_option("--seed", g.seed, "Global seed")->capture_default_str();
  app.add_option("--data-dir", g.data_dir, "Data directory (env FINGERFORGE_DATA_DIR)")->capture_default_str();

  // ---- bench
  auto* bench_cmd = app.add_subcommand("bench", "Collect fingerprint samples on this machine");
  bench_cmd->require_subcommand(1);

  auto* collect = bench_cmd->add_subcommand("collect", "Collect N samples");
  std::string schema_file, out_path, csv_path, device_id = "local";
  std::size_t count = 1;
  double interval = 0.0, scale = 1.0;
  bool skip = false, stabilize = false;
  collect->add_option("--schema", schema_file, "Schema JSON (default: the 215-feature schema)");
  collect->add_option("--scale", scale, "Scale sleep and payload sizes of the default schema")->capture_default_str();
  collect->add_option("--count", count, "Number of samples")->required();
  collect->add_option("--interval", interval, "Seconds between samples")->required();
  collect->add_option("--out", out_path, "JSON Lines output")->required();
  collect->add_option("--csv", csv_path, "Also write a columnar CSV");
  collect->add_option("--device-id", device_id)->capture_default_str();
  collect->add_flag("--skip-failures", skip, "Mark failed probes missing instead of aborting");
  collect->add_flag("--stabilize", stabilize, "Apply best-effort stability controls first");

  auto* probe = bench_cmd->add_subcommand("probe", "Run a single probe");
  std::string kind;
  std::vector<std::string> params;
  probe->add_option("kind", kind, "Probe kind")->required();
  probe->add_option("--param", params, "k=v parameter (repeatable)");

  auto* stability = bench_cmd->add_subcommand("stability", "Apply stability controls and print the report");

  // ---- sim
  auto* sim_cmd = app.add_subcommand("sim", "Simulated device populations");
  sim_cmd->require_subcommand(1);
  auto* gen = sim_cmd->add_subcommand("generate", "Generate per-device JSON Lines files");
  std::string templates_file, devices_spec, sim_out;
  std::size_t samples = 1000;
  double bias_sigma = 1.0, skew_sigma = 0.001;
  bool constant_temp = false;
  gen->add_option("--templates", templates_file, "Templates JSON")->required();
  gen->add_option("--devices", devices_spec, "e.g. rpi4:3,rpi3:2")->required();
  gen->add_option("--samples", samples)->capture_default_str();
  gen->add_option("--out", sim_out)->required();
  gen->add_option("--bias-sigma", bias_sigma, "Per-feature bias in units of base noise")->capture_default_str();
  gen->add_option("--skew-sigma", skew_sigma)->capture_default_str();
  gen->add_flag("--constant-temperature", constant_temp);

  // ---- pipeline
  auto* pipe_cmd = app.add_subcommand("pipeline", "Cleaning, split, normalization, windowing");
  pipe_cmd->require_subcommand(1);
  auto* pipe_run = pipe_cmd->add_subcommand("run", "Prepare one device");
  std::string pipe_in, pipe_device, pipe_out, split_text = "0.7,0.1,0.2";
  std::size_t window_len = 20, stride = 0, landmarks = 1000;
  bool include_temp = false, robust = false;
  pipe_run->add_option("--in", pipe_in, "JSON Lines file or directory of <device>.jsonl")->required();
  pipe_run->add_option("--device", pipe_device)->required();
  pipe_run->add_option("--split", split_text)->capture_default_str();
  pipe_run->add_option("--window", window_len)->capture_default_str();
  pipe_run->add_option("--stride", stride, "0 means non-overlapping")->capture_default_str();
  pipe_run->add_option("--landmarks", landmarks)->capture_default_str();
  pipe_run->add_flag("--include-temperature", include_temp);
  pipe_run->add_flag("--robust-filter", robust);
  pipe_run->add_option("--out", pipe_out)->required();

  // ---- ae
  auto* ae_cmd = app.add_subcommand("ae", "Transformer autoencoder");
  ae_cmd->require_subcommand(1);
  ae::TransformerConfig tc;
  std::string ae_data, ae_out, grid_file;
  std::size_t budget = 24;
  auto add_model_flags = [&](CLI::App* c) {
    c->add_option("--d-model", tc.d_model)->capture_default_str();
    c->add_option("--heads", tc.num_heads)->capture_default_str();
    c->add_option("--dff", tc.dff)->capture_default_str();
    c->add_option("--layers", tc.num_layers)->capture_default_str();
    c->add_option("--epochs", tc.epochs)->capture_default_str();
    c->add_option("--batch", tc.batch_size)->capture_default_str();
    c->add_option("--lr", tc.learning_rate)->capture_default_str();
  };
  auto* ae_train = ae_cmd->add_subcommand("train", "Train on a pipeline output directory");
  ae_train->add_option("--data", ae_data, "Directory written by `pipeline run`")->required();
  ae_train->add_option("--out", ae_out, "Model container path")->required();
  add_model_flags(ae_train);
  auto* ae_search = ae_cmd->add_subcommand("search", "Grid search; keeps the best validation TPR");
  ae_search->add_option("--data", ae_data)->required();
  ae_search->add_option("--out", ae_out, "Output directory")->required();
  ae_search->add_option("--grid", grid_file, "Grid JSON (default: reference grid)");
  ae_search->add_option("--budget", budget, "Configurations to sample, 0 = all")->capture_default_str();
  add_model_flags(ae_search);
  auto* ae_grad = ae_cmd->add_subcommand("gradcheck", "Finite-difference gradient check");

  // ---- authd
  auto* authd_cmd = app.add_subcommand("authd", "Evaluation and verdicts");
  authd_cmd->require_subcommand(1);
  std::string models_dir, auth_data, auth_out, batch_file, audit_path;
  auto* evaluate = authd_cmd->add_subcommand("evaluate", "One-vs-all over trained devices");
  evaluate->add_option("--models", models_dir, "Directory of <device>/{model.ffae,map.json}")->required();
  evaluate->add_option("--data", auth_data, "Directory of <device>.jsonl raw samples")->required();
  evaluate->add_option("--out", auth_out)->required();
  evaluate->add_option("--window", window_len)->capture_default_str();
  evaluate->add_option("--stride", stride)->capture_default_str();
  auto* verdict = authd_cmd->add_subcommand("verdict", "Authenticate a batch against a device");
  std::string claimed;
  verdict->add_option("--device", claimed)->required();
  verdict->add_option("--batch", batch_file, "JSON Lines samples")->required();
  verdict->add_option("--models", models_dir)->required();
  verdict->add_option("--audit", audit_path, "Audit log (default <data-dir>/audit.jsonl)");
  verdict->add_option("--window", window_len)->capture_default_str();
  verdict->add_option("--stride", stride)->capture_default_str();

  // ---- serve
  auto* serve = app.add_subcommand("serve", "HTTP ingestion/registry/authentication service");
  std::string host = "127.0.0.1", report_dir;
  int port = 8080;
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();
  serve->add_option("--report", report_dir, "Report directory served at /v1/report");

  // ---- experiment
  auto* exp = app.add_subcommand("experiment", "Full chain from a config file");
  std::string exp_config, exp_out;
  exp->add_option("config", exp_config, "Experiment JSON")->required();
  exp->add_option("--out", exp_out, "Output directory (default <data-dir>/<name>)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*bench_cmd) {
      if (*collect) {
        const auto schema = schema_file.empty() ? default_schema({scale, scale}) : read_json(schema_file).get<FeatureSchema>();
        if (stabilize) std::cerr << bench::apply_stability_controls().to_json().dump() << '\n';
        bench::CollectOptions opt;
        opt.device_id = device_id;
        opt.policy = skip ? bench::FailurePolicy::skip : bench::FailurePolicy::abort;
        std::vector<FingerprintSample> out;
        try {
          out = bench::collect(schema, count, interval, opt);
        } catch (const Error& e) {
          std::cerr << "probe error: " << e.what() << '\n';
          return kProbeErrorExit;
        }
        write_jsonl(fs::path(out_path), out);
        if (!csv_path.empty()) {
          std::ofstream csv(csv_path);
          write_csv(csv, schema.names(), out);
        }
        std::cout << json{{"samples", out.size()}, {"features", schema.size()}, {"out", out_path}}.dump() << '\n';
      } else if (*probe) {
        const auto k = parse_probe_kind(kind);
        require(k.has_value(), Errc::InvalidArgument, "unknown probe kind " + kind);
        ProbeSpec spec{*k, {}};
        for (const auto& p : params) {
          const auto eq = p.find('=');
          require(eq != std::string::npos, Errc::InvalidArgument, "--param expects k=v");
          spec.params[p.substr(0, eq)] = std::stod(p.substr(eq + 1));
        }
        try {
          const double v = bench::run_probe(spec);
          std::cout << json{{"kind", kind}, {"measurement", v}}.dump() << '\n';
        } catch (const Error& e) {
          std::cerr << "probe error: " << e.what() << '\n';
          return kProbeErrorExit;
        }
      } else if (*stability) {
        std::cout << bench::apply_stability_controls().to_json().dump(2) << '\n';
      }
    } else if (*sim_cmd) {
      const auto templates = sim::templates_from_json(read_json(templates_file));
      std::map<std::string, std::shared_ptr<const sim::DeviceModelTemplate>> by_name;
      for (const auto& t : templates) by_name[t.model_name] = std::make_shared<sim::DeviceModelTemplate>(t);
      fs::create_directories(sim_out);
      json manifest = json::array();
      for (const auto& [name, k] : sim::parse_device_spec(devices_spec)) {
        require(by_name.count(name), Errc::InvalidArgument, "unknown template " + name);
        for (const auto& p : sim::gen_population(by_name[name], k, {skew_sigma, bias_sigma}, g.seed)) {
          const auto env = constant_temp ? sim::constant_trace(samples)
                                         : sim::ar1_trace(samples, g.seed ^ sim::detail::fnv1a(p.device_id));
          write_jsonl(fs::path(sim_out) / (p.device_id + ".jsonl"), sim::gen_samples(p, samples, env));
          manifest.push_back(json{{"device_id", p.device_id}, {"model", name}, {"skew", p.skew}, {"samples", samples}});
        }
      }
      write_json(fs::path(sim_out) / "manifest.json", manifest);
      std::cout << manifest.size() << " devices written to " << sim_out << '\n';
    } else if (*pipe_cmd) {
      pipeline::PipelineConfig pc;
      const auto fr = parse_split(split_text);
      pc.split.train = fr[0];
      pc.split.val = fr[1];
      pc.split.test = fr[2];
      pc.window_length = window_len;
      pc.stride = stride;
      pc.landmarks = landmarks;
      pc.include_temperature = include_temp;
      pc.clean.robust_filter = robust;
      const auto prep = pipeline::prepare_device(pipe_device, load_device_samples(pipe_in, pipe_device), pc);
      const fs::path out(pipe_out);
      pipeline::write_windows_csv(out / "train.csv", prep.train);
      pipeline::write_windows_csv(out / "val.csv", prep.val);
      pipeline::write_windows_csv(out / "test.csv", prep.test);
      write_json(out / "map.json", prep.map);
      write_json(out / "pipeline.json", json{{"device_id", pipe_device}, {"config", pc}, {"drops", prep.drops},
                                             {"windows", {prep.train.size(), prep.val.size(), prep.test.size()}},
                                             {"flagged_window_length", prep.train.flagged()}});
      std::cout << "train/val/test windows: " << prep.train.size() << '/' << prep.val.size() << '/' << prep.test.size()
                << '\n';
    } else if (*ae_cmd) {
      if (*ae_grad) {
        const auto cfg = ae::gradcheck_config();
        const auto model = ae::AutoencoderModel::initialize(cfg);
        std::mt19937_64 rng(g.seed);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        nn::Matrix w(cfg.window, cfg.features);
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = u(rng);
        const auto r = ae::grad_check(model, w);
        std::cout << json{{"max_relative", r.max_relative}, {"worst_tensor", r.worst_tensor}}.dump() << '\n';
        return r.max_relative < 1e-4 ? 0 : 1;
      }
      const fs::path data(ae_data);
      const auto train = pipeline::read_windows_csv(data / "train.csv").windows;
      const auto val = pipeline::read_windows_csv(data / "val.csv", pipeline::SplitTag::val).windows;
      require(!train.empty(), Errc::TooFewWindows, "no training windows in " + data.string());
      tc.window = static_cast<int>(train.front().rows());
      tc.features = static_cast<int>(train.front().cols());
      tc.seed = g.seed;
      if (*ae_train) {
        ae::AutoencoderModel model;
        ae::TrainOptions to;
        to.on_epoch = [](int e, double loss) { std::cerr << "epoch " << e << " loss " << loss << '\n'; };
        const double secs = authd::timed_seconds([&] { model = ae::train(train, tc, to); });
        const auto cal = authd::calibrate_threshold(model, train);
        model.set_threshold(cal.tau);
        json metrics{{"calibration", cal}, {"train_seconds", secs}};
        if (!val.empty()) metrics["val_tpr"] = authd::acceptance_rate(model, cal.tau, val);
        const auto bytes = ae::save(model, ae_out, metrics);
        std::cout << metrics.dump() << "\n" << bytes << " bytes -> " << ae_out << '\n';
      } else {
        const auto grid = grid_file.empty() ? search::SearchGrid::reference() : read_json(grid_file).get<search::SearchGrid>();
        search::SearchOptions so;
        so.budget = budget;
        so.seed = g.seed;
        const auto r = search::grid_search(train, val, search::enumerate(grid, tc), so);
        const fs::path out(ae_out);
        fs::create_directories(out);
        ae::save(*r.model, out / "model.ffae", json{{"calibration", r.calibration}, {"selected", r.best}});
        write_json(out / "search.json", r.log);
        std::cout << json{{"selected", r.best}}.dump(2) << '\n';
      }
    } else if (*authd_cmd) {
      pipeline::PipelineConfig pc;
      pc.window_length = window_len;
      pc.stride = stride;
      auto load_artifacts = [&](const std::string& id) {
        const fs::path dir = fs::path(models_dir) / id;
        auto model = std::make_shared<ae::AutoencoderModel>(ae::load(dir / "model.ffae"));
        require(model->threshold().has_value(), Errc::CorruptModel, "model for " + id + " has no threshold");
        const auto map = read_json(dir / "map.json").get<pipeline::QuantileMap>();
        return authd::DeviceArtifacts{id, model, map, *model->threshold()};
      };
      if (*evaluate) {
        std::vector<authd::DeviceArtifacts> devices;
        std::vector<std::vector<FingerprintSample>> tests;
        std::vector<std::string> ids;
        for (const auto& e : fs::directory_iterator(models_dir))
          if (e.is_directory() && fs::exists(e.path() / "model.ffae")) ids.push_back(e.path().filename().string());
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
          devices.push_back(load_artifacts(id));
          auto kept = pipeline::clean(load_device_samples(auth_data, id)).first;
          tests.push_back(pipeline::split(kept, pc.split).test);
        }
        const auto report = authd::one_vs_all(devices, tests, pc);
        authd::write_report(auth_out, report);
        std::cout << json{{"tpr", report.tpr_stats}, {"max_fpr", report.max_fpr_stats},
                          {"devices_authenticated", report.devices_authenticated}}
                         .dump()
                  << '\n';
      } else {
        const auto art = load_artifacts(claimed);
        const auto policy = read_json(fs::path(models_dir) / claimed / "policy.json").get<authd::AuthPolicy>();
        const auto batch = read_jsonl(fs::path(batch_file));
        require(batch.size() >= pc.window_length, Errc::BatchTooShort, "batch shorter than one window");
        const auto windows = pipeline::normalize_and_window(art.map, batch, pc, pipeline::SplitTag::test, claimed);
        if (windows.size() < authd::kDefaultBatchWindows)
          std::cerr << "warning: " << windows.size() << " windows; fewer than " << authd::kDefaultBatchWindows
                    << " widens verdict variance\n";
        authd::AuditLog audit(audit_path.empty() ? g.data() / "audit.jsonl" : fs::path(audit_path));
        const auto v = authd::authenticate(policy, art.model.get(), art.tau, windows.windows, &audit);
        std::cout << json(v).dump() << '\n';
        return v.decision == authd::Decision::authenticated ? 0 : 3;
      }
    } else if (*serve) {
      auto store = std::make_shared<registry::Store>(g.data() / "store");
      if (!fs::exists(store->root() / "schemas" / "1.json")) store->register_schema(default_schema());
      service::Service svc(store, report_dir);
      const int bound = svc.bind(host, port);
      std::cerr << "listening on " << host << ':' << bound << '\n';
      svc.listen_after_bind();
    } else if (*exp) {
      const auto cfg = experiment::load_config(exp_config);
      const fs::path out = exp_out.empty() ? g.data() / cfg.name : fs::path(exp_out);
      const auto r = experiment::run(cfg, out);
      std::size_t failed = 0;
      for (const auto& d : r.devices) failed += d.status != "ok";
      std::cout << json{{"out", out.string()},
                        {"devices", r.report.devices.size()},
                        {"failed_devices", failed},
                        {"devices_authenticated", r.report.devices_authenticated},
                        {"tpr", r.report.tpr_stats},
                        {"max_fpr", r.report.max_fpr_stats},
                        {"fixture_legitimate_accepted", r.fixture.all_legitimate_accepted()},
                        {"fixture_impostors_rejected", r.fixture.all_impostors_rejected()}}
                       .dump(2)
                << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
