#include <filesystem>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>

#include "fingerforge/service.hpp"
#include "fingerforge/simulator.hpp"

using namespace fingerforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("FINGERFORGE_SCRATCH");
  auto dir = fs::path(env ? env : fs::temp_directory_path().string()) / ("service_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = scratch(::testing::UnitTest::GetInstance()->current_test_info()->name());
    store_ = std::make_shared<registry::Store>(root_ / "store");
    FeatureSchema schema;
    for (int i = 0; i < 4; ++i)
      schema.features.push_back(FeatureSpec{"f" + std::to_string(i), ProbeSpec{ProbeKind::fibonacci, {{"n", 10}}}, "ns"});
    store_->register_schema(schema);
    fs::create_directories(root_ / "report");
    std::ofstream(root_ / "report" / "report.json") << R"({"devices":["a","b"]})";
    service_ = std::make_unique<service::Service>(store_, root_ / "report");
    port_ = service_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { service_->listen_after_bind(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    for (int i = 0; i < 200 && !service_->running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));

    auto tmpl = std::make_shared<sim::DeviceModelTemplate>(sim::synthetic_template("svc", 4, 8));
    const auto pop = sim::gen_population(tmpl, 2, sim::Variation{0.001, 5.0}, 9);
    for (const auto& p : pop) streams_.push_back(sim::gen_samples(p, 300, sim::constant_trace(300)));
  }

  void TearDown() override {
    service_->stop();
    thread_.join();
  }

  httplib::Headers headers(const char* version = service::kProtocolVersion) {
    return {{service::kProtocolHeader, version}};
  }

  /// Registers an untrained model for svc-00 with tau covering its training windows.
  std::string register_device() {
    pipeline::PipelineConfig pc;
    pc.window_length = 5;
    pc.landmarks = 100;
    prep_ = pipeline::prepare_device("svc-00", streams_[0], pc);
    ae::TransformerConfig c;
    c.d_model = 4;
    c.num_heads = 2;
    c.dff = 4;
    c.window = 5;
    c.features = 4;
    c.epochs = 0;
    c.batch_size = 1;
    auto model = ae::AutoencoderModel::initialize(c);
    model.set_threshold(authd::calibrate_threshold(model, prep_.train.windows).tau);
    const auto bytes = ae::serialize(model);
    const auto body = service::registration_body(bytes, prep_.map, authd::derive_policy("svc-00", 0.9), 5);
    const auto res = client_->Put("/v1/models/svc-00", headers(), body.dump(), "application/json");
    EXPECT_TRUE(res);
    if (res) EXPECT_EQ(res->status, 200) << res->body;
    return bytes;
  }

  fs::path root_;
  std::shared_ptr<registry::Store> store_;
  std::unique_ptr<service::Service> service_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  int port_ = 0;
  std::vector<std::vector<FingerprintSample>> streams_;
  pipeline::PreparedDevice prep_;
};

}  // namespace

TEST_F(ServiceTest, IngestReportsPerSampleReasons) {
  std::vector<FingerprintSample> batch(streams_[0].begin(), streams_[0].begin() + 10);
  batch[4].features.resize(3);
  batch[9].features.resize(7, 1.0);
  const json body{{"device_id", "svc-00"}, {"schema_version", 1}, {"samples", service::samples_to(batch)}};
  const auto res = client_->Post("/v1/ingest", headers(), body.dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const auto ack = json::parse(res->body);
  EXPECT_EQ(ack["accepted"], 8);
  EXPECT_EQ(ack["rejected"], 2);
  EXPECT_EQ(ack["reasons"][0]["index"], 4);
  EXPECT_EQ(ack["reasons"][1]["index"], 9);
  EXPECT_EQ(res->get_header_value(service::kProtocolHeader), service::kProtocolVersion);
  EXPECT_EQ(store_->samples("svc-00").size(), 8u);
}

TEST_F(ServiceTest, IngestErrorsMapToStatuses) {
  const json empty{{"device_id", "svc-00"}, {"samples", json::array()}};
  auto res = client_->Post("/v1/ingest", headers(), empty.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["error"], "EmptyBatch");

  const json unknown{{"device_id", "svc-00"}, {"schema_version", 7}, {"samples", service::samples_to({streams_[0][0]})}};
  res = client_->Post("/v1/ingest", headers(), unknown.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 422);
  EXPECT_EQ(json::parse(res->body)["error"], "UnknownSchemaVersion");

  res = client_->Post("/v1/ingest", headers("2"), empty.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);

  res = client_->Post("/v1/ingest", headers(), "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
}

TEST_F(ServiceTest, ModelRoundTripOverHttp) {
  const auto bytes = register_device();
  const auto res = client_->Get("/v1/models/svc-00", headers());
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(res->body, bytes);
  EXPECT_EQ(res->get_header_value(service::kHashHeader), registry::sha256_hex(bytes));

  const auto by_hash = client_->Get("/v1/models/svc-00?hash=" + registry::sha256_hex(bytes), headers());
  ASSERT_TRUE(by_hash);
  EXPECT_EQ(by_hash->body, res->body);

  const auto missing = client_->Get("/v1/models/nobody", headers());
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
}

TEST_F(ServiceTest, TamperedUploadIsConflict) {
  pipeline::PipelineConfig pc;
  pc.window_length = 5;
  pc.landmarks = 100;
  const auto prep = pipeline::prepare_device("svc-00", streams_[0], pc);
  ae::TransformerConfig c;
  c.d_model = 4;
  c.num_heads = 2;
  c.dff = 4;
  c.window = 5;
  c.features = 4;
  auto model = ae::AutoencoderModel::initialize(c);
  model.set_threshold(1.0);
  auto bytes = ae::serialize(model);
  auto body = service::registration_body(bytes, prep.map, authd::derive_policy("svc-00", 0.9), 5);
  bytes[bytes.size() - 3] ^= 0x10;
  body["model"] = registry::base64_encode(bytes);
  const auto res = client_->Put("/v1/models/svc-00", headers(), body.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(json::parse(res->body)["error"], "HashMismatch");
}

TEST_F(ServiceTest, AuthenticateMatchesOfflineVerdict) {
  register_device();
  std::vector<FingerprintSample> batch(streams_[0].end() - 50, streams_[0].end());
  const json body{{"device_id", "svc-00"}, {"samples", service::samples_to(batch)}};
  const auto res = client_->Post("/v1/authenticate", headers(), body.dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const auto verdict = json::parse(res->body).get<authd::AuthVerdict>();

  const auto active = store_->load_active("svc-00");
  const auto windows =
      pipeline::normalize_and_window(active.map, batch, active.entry.pipeline_config(), pipeline::SplitTag::test, "svc-00");
  const auto offline = authd::authenticate(active.entry.policy, active.model.get(), active.tau, windows.windows);
  EXPECT_EQ(verdict.acceptance_rate, offline.acceptance_rate);
  EXPECT_EQ(verdict.decision, offline.decision);
  EXPECT_EQ(verdict.windows, 10u);

  const auto last = store_->events().read().back();
  EXPECT_EQ(last["type"], verdict.decision == authd::Decision::authenticated ? "allow" : "deny");
}

TEST_F(ServiceTest, AuthenticateErrors) {
  const json unknown{{"device_id", "nobody"}, {"samples", service::samples_to({streams_[0].begin(), streams_[0].begin() + 10})}};
  auto res = client_->Post("/v1/authenticate", headers(), unknown.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["error"], "MissingModel");
  EXPECT_TRUE(store_->events().read().empty());

  register_device();
  const json shorty{{"device_id", "svc-00"}, {"samples", service::samples_to({streams_[0].begin(), streams_[0].begin() + 3})}};
  res = client_->Post("/v1/authenticate", headers(), shorty.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["error"], "BatchTooShort");
}

TEST_F(ServiceTest, ReportEndpointServesBundle) {
  const auto res = client_->Get("/v1/report", headers());
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["devices"].size(), 2u);
}
