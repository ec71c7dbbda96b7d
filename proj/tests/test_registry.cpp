#include <filesystem>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>

#include "fingerforge/registry.hpp"
#include "fingerforge/search.hpp"
#include "fingerforge/simulator.hpp"

using namespace fingerforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("FINGERFORGE_SCRATCH");
  auto dir = fs::path(env ? env : fs::temp_directory_path().string()) / ("registry_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

FeatureSchema small_schema(std::size_t f, int version = 1) {
  FeatureSchema s;
  s.schema_version = version;
  for (std::size_t i = 0; i < f; ++i)
    s.features.push_back(FeatureSpec{"f" + std::to_string(i), ProbeSpec{ProbeKind::fibonacci, {{"n", 10}}}, "ns"});
  return s;
}

// Two devices of one family, 6 features, a small trained model for "dev-00".
struct World {
  std::vector<std::vector<FingerprintSample>> streams, fresh;
  pipeline::PipelineConfig config;
  pipeline::PreparedDevice prep;
  std::shared_ptr<ae::AutoencoderModel> model;
  authd::AuthPolicy policy;
};

const World& world() {
  static const World w = [] {
    World w;
    auto tmpl = std::make_shared<sim::DeviceModelTemplate>(sim::synthetic_template("dev", 6, 3));
    const auto pop = sim::gen_population(tmpl, 2, sim::Variation{0.001, 5.0}, 4);
    for (auto p : pop) {
      w.streams.push_back(sim::gen_samples(p, 600, sim::constant_trace(600)));
      p.seed ^= 99;
      w.fresh.push_back(sim::gen_samples(p, 100, sim::constant_trace(100)));
    }
    w.config.window_length = 5;
    w.config.landmarks = 200;
    w.prep = pipeline::prepare_device("dev-00", w.streams[0], w.config);
    ae::TransformerConfig c;
    c.d_model = 8;
    c.num_heads = 2;
    c.dff = 16;
    c.window = 5;
    c.features = 6;
    c.epochs = 10;
    c.batch_size = 8;
    c.learning_rate = 3e-3;
    const auto r = search::grid_search(w.prep.train.windows, w.prep.val.windows, {c});
    w.model = r.model;
    w.policy = authd::derive_policy("dev-00", r.best.val_tpr);
    return w;
  }();
  return w;
}

registry::RegistryEntry entry_for(const World& w) {
  registry::RegistryEntry e;
  e.device_id = "dev-00";
  e.policy = w.policy;
  e.window_length = 5;
  return e;
}

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return Errc::InvalidArgument;
}

}  // namespace

TEST(Hash, Sha256KnownVectors) {
  EXPECT_EQ(registry::sha256_hex(std::string("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(registry::sha256_hex(std::string("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hash, Base64RoundTrip) {
  for (std::size_t n = 0; n < 20; ++n) {
    std::string bytes(n, '\0');
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<char>(i * 37 + 5);
    EXPECT_EQ(registry::base64_decode(registry::base64_encode(bytes)), bytes) << n;
  }
  EXPECT_EQ(registry::base64_encode("Man"), "TWFu");
}

TEST(Ingest, ValidBatchAccepted) {
  registry::Store store(scratch("ingest_ok"));
  store.register_schema(small_schema(6));
  registry::IngestBatch b{"dev-00", 1, {world().streams[0].begin(), world().streams[0].begin() + 10}, 0, "test"};
  const auto ack = store.ingest(b);
  EXPECT_EQ(ack.accepted, 10u);
  EXPECT_EQ(ack.rejected, 0u);
  EXPECT_EQ(store.samples("dev-00").size(), 10u);
}

TEST(Ingest, MixedBatchRejectsIndividually) {
  registry::Store store(scratch("ingest_mixed"));
  store.register_schema(small_schema(6));
  registry::IngestBatch b{"dev-00", 1, {world().streams[0].begin(), world().streams[0].begin() + 10}, 0, "test"};
  b.samples[2].features.pop_back();
  b.samples[7].features.push_back(1.0);
  const auto ack = store.ingest(b);
  EXPECT_EQ(ack.accepted, 8u);
  EXPECT_EQ(ack.rejected, 2u);
  ASSERT_EQ(ack.reasons.size(), 2u);
  // Independent oracle: length check against the schema.
  for (const auto& [index, reason] : ack.reasons) {
    EXPECT_NE(b.samples[index].features.size(), 6u);
    EXPECT_FALSE(reason.empty());
  }
  EXPECT_EQ(ack.reasons[0].first, 2u);
  EXPECT_EQ(ack.reasons[1].first, 7u);
}

TEST(Ingest, ErrorsForEmptyAndUnknownSchemaAndFullDisk) {
  registry::Store store(scratch("ingest_err"));
  store.register_schema(small_schema(6));
  EXPECT_EQ(code_of([&] { store.ingest({"dev-00", 1, {}, 0, ""}); }), Errc::EmptyBatch);
  EXPECT_EQ(code_of([&] { store.ingest({"dev-00", 9, {world().streams[0][0]}, 0, ""}); }), Errc::UnknownSchemaVersion);
  registry::Store full(scratch("ingest_full"), registry::StoreOptions{std::numeric_limits<std::uintmax_t>::max()});
  full.register_schema(small_schema(6));
  EXPECT_EQ(code_of([&] { full.ingest({"dev-00", 1, {world().streams[0][0]}, 0, ""}); }), Errc::StorageFull);
}

TEST(Ingest, AppendOnlyUnderConcurrency) {
  registry::Store store(scratch("ingest_conc"));
  store.register_schema(small_schema(6));
  const auto& src = world().streams[0];
  const auto first = store.ingest({"dev-00", 1, {src.begin(), src.begin() + 5}, 0, ""});
  ASSERT_EQ(first.accepted, 5u);
  const auto before = store.samples("dev-00");
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int k = 0; k < 10; ++k) {
        const auto off = static_cast<std::size_t>(5 + t * 50 + k * 5);
        store.ingest({"dev-00", 1, {src.begin() + static_cast<long>(off), src.begin() + static_cast<long>(off + 5)}, 0, ""});
      }
    });
  for (auto& th : threads) th.join();
  const auto after = store.samples("dev-00");
  ASSERT_EQ(after.size(), 205u);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(after[i].timestamp, before[i].timestamp);
  // Each 5-sample batch stays contiguous.
  for (std::size_t i = 5; i < after.size(); i += 5)
    for (std::size_t k = 1; k < 5; ++k) EXPECT_EQ(after[i + k].timestamp, after[i].timestamp + 60.0 * static_cast<double>(k));
}

TEST(Models, RegisterThenFetchIsByteIdentical) {
  const auto& w = world();
  registry::Store store(scratch("models_rt"));
  const auto bytes = ae::serialize(*w.model);
  const auto e = store.register_model(entry_for(w), bytes, w.prep.map);
  EXPECT_EQ(store.model_bytes("dev-00"), bytes);
  EXPECT_EQ(e.model_hash, registry::sha256_hex(bytes));
  const auto active = store.load_active("dev-00");
  EXPECT_EQ(active.tau, *w.model->threshold());
  EXPECT_EQ(active.map.landmarks, w.prep.map.landmarks);
}

TEST(Models, ReRegisterArchivesPrevious) {
  const auto& w = world();
  registry::Store store(scratch("models_arch"));
  const auto first = ae::serialize(*w.model);
  auto other = *w.model;
  other.set_threshold(*w.model->threshold() * 2);
  const auto second = ae::serialize(other);
  const auto e1 = store.register_model(entry_for(w), first, w.prep.map);
  const auto e2 = store.register_model(entry_for(w), second, w.prep.map);
  EXPECT_NE(e1.model_hash, e2.model_hash);
  EXPECT_EQ(store.active_entry("dev-00")->model_hash, e2.model_hash);
  const auto hist = store.history("dev-00");
  ASSERT_EQ(hist.size(), 1u);
  EXPECT_EQ(hist[0].model_hash, e1.model_hash);
  EXPECT_EQ(store.model_bytes("dev-00", e1.model_hash), first);
  EXPECT_EQ(store.model_bytes("dev-00"), second);
  std::size_t registrations = 0;
  for (const auto& ev : store.events().read()) registrations += ev["type"] == "registration";
  EXPECT_EQ(registrations, 2u);
}

TEST(Models, TamperingIsDetected) {
  const auto& w = world();
  registry::Store store(scratch("models_tamper"));
  auto bytes = ae::serialize(*w.model);
  auto entry = entry_for(w);
  entry.model_hash = registry::sha256_hex(bytes);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_NE(registry::sha256_hex(flipped), entry.model_hash);
  EXPECT_EQ(code_of([&] { store.register_model(entry, flipped, w.prep.map); }), Errc::HashMismatch);

  const auto e = store.register_model(entry, bytes, w.prep.map);
  const auto blob = store.root() / "devices" / "dev-00" / "blobs" / (e.model_hash + ".ffae");
  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_EQ(code_of([&] { store.model_bytes("dev-00"); }), Errc::HashMismatch);
  EXPECT_EQ(code_of([&] { store.load_active("dev-00"); }), Errc::HashMismatch);
}

TEST(Models, CorruptContainerRejected) {
  const auto& w = world();
  registry::Store store(scratch("models_corrupt"));
  const std::string junk = "notamodel";
  EXPECT_EQ(code_of([&] { store.register_model(entry_for(w), junk, w.prep.map); }), Errc::CorruptModel);
  EXPECT_FALSE(store.active_entry("dev-00").has_value());
}

TEST(Endpoint, LegitimateAllowedImpostorDeniedUnknownMissing) {
  const auto& w = world();
  registry::Store store(scratch("endpoint"));
  store.register_model(entry_for(w), ae::serialize(*w.model), w.prep.map);
  authd::AuditLog audit(store.root() / "audit.jsonl");

  const auto legit = store.authenticate("dev-00", w.fresh[0], &audit);
  const auto impostor = store.authenticate("dev-00", w.fresh[1], &audit);
  EXPECT_EQ(legit.decision, authd::Decision::authenticated) << legit.acceptance_rate << " vs " << legit.theta;
  EXPECT_EQ(impostor.decision, authd::Decision::rejected) << impostor.acceptance_rate;

  // No server-side drift: the offline path gives the same verdict.
  const auto windows = pipeline::normalize_and_window(w.prep.map, w.fresh[0], w.config, pipeline::SplitTag::test, "dev-00");
  const auto offline = authd::authenticate(w.policy, w.model.get(), *w.model->threshold(), windows.windows);
  EXPECT_EQ(offline.acceptance_rate, legit.acceptance_rate);
  EXPECT_EQ(offline.decision, legit.decision);

  const auto events_before = store.events().read().size();
  EXPECT_EQ(code_of([&] { store.authenticate("nobody", w.fresh[0]); }), Errc::MissingModel);
  EXPECT_EQ(store.events().read().size(), events_before);
  EXPECT_EQ(code_of([&] { store.authenticate("dev-00", {w.fresh[0].begin(), w.fresh[0].begin() + 4}); }),
            Errc::BatchTooShort);

  std::vector<std::string> decisions;
  for (const auto& ev : store.events().read())
    if (ev["type"] == "allow" || ev["type"] == "deny") decisions.push_back(ev["type"]);
  EXPECT_EQ(decisions, (std::vector<std::string>{"allow", "deny"}));
  EXPECT_EQ(audit.read().size(), 2u);
}
