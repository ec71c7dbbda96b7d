#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fingerforge/sample.hpp"

using namespace fingerforge;

TEST(Schema, DefaultHas215FeaturesInFiveGroups) {
  const auto s = default_schema();
  ASSERT_EQ(s.size(), 215u);
  std::size_t cpu = 0, kernel = 0, mem = 0, read = 0, write = 0;
  for (const auto& f : s.features) {
    const auto& n = f.name;
    if (n.rfind("cpu_", 0) == 0) ++cpu;
    else if (n.rfind("kernel_", 0) == 0) ++kernel;
    else if (n.rfind("mem_", 0) == 0) ++mem;
    else if (n.rfind("storage_read_", 0) == 0) ++read;
    else if (n.rfind("storage_write_", 0) == 0) ++write;
  }
  EXPECT_EQ(cpu, 9u);
  EXPECT_EQ(kernel, 3u);
  EXPECT_EQ(mem, 3u);
  EXPECT_EQ(read, 100u);
  EXPECT_EQ(write, 100u);
  EXPECT_EQ(s.features.front().name, "cpu_sleep_1s");
  EXPECT_EQ(s.features.back().name, "storage_write_99");
  EXPECT_NO_THROW(s.validate());
}

TEST(Schema, ScaledSchemaKeepsShape) {
  const auto s = default_schema({0.001, 0.001});
  EXPECT_EQ(s.size(), 215u);
  EXPECT_EQ(s.names(), default_schema().names());
  EXPECT_NEAR(s.features[0].probe.param("seconds", 0), 0.001, 1e-15);
}

TEST(Schema, JsonRoundTripAndDuplicateNames) {
  const auto s = default_schema();
  const auto back = json(s).get<FeatureSchema>();
  EXPECT_EQ(back.names(), s.names());
  EXPECT_EQ(back.features[7].probe.kind, ProbeKind::random_fill);
  auto dup = s;
  dup.features[1].name = dup.features[0].name;
  EXPECT_THROW(dup.validate(), Error);
}

TEST(ProbeSpec, ValidationRules) {
  EXPECT_NO_THROW((ProbeSpec{ProbeKind::cpu_sleep, {{"seconds", 0.0}}}.validate()));
  EXPECT_THROW((ProbeSpec{ProbeKind::cpu_sleep, {{"seconds", -1.0}}}.validate()), Error);
  EXPECT_THROW((ProbeSpec{ProbeKind::string_hash, {{"repetitions", 0.0}}}.validate()), Error);
  EXPECT_THROW((ProbeSpec{ProbeKind::mem_fill, {{"bytes", 200.0 * 1024 * 1024}}}.validate()), Error);
  EXPECT_NO_THROW((ProbeSpec{ProbeKind::mem_fill, {{"bytes", 200.0 * 1024 * 1024}}}.validate(1e9)));
  EXPECT_FALSE(parse_probe_kind("warp_drive").has_value());
  EXPECT_EQ(parse_probe_kind("storage_write"), ProbeKind::storage_write);
  EXPECT_EQ(probe_kind_name(ProbeKind::fibonacci), "fibonacci");
}

TEST(SampleIo, JsonlRoundTripIsBitIdentical) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1e7);
  std::vector<FingerprintSample> samples;
  for (int i = 0; i < 50; ++i) {
    FingerprintSample s{"dev", 1.6e9 + i * 0.1, i % 3 ? std::optional<double>(40 + u(rng) * 1e-6) : std::nullopt, {}};
    for (int f = 0; f < 7; ++f) s.features.push_back(u(rng) / 3.0);
    if (i % 10 == 4) s.features[2] = kMissing;
    samples.push_back(s);
  }
  std::stringstream buf;
  write_jsonl(buf, samples);
  const auto back = read_jsonl(buf);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(back[i].timestamp, samples[i].timestamp);
    EXPECT_EQ(back[i].temperature, samples[i].temperature);
    for (std::size_t f = 0; f < 7; ++f) {
      if (std::isnan(samples[i].features[f]))
        EXPECT_TRUE(std::isnan(back[i].features[f]));
      else
        EXPECT_EQ(back[i].features[f], samples[i].features[f]);
    }
  }
  EXPECT_NE(buf.str().find("null"), std::string::npos);
}

TEST(SampleIo, CsvHasHeaderOfFeatureNames) {
  std::stringstream out;
  write_csv(out, {"a", "b"}, {FingerprintSample{"d", 1.5, std::nullopt, {1.0, kMissing}}});
  std::string header, row;
  std::getline(out, header);
  std::getline(out, row);
  EXPECT_EQ(header, "device_id,timestamp,temperature,a,b");
  EXPECT_EQ(row, "d,1.5,,1,");
}

TEST(SampleIo, ValidateSampleReasons) {
  FingerprintSample s{"d", 1.0, std::nullopt, {1.0, 2.0}};
  EXPECT_TRUE(validate_sample(s, 2).empty());
  EXPECT_FALSE(validate_sample(s, 3).empty());
  s.features[0] = -1;
  EXPECT_FALSE(validate_sample(s, 2).empty());
  EXPECT_THROW(sample_from_json(json{{"device_id", "d"}, {"timestamp", 1}, {"features", {"x"}}}), Error);
}
