#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>

#include <unistd.h>

#include "vpr/featureio.hpp"

using namespace vpr;
using namespace vpr::io;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = VPR_FIXTURE_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::InvalidArgument;
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / ("vprkit_io_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(FeatureFile, GoldenFixtureDecodes) {
  auto fm = read_feature(kFixtures / "feature_2x2x2.spfm");
  EXPECT_EQ(fm.channels, 2u);
  EXPECT_EQ(fm.height, 2u);
  EXPECT_EQ(fm.width, 2u);
  EXPECT_EQ(fm.values.data(), (std::vector<double>{0.5, 1.0, 1.5, 2.0, 0.0, 0.25, 3.0, 4.5}));
  EXPECT_FALSE(fm.cls.has_value());

  std::ostringstream out;
  write_feature(out, fm);
  EXPECT_EQ(out.str(), slurp(kFixtures / "feature_2x2x2.spfm"));
}

TEST(FeatureFile, ClsFixtureRoundTrips) {
  auto fm = read_feature(kFixtures / "feature_cls.spfm");
  ASSERT_TRUE(fm.cls.has_value());
  EXPECT_EQ(fm.cls->data(), (std::vector<double>{0.125, -1.0, 7.0}));
  std::ostringstream out;
  write_feature(out, fm);
  EXPECT_EQ(out.str(), slurp(kFixtures / "feature_cls.spfm"));
}

TEST(FeatureFile, CorruptedHeaders) {
  EXPECT_EQ(code_of([] { read_feature(kFixtures / "feature_bad_magic.spfm"); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([] { read_feature(kFixtures / "feature_bad_version.spfm"); }), ErrorCode::BadVersion);
  EXPECT_EQ(code_of([] { read_feature(kFixtures / "feature_truncated.spfm"); }), ErrorCode::Truncated);
  EXPECT_EQ(code_of([] { read_feature(kFixtures / "missing.spfm"); }), ErrorCode::Io);
}

TEST(FeatureFile, RandomMapRoundTripsBitwiseAtFloatPrecision) {
  std::mt19937_64 rng(5);
  Tensor t = Tensor::randn({3, 4, 5}, rng);
  for (auto& v : t.data()) v = static_cast<float>(v);
  auto fm = FeatureMap::make(t, Tensor::vector({1.0f, 2.5f, -0.75f}));
  std::stringstream ss;
  write_feature(ss, fm);
  auto back = read_feature(ss);
  EXPECT_EQ(back.values, fm.values);
  EXPECT_EQ(back.cls, fm.cls);
}

TEST(Checkpoint, GoldenFixtureDecodes) {
  auto ck = read_checkpoint(kFixtures / "checkpoint_stage1.spck");
  EXPECT_EQ(ck.stage, Stage::Stage1);
  EXPECT_EQ(ck.meta, R"({"kind":"fixture"})");
  ASSERT_EQ(ck.tensors.size(), 2u);
  EXPECT_EQ(ck.tensors[0].first, "head.w");
  EXPECT_EQ(ck.get("head.w").shape(), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(ck.get("head.w")[3], 1e-300);
  EXPECT_TRUE(std::signbit(ck.get("head.w")[5]));
  EXPECT_EQ(ck.get("head.b").data(), (std::vector<double>{0.1, 0.2, 0.3}));
  std::ostringstream out;
  write_checkpoint(out, ck);
  EXPECT_EQ(out.str(), slurp(kFixtures / "checkpoint_stage1.spck"));
}

TEST(Checkpoint, CorruptedHeaders) {
  EXPECT_EQ(code_of([] { read_checkpoint(kFixtures / "checkpoint_bad_magic.spck"); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([] { read_checkpoint(kFixtures / "checkpoint_bad_version.spck"); }), ErrorCode::BadVersion);
  EXPECT_EQ(code_of([] { read_checkpoint(kFixtures / "checkpoint_truncated.spck"); }), ErrorCode::Truncated);
  EXPECT_EQ(code_of([] { read_checkpoint(kFixtures / "checkpoint_bad_stage.spck"); }), ErrorCode::Parse);
}

TEST(Checkpoint, FileRoundTripIsBitwise) {
  std::mt19937_64 rng(2);
  Checkpoint ck;
  ck.stage = Stage::Stage2;
  ck.meta = R"({"head":"nvl"})";
  ck.tensors.emplace_back("a", Tensor::randn({4, 3}, rng));
  ck.tensors.emplace_back("b", Tensor::randn({7}, rng));
  const auto path = temp_dir() / "rt.spck";
  write_checkpoint(path, ck);
  EXPECT_EQ(read_checkpoint(path), ck);
  EXPECT_THROW(ck.get("nope"), Error);
}

TEST(Spdb, GoldenFixtureWithSidecar) {
  auto t = read_spdb(kFixtures / "db_small.spdb");
  EXPECT_EQ(t.count(), 3u);
  EXPECT_EQ(t.dim, 2u);
  EXPECT_EQ(t.rows, (std::vector<float>{0.6f, 0.8f, 0.0f, 1.0f, -1.0f, 0.0f}));
  ASSERT_EQ(t.meta.size(), 3u);
  EXPECT_EQ(t.meta[0].east, 10.0);
  EXPECT_FALSE(t.meta[0].frame.has_value());
  EXPECT_EQ(t.meta[1].frame, 5);
  EXPECT_EQ(t.meta[1].match_id, "m1");
  EXPECT_FALSE(t.meta[1].east.has_value());

  const auto dir = temp_dir();
  write_spdb(dir / "copy.spdb", t);
  EXPECT_EQ(slurp(dir / "copy.spdb"), slurp(kFixtures / "db_small.spdb"));
  EXPECT_EQ(read_spdb(dir / "copy.spdb"), t);
}

TEST(Spdb, CorruptedHeaders) {
  EXPECT_EQ(code_of([] { read_spdb(kFixtures / "db_bad_magic.spdb"); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([] { read_spdb(kFixtures / "db_truncated.spdb"); }), ErrorCode::Truncated);
}

TEST(Spdb, SidecarRowMismatchIsParseError) {
  const auto dir = temp_dir();
  DescriptorTable t;
  t.dim = 1;
  t.rows = {1.0f, -1.0f};
  write_spdb(dir / "two.spdb", t);
  std::ofstream(dir / "two.spdb.jsonl") << R"({"row":0,"image_id":"x"})" << '\n';
  EXPECT_EQ(code_of([&] { read_spdb(dir / "two.spdb"); }), ErrorCode::Parse);
}
