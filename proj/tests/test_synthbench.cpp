#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "vpr/retrieval.hpp"
#include "vpr/synthbench.hpp"

using namespace vpr;
namespace fs = std::filesystem;

namespace {

double untrained_gem_recall(const synth::World& w) {
  auto s = synth::split(w, 0, 2);
  train::ModelSpec ms;
  ms.head = train::Head::Gem;
  ms.channels = w.spec.channels;
  ms.out_dim = w.spec.channels;
  auto model = train::Model::init(ms, {}, 1);
  auto db = retrieval::DescriptorDb::build(train::describe_all(model, s.db), s.db_meta);
  auto q = retrieval::DescriptorDb::build(train::describe_all(model, s.queries), s.query_meta);
  return retrieval::evaluate(db, q, retrieval::GroundTruth::geo(), {1}).recall.at(1);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Synth, DefaultWorldCounts) {
  synth::WorldSpec spec;
  auto w = synth::generate(spec);
  EXPECT_EQ(w.maps.size(), 1200u);
  EXPECT_EQ(w.records.size(), 1200u);
  EXPECT_EQ(w.maps[0].channels, 32u);
  EXPECT_EQ(w.maps[0].height, 4u);
  for (const auto& m : w.maps) {
    for (double v : m.values.data()) ASSERT_GE(v, 0.0);
  }
  EXPECT_EQ(w.place_of[6], 1);
  EXPECT_EQ(w.records[6].east, w.records[7].east);
  EXPECT_GT(std::hypot(w.records[0].east - w.records[6].east, w.records[0].north - w.records[6].north), 25.0);
  auto labels = w.labels();
  EXPECT_EQ(labels.size(), 1200u);
  EXPECT_EQ(labels[13].class_id, 2);
}

TEST(Synth, NoiselessPlacesAreIdenticalAndPerfectlyRetrieved) {
  synth::WorldSpec spec;
  spec.n_places = 40;
  spec.sigma = 0.0;
  auto w = synth::generate(spec);
  for (std::size_t p = 0; p < 40; ++p) {
    for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(w.maps[p * 6 + i].values, w.maps[p * 6].values);
  }
  EXPECT_EQ(untrained_gem_recall(w), 100.0);
}

TEST(Synth, DeterministicAcrossThreads) {
  synth::WorldSpec spec;
  spec.n_places = 30;
  spec.sigma = 0.3;
  spec.noise_channel_fraction = 0.5;
  spec.max_shift = 2;
  spec.vocabulary = 8;
  spec.seed = 11;
  auto a = synth::generate(spec, 1), b = synth::generate(spec, 4);
  ASSERT_EQ(a.maps.size(), b.maps.size());
  for (std::size_t i = 0; i < a.maps.size(); ++i) EXPECT_EQ(a.maps[i].values, b.maps[i].values);
  EXPECT_EQ(a.noise_channels, b.noise_channels);
  EXPECT_EQ(a.noise_channels.size(), 16u);
  spec.seed = 12;
  EXPECT_NE(synth::generate(spec).maps[0].values, a.maps[0].values);
}

TEST(Synth, SplitPartitionsPlaces) {
  synth::WorldSpec spec;
  spec.n_places = 10;
  auto w = synth::generate(spec);
  auto s = synth::split(w, 4, 2);
  EXPECT_EQ(s.train.maps.size(), 24u);
  EXPECT_EQ(s.queries.size(), 12u);
  EXPECT_EQ(s.db.size(), 24u);
  EXPECT_EQ(s.query_meta[0].match_id, s.db_meta[0].match_id);
  EXPECT_THROW(synth::split(w, 11, 2), Error);
}

TEST(Synth, InvalidSpecRejected) {
  synth::WorldSpec spec;
  spec.sigma = -1;
  EXPECT_THROW(synth::generate(spec), Error);
  spec = {};
  spec.max_shift = 4;
  EXPECT_THROW(synth::generate(spec), Error);
  spec = {};
  spec.noise_channel_fraction = 1.0;
  EXPECT_THROW(synth::generate(spec), Error);
}

TEST(Synth, WrittenWorldIsReadableAndStable) {
  synth::WorldSpec spec;
  spec.n_places = 3;
  spec.imgs_per_place = 2;
  auto w = synth::generate(spec);
  const auto base = fs::temp_directory_path() / ("vprkit_synth_" + std::to_string(::getpid()));
  synth::write_world(w, base / "a");
  synth::write_world(synth::generate(spec), base / "b");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(base / "a" / "features")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(base / "b" / "features" / e.path().filename()));
  }
  EXPECT_EQ(files, 6u);
  auto fm = io::read_feature(base / "a" / "features" / (w.records[3].image_id + ".spfm"));
  for (std::size_t i = 0; i < fm.values.size(); ++i) EXPECT_FLOAT_EQ(fm.values[i], w.maps[3].values[i]);
  auto records = sla::read_records((base / "a" / "records.csv").string());
  EXPECT_EQ(records.size(), 6u);
  std::ifstream lab(base / "a" / "labels.jsonl");
  EXPECT_EQ(sla::read_labels_jsonl(lab), w.labels());
  fs::remove_all(base);
}
