#pragma once

// Deterministic synthetic place-recognition world. Every place has a latent
// prototype map; its images are noisy (optionally shifted) copies. Places sit
// on a square grid in UTM metres.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vpr/featureio.hpp"
#include "vpr/sla.hpp"
#include "vpr/training.hpp"

namespace vpr::synth {

struct WorldSpec {
  std::size_t n_places = 200;
  std::size_t imgs_per_place = 6;
  std::size_t channels = 32;
  std::size_t height = 4;
  std::size_t width = 4;
  double sigma = 0.1;           // intra-class noise
  double separation = 1.0;      // prototype scale
  std::uint64_t seed = 0;
  double origin_east = 500000.0;
  double origin_north = 4000000.0;
  double spacing = 50.0;        // metres between neighbouring places
  double noise_channel_fraction = 0.0;  // share of channels carrying only nuisance noise
  std::size_t max_shift = 0;    // circular horizontal shift, in locations
  // When positive, prototype locations are built from this many shared patch
  // types plus a place-specific perturbation of scale `separation`.
  std::size_t vocabulary = 0;

  void validate() const;
};

struct World {
  WorldSpec spec;
  std::vector<FeatureMap> maps;             // place-major
  std::vector<sla::GeoRecord> records;      // dataset G with place_id
  std::vector<std::int64_t> place_of;       // per image
  std::vector<std::size_t> noise_channels;  // ascending

  std::vector<sla::PlaceLabel> labels() const;
  io::RowMeta row_meta(std::size_t image) const;
};

/// Output does not depend on `threads`: each place draws from its own stream.
World generate(const WorldSpec& spec, int threads = 1);

/// Writes features/<image_id>.spfm, records.csv and labels.jsonl under `dir`.
void write_world(const World& world, const std::filesystem::path& dir);

/// Places [0, train_places) form the training set; for every other place the
/// first `queries_per_place` images are queries and the rest the database.
struct Split {
  train::TrainSet train;
  std::vector<FeatureMap> db;
  std::vector<io::RowMeta> db_meta;
  std::vector<FeatureMap> queries;
  std::vector<io::RowMeta> query_meta;
};

Split split(const World& world, std::size_t train_places, std::size_t queries_per_place);

}  // namespace vpr::synth
