#include "vpr/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace vpr::synth {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kChannelStream = ~std::uint64_t{0};
constexpr std::uint64_t kVocabularyStream = ~std::uint64_t{1};

std::string image_id(std::size_t place, std::size_t img) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu_i%02zu", place, img);
  return buf;
}

}  // namespace

void WorldSpec::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrorCode::InvalidArgument, "world spec: " + msg);
  };
  need(n_places >= 1 && imgs_per_place >= 1, "needs at least one place and one image per place");
  need(channels >= 1 && height >= 1 && width >= 1, "feature maps need positive dimensions");
  need(sigma >= 0.0 && std::isfinite(sigma), "sigma must be >= 0");
  need(separation > 0.0 && std::isfinite(separation), "separation must be positive");
  need(spacing > 0.0, "spacing must be positive");
  need(noise_channel_fraction >= 0.0 && noise_channel_fraction < 1.0, "noise channel fraction must be in [0, 1)");
  need(max_shift < width, "max shift must be smaller than the map width");
}

World generate(const WorldSpec& spec, int threads) {
  spec.validate();
  World w;
  w.spec = spec;
  const std::size_t C = spec.channels, L = spec.height * spec.width, n_imgs = spec.n_places * spec.imgs_per_place;

  std::vector<std::size_t> perm(C);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto crng = stream(spec.seed, kChannelStream);
  std::shuffle(perm.begin(), perm.end(), crng);
  const auto n_noise = static_cast<std::size_t>(std::floor(spec.noise_channel_fraction * static_cast<double>(C)));
  w.noise_channels.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_noise));
  std::sort(w.noise_channels.begin(), w.noise_channels.end());
  std::vector<char> is_noise(C, 0);
  for (auto c : w.noise_channels) is_noise[c] = 1;

  std::vector<double> words(spec.vocabulary * C);
  {
    auto vrng = stream(spec.seed, kVocabularyStream);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : words) v = std::abs(normal(vrng));
  }

  w.maps.resize(n_imgs);
  w.records.resize(n_imgs);
  w.place_of.resize(n_imgs);
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.n_places))));

  parallel_for(spec.n_places, threads, [&](std::size_t b, std::size_t e) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t p = b; p < e; ++p) {
      auto rng = stream(spec.seed, p);
      std::vector<double> proto(C * L);
      if (spec.vocabulary == 0) {
        for (auto& v : proto) v = std::abs(normal(rng)) * spec.separation;
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, spec.vocabulary - 1);
        for (std::size_t loc = 0; loc < L; ++loc) {
          const double* word = &words[pick(rng) * C];
          for (std::size_t c = 0; c < C; ++c) {
            proto[c * L + loc] = std::max(0.0, word[c] + spec.separation * normal(rng));
          }
        }
      }
      const double east = spec.origin_east + static_cast<double>(p % cols) * spec.spacing;
      const double north = spec.origin_north + static_cast<double>(p / cols) * spec.spacing;
      for (std::size_t i = 0; i < spec.imgs_per_place; ++i) {
        std::size_t shift = 0;
        if (spec.max_shift > 0) {
          std::uniform_int_distribution<std::size_t> d(0, 2 * spec.max_shift);
          shift = (spec.width + d(rng) - spec.max_shift) % spec.width;
        }
        // Nuisance channels share one per-location factor, so they are
        // correlated with each other but carry no place information.
        std::vector<double> shared(L);
        for (auto& v : shared) v = normal(rng);
        Tensor values({C, spec.height, spec.width});
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t y = 0; y < spec.height; ++y) {
            for (std::size_t x = 0; x < spec.width; ++x) {
              const std::size_t loc = y * spec.width + x;
              double v;
              if (is_noise[c]) {
                v = spec.separation * std::abs(std::sqrt(0.5) * (shared[loc] + normal(rng)));
              } else {
                const std::size_t src = y * spec.width + (x + shift) % spec.width;
                v = std::max(0.0, proto[c * L + src] + spec.sigma * normal(rng));
              }
              values[c * L + loc] = v;
            }
          }
        }
        const std::size_t idx = p * spec.imgs_per_place + i;
        w.maps[idx] = FeatureMap::make(std::move(values));
        w.place_of[idx] = static_cast<std::int64_t>(p);
        sla::GeoRecord r;
        r.image_id = image_id(p, i);
        r.dataset = sla::Dataset::G;
        r.east = east;
        r.north = north;
        r.place_id = static_cast<std::int64_t>(p);
        w.records[idx] = std::move(r);
      }
    }
  });
  return w;
}

std::vector<sla::PlaceLabel> World::labels() const {
  std::vector<sla::PlaceLabel> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({records[i].image_id, sla::GroupId{0, 0, std::nullopt}, place_of[i], sla::Dataset::G});
  }
  return out;
}

io::RowMeta World::row_meta(std::size_t image) const {
  const auto& r = records.at(image);
  io::RowMeta m;
  m.image_id = r.image_id;
  m.east = r.east;
  m.north = r.north;
  m.frame = static_cast<std::int64_t>(image);
  m.match_id = std::to_string(place_of[image]);
  return m;
}

void write_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  for (std::size_t i = 0; i < world.maps.size(); ++i) {
    io::write_feature(dir / "features" / (world.records[i].image_id + ".spfm"), world.maps[i]);
  }
  std::ofstream rec(dir / "records.csv");
  if (!rec) throw Error(ErrorCode::Io, "cannot write " + (dir / "records.csv").string());
  sla::write_records_csv(rec, world.records);
  std::ofstream lab(dir / "labels.jsonl");
  if (!lab) throw Error(ErrorCode::Io, "cannot write " + (dir / "labels.jsonl").string());
  sla::write_labels_jsonl(lab, world.labels());
  if (!rec || !lab) throw Error(ErrorCode::Io, "failed writing world files under " + dir.string());
}

Split split(const World& world, std::size_t train_places, std::size_t queries_per_place) {
  const auto& spec = world.spec;
  if (train_places > spec.n_places || queries_per_place >= spec.imgs_per_place) {
    throw Error(ErrorCode::InvalidArgument, "split needs train_places <= places and fewer queries than images per place");
  }
  Split s;
  for (std::size_t i = 0; i < world.maps.size(); ++i) {
    const auto place = static_cast<std::size_t>(world.place_of[i]);
    if (place < train_places) {
      s.train.maps.push_back(world.maps[i]);
      s.train.classes.push_back(world.place_of[i]);
    } else if (i % spec.imgs_per_place < queries_per_place) {
      s.queries.push_back(world.maps[i]);
      s.query_meta.push_back(world.row_meta(i));
    } else {
      s.db.push_back(world.maps[i]);
      s.db_meta.push_back(world.row_meta(i));
    }
  }
  return s;
}

}  // namespace vpr::synth
