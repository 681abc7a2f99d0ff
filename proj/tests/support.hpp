#pragma once

// Shared generators for the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vpr/aggregation.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/sla.hpp"

namespace vpr::testing {

/// Mixed S/M/P/G records scattered over a few hundred metres, with about
/// 30% of S headings outside [0, 360).
inline std::vector<sla::GeoRecord> random_records(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> east(585000.0, 585400.0), north(4477000.0, 4477400.0),
      heading(-400.0, 800.0);
  std::uniform_int_distribution<int> kind(0, 3), slice(0, 3), place(0, n / 6 + 1);
  std::vector<sla::GeoRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    sla::GeoRecord r;
    r.image_id = "img" + std::to_string(i);
    r.east = east(rng);
    r.north = north(rng);
    switch (kind(rng)) {
      case 0:
        r.dataset = sla::Dataset::S;
        r.heading = heading(rng);
        break;
      case 1: r.dataset = sla::Dataset::M; break;
      case 2:
        r.dataset = sla::Dataset::P;
        if (i % 7 == 0) r.pano_slice = 90 * slice(rng);
        break;
      default:
        r.dataset = sla::Dataset::G;
        r.place_id = place(rng);
        break;
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// 100 db rows and 20 queries carrying geo, frame and match metadata, with
/// random unit descriptors of dimension `dim`.
struct RetrievalFixture {
  std::vector<Descriptor> db, queries;
  std::vector<io::RowMeta> db_meta, query_meta;
};

inline RetrievalFixture retrieval_fixture(std::uint64_t seed, std::size_t dim = 16) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 200.0);
  std::uniform_int_distribution<int> frame(0, 400), match(0, 30);
  RetrievalFixture f;
  auto unit = [&] {
    auto t = Tensor::randn({dim}, rng);
    l2_normalize(t.span());
    return t;
  };
  auto meta = [&](const std::string& id) {
    io::RowMeta m;
    m.image_id = id;
    m.east = pos(rng);
    m.north = pos(rng);
    m.frame = frame(rng);
    m.match_id = std::to_string(match(rng));
    return m;
  };
  for (int i = 0; i < 100; ++i) {
    f.db.push_back(unit());
    f.db_meta.push_back(meta("db" + std::to_string(i)));
  }
  for (int i = 0; i < 20; ++i) {
    // Queries lean towards a db row so that recall varies with K.
    auto q = unit();
    const auto& anchor = f.db[static_cast<std::size_t>(i * 5)];
    for (std::size_t j = 0; j < dim; ++j) q[j] = 0.6 * q[j] + 0.8 * anchor[j];
    l2_normalize(q.span());
    f.queries.push_back(q);
    f.query_meta.push_back(meta("q" + std::to_string(i)));
  }
  return f;
}

/// Independent recall oracle: full sort of every db row, then the positive
/// rule spelled out per regime.
inline std::map<std::size_t, double> recall_oracle(const RetrievalFixture& f, retrieval::Regime regime,
                                                   double threshold, const std::vector<std::size_t>& ks) {
  auto positive = [&](const io::RowMeta& q, const io::RowMeta& d) {
    switch (regime) {
      case retrieval::Regime::Geo: return std::hypot(*q.east - *d.east, *q.north - *d.north) <= threshold;
      case retrieval::Regime::Frame: return std::abs(static_cast<double>(*q.frame - *d.frame)) <= threshold;
      default: return *q.match_id == *d.match_id;
    }
  };
  std::map<std::size_t, double> hits;
  std::size_t evaluated = 0;
  for (std::size_t qi = 0; qi < f.queries.size(); ++qi) {
    // Both sides rounded to float, as the databases store them.
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t r = 0; r < f.db.size(); ++r) {
      double s = 0;
      for (std::size_t j = 0; j < f.db[r].size(); ++j) {
        s += static_cast<double>(static_cast<float>(f.db[r][j])) * static_cast<float>(f.queries[qi][j]);
      }
      order.emplace_back(-s, r);
    }
    std::sort(order.begin(), order.end());
    bool any = false;
    for (std::size_t r = 0; r < f.db.size(); ++r) any = any || positive(f.query_meta[qi], f.db_meta[r]);
    if (!any) continue;
    ++evaluated;
    for (auto k : ks) {
      for (std::size_t t = 0; t < k && t < order.size(); ++t) {
        if (positive(f.query_meta[qi], f.db_meta[order[t].second])) {
          hits[k] += 1;
          break;
        }
      }
    }
  }
  std::map<std::size_t, double> out;
  for (auto k : ks) out[k] = evaluated ? 100.0 * hits[k] / static_cast<double>(evaluated) : 0.0;
  return out;
}

// Loops written directly against the [C,H,W] layout, no shared helpers.
inline std::vector<double> brute_netvlad(const FeatureMap& fm, const NetVladParams& p) {
  const std::size_t C = fm.channels, H = fm.height, W = fm.width, K = p.centers.dim(0);
  std::vector<std::vector<double>> v(K, std::vector<double>(C, 0.0));
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      std::vector<double> logit(K);
      for (std::size_t k = 0; k < K; ++k) {
        logit[k] = p.assign_b[k];
        for (std::size_t c = 0; c < C; ++c) logit[k] += p.assign_w[k * C + c] * fm.values[(c * H + y) * W + x];
      }
      double z = 0;
      for (double l : logit) z += std::exp(l);
      for (std::size_t k = 0; k < K; ++k) {
        const double a = std::exp(logit[k]) / z;
        for (std::size_t c = 0; c < C; ++c) v[k][c] += a * (fm.values[(c * H + y) * W + x] - p.centers[k * C + c]);
      }
    }
  }
  std::vector<double> out;
  for (auto& vk : v) {
    double n = 0;
    for (double e : vk) n += e * e;
    n = std::sqrt(n);
    for (double e : vk) out.push_back(e / n);
  }
  double n = 0;
  for (double e : out) n += e * e;
  for (double& e : out) e /= std::sqrt(n);
  return out;
}

}  // namespace vpr::testing
