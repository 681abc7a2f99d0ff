#include "vpr/retrieval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace vpr::retrieval {

DescriptorDb DescriptorDb::build(std::span<const Descriptor> descriptors, std::vector<io::RowMeta> meta) {
  if (descriptors.empty()) throw Error(ErrorCode::InvalidArgument, "cannot build a descriptor db from no rows");
  if (!meta.empty() && meta.size() != descriptors.size()) {
    throw Error(ErrorCode::InvalidArgument, "descriptor db metadata must have one entry per row");
  }
  DescriptorDb db;
  const std::size_t dim = descriptors.front().size();
  db.table_.dim = static_cast<std::uint32_t>(dim);
  db.table_.rows.reserve(descriptors.size() * dim);
  std::size_t renormalised = 0;
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    const auto& d = descriptors[i];
    if (d.size() != dim) {
      throw Error(ErrorCode::InvalidArgument, "descriptor " + std::to_string(i) + " has dimension " +
                                                  std::to_string(d.size()) + ", expected " + std::to_string(dim));
    }
    d.require_finite("descriptor " + std::to_string(i));
    double norm = l2_norm(d.span());
    if (norm == 0.0) throw Error(ErrorCode::InvalidArgument, "descriptor " + std::to_string(i) + " is zero");
    if (std::abs(norm - 1.0) > 1e-4) {
      ++renormalised;
    } else {
      norm = 1.0;
    }
    for (double v : d.data()) db.table_.rows.push_back(static_cast<float>(v / norm));
  }
  if (renormalised) spdlog::warn("descriptor db: renormalised {} non-unit rows", renormalised);
  db.table_.meta = std::move(meta);
  if (db.table_.meta.empty()) {
    db.table_.meta.resize(descriptors.size());
    for (std::size_t i = 0; i < descriptors.size(); ++i) db.table_.meta[i].image_id = std::to_string(i);
  }
  return db;
}

DescriptorDb DescriptorDb::from_table(io::DescriptorTable table) {
  if (table.count() == 0) throw Error(ErrorCode::InvalidArgument, "descriptor db is empty");
  if (table.meta.empty()) {
    table.meta.resize(table.count());
    for (std::size_t i = 0; i < table.count(); ++i) table.meta[i].image_id = std::to_string(i);
  }
  if (table.meta.size() != table.count()) {
    throw Error(ErrorCode::InvalidArgument, "descriptor db metadata must have one entry per row");
  }
  DescriptorDb db;
  db.table_ = std::move(table);
  return db;
}

namespace {

bool ranks_before(const Hit& a, const Hit& b) {
  return a.similarity != b.similarity ? a.similarity > b.similarity : a.row < b.row;
}

void keep_top(std::vector<Hit>& hits, std::size_t k) {
  const std::size_t keep = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(), ranks_before);
  hits.resize(keep);
}

}  // namespace

std::vector<Hit> search(const DescriptorDb& db, std::span<const double> query, std::size_t k, int threads) {
  if (query.size() != db.dim()) {
    throw Error(ErrorCode::InvalidArgument, "query dimension " + std::to_string(query.size()) +
                                                " does not match db dimension " + std::to_string(db.dim()));
  }
  if (k == 0 || k > db.size()) {
    throw Error(ErrorCode::InvalidArgument, "k must be in [1, " + std::to_string(db.size()) + "]");
  }
  const std::size_t shards = static_cast<std::size_t>(std::max(threads, 1));
  std::vector<std::vector<Hit>> partial(shards);
  const std::size_t n = db.size(), chunk = (n + shards - 1) / shards;
  parallel_for(shards, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t s = b; s < e; ++s) {
      auto& hits = partial[s];
      for (std::size_t r = s * chunk; r < std::min(n, (s + 1) * chunk); ++r) {
        const auto row = db.row(r);
        double sim = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) sim += static_cast<double>(row[j]) * query[j];
        hits.push_back({r, sim});
      }
      keep_top(hits, k);
    }
  });
  std::vector<Hit> merged;
  for (auto& p : partial) merged.insert(merged.end(), p.begin(), p.end());
  keep_top(merged, k);
  return merged;
}

const char* to_string(Regime r) {
  switch (r) {
    case Regime::Geo: return "geo";
    case Regime::Frame: return "frame";
    case Regime::Exact: return "exact";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "geo") return Regime::Geo;
  if (s == "frame") return Regime::Frame;
  if (s == "exact") return Regime::Exact;
  throw Error(ErrorCode::Parse, "unknown regime '" + s + "' (expected geo, frame or exact)");
}

bool is_positive(const io::RowMeta& query, const io::RowMeta& candidate, const GroundTruth& gt) {
  switch (gt.regime) {
    case Regime::Geo: {
      if (!query.east || !query.north || !candidate.east || !candidate.north) {
        throw Error(ErrorCode::InvalidArgument, "geo regime needs east/north for " +
                                                    (query.east && query.north ? candidate.image_id : query.image_id));
      }
      return std::hypot(*query.east - *candidate.east, *query.north - *candidate.north) <= gt.threshold;
    }
    case Regime::Frame: {
      if (!query.frame || !candidate.frame) {
        throw Error(ErrorCode::InvalidArgument, "frame regime needs frame indices for " +
                                                    (query.frame ? candidate.image_id : query.image_id));
      }
      return static_cast<double>(std::llabs(*query.frame - *candidate.frame)) <= gt.threshold;
    }
    case Regime::Exact: {
      if (!query.match_id || !candidate.match_id) {
        throw Error(ErrorCode::InvalidArgument, "exact regime needs match ids for " +
                                                    (query.match_id ? candidate.image_id : query.image_id));
      }
      return *query.match_id == *candidate.match_id;
    }
  }
  return false;
}

EvalReport recall_at_k(const std::vector<std::vector<Hit>>& results, const std::vector<io::RowMeta>& queries,
                       const DescriptorDb& db, const GroundTruth& gt, const std::vector<std::size_t>& ks) {
  if (results.size() != queries.size()) {
    throw Error(ErrorCode::InvalidArgument, "one result list per query required");
  }
  if (ks.empty()) throw Error(ErrorCode::InvalidArgument, "no K values requested");
  for (auto k : ks) {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "K must be positive");
  }
  EvalReport report;
  report.gt = gt;
  std::map<std::size_t, std::size_t> hits;
  for (auto k : ks) hits[k] = 0;

  for (std::size_t q = 0; q < queries.size(); ++q) {
    bool any = false;
    for (std::size_t r = 0; r < db.size() && !any; ++r) any = is_positive(queries[q], db.meta(r), gt);
    if (!any) {
      ++report.n_excluded;
      continue;
    }
    ++report.n_queries;
    std::size_t first = results[q].size();
    for (std::size_t rank = 0; rank < results[q].size(); ++rank) {
      if (is_positive(queries[q], db.meta(results[q][rank].row), gt)) {
        first = rank;
        break;
      }
    }
    for (auto& [k, count] : hits) {
      if (first < k) ++count;
    }
  }
  for (const auto& [k, count] : hits) {
    report.recall[k] = report.n_queries ? 100.0 * static_cast<double>(count) / static_cast<double>(report.n_queries) : 0.0;
  }
  return report;
}

EvalReport evaluate(const DescriptorDb& db, const DescriptorDb& queries, const GroundTruth& gt,
                    const std::vector<std::size_t>& ks, int threads) {
  if (queries.dim() != db.dim()) throw Error(ErrorCode::InvalidArgument, "query and db dimensions differ");
  if (ks.empty()) throw Error(ErrorCode::InvalidArgument, "no K values requested");
  const std::size_t kmax = std::min(*std::max_element(ks.begin(), ks.end()), db.size());
  std::vector<std::vector<Hit>> results(queries.size());
  std::vector<double> q(queries.dim());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto row = queries.row(i);
    std::copy(row.begin(), row.end(), q.begin());
    results[i] = search(db, q, kmax, threads);
  }
  return recall_at_k(results, queries.meta(), db, gt, ks);
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["regime"] = to_string(gt.regime);
  j["threshold"] = gt.threshold;
  j["n_queries"] = n_queries;
  j["n_excluded"] = n_excluded;
  nlohmann::ordered_json r;
  for (const auto& [k, v] : recall) r[std::to_string(k)] = v;
  j["recall"] = r;
  return j.dump();
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "regime " << to_string(gt.regime);
  if (gt.regime != Regime::Exact) os << " (threshold " << gt.threshold << ")";
  os << ", " << n_queries << " queries, " << n_excluded << " excluded\n";
  for (const auto& [k, v] : recall) os << std::setw(8) << ("R@" + std::to_string(k));
  os << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& [k, v] : recall) os << std::setw(8) << v;
  os << '\n';
  return os.str();
}

}  // namespace vpr::retrieval
