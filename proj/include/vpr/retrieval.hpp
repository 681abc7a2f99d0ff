#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vpr/featureio.hpp"

namespace vpr::retrieval {

/// Immutable store of unit-norm descriptors with per-row metadata.
class DescriptorDb {
 public:
  /// Rows whose norm is off by more than 1e-4 are renormalised (with a warning).
  static DescriptorDb build(std::span<const Descriptor> descriptors, std::vector<io::RowMeta> meta);
  static DescriptorDb from_table(io::DescriptorTable table);

  io::DescriptorTable to_table() const { return table_; }
  std::size_t size() const { return table_.count(); }
  std::size_t dim() const { return table_.dim; }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(table_.rows).subspan(i * table_.dim, table_.dim);
  }
  const io::RowMeta& meta(std::size_t i) const { return table_.meta.at(i); }
  const std::vector<io::RowMeta>& meta() const { return table_.meta; }

 private:
  io::DescriptorTable table_;
};

struct Hit {
  std::size_t row = 0;
  double similarity = 0.0;

  bool operator==(const Hit&) const = default;
};

/// Exact top-k by dot product, descending, ties to the lower row. The result
/// does not depend on `threads`.
std::vector<Hit> search(const DescriptorDb& db, std::span<const double> query, std::size_t k, int threads = 1);

enum class Regime { Geo, Frame, Exact };

const char* to_string(Regime r);
Regime parse_regime(const std::string& s);

struct GroundTruth {
  Regime regime = Regime::Geo;
  double threshold = 25.0;  // metres (geo) or frames (frame); unused for exact

  static GroundTruth geo(double metres = 25.0) { return {Regime::Geo, metres}; }
  static GroundTruth frame(double window = 10.0) { return {Regime::Frame, window}; }
  static GroundTruth exact() { return {Regime::Exact, 0.0}; }
};

bool is_positive(const io::RowMeta& query, const io::RowMeta& candidate, const GroundTruth& gt);

struct EvalReport {
  std::map<std::size_t, double> recall;  // K -> percent
  std::size_t n_queries = 0;             // evaluated queries
  std::size_t n_excluded = 0;            // queries with no positive in the db
  GroundTruth gt;

  std::string to_json() const;
  std::string to_table() const;
};

/// recall@K = 100 * (#queries with a positive among the first K hits) / n.
/// Queries with no positive anywhere in the db are excluded and counted.
EvalReport recall_at_k(const std::vector<std::vector<Hit>>& results, const std::vector<io::RowMeta>& queries,
                       const DescriptorDb& db, const GroundTruth& gt, const std::vector<std::size_t>& ks);

/// Searches every query row of `queries` against `db` and scores it.
EvalReport evaluate(const DescriptorDb& db, const DescriptorDb& queries, const GroundTruth& gt,
                    const std::vector<std::size_t>& ks, int threads = 1);

}  // namespace vpr::retrieval
