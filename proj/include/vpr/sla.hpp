#pragma once

// Supervised label alignment: turns UTM-tagged records from several datasets
// into one class-label space. Positions are binned into M-metre cells,
// headings into alpha-degree bins, and cells are spread over N x N (x L)
// interleaved groups so neighbouring cells never share a group.

#include <compare>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vpr/aggregation.hpp"

namespace vpr::sla {

enum class Dataset { G, P, M, S };

char to_char(Dataset d);
Dataset parse_dataset(const std::string& tag);

struct GeoRecord {
  std::string image_id;
  Dataset dataset = Dataset::G;
  double east = 0.0;
  double north = 0.0;
  std::optional<double> heading;        // S only
  std::optional<int> pano_slice;        // P only, one of 0/90/180/270
  std::optional<std::int64_t> place_id;  // G only
};

struct GridConfig {
  double cell_size = 10.0;     // M, metres
  double heading_bin = 30.0;   // alpha, degrees
  int pos_groups = 5;          // N
  int heading_groups = 2;      // L
  int min_inliers = 20;

  void validate() const;
  int heading_bins() const;
};

struct ClassKey {
  std::int64_t e = 0;
  std::int64_t n = 0;
  std::optional<std::int64_t> h;

  auto operator<=>(const ClassKey&) const = default;
};

struct GroupId {
  int u = 0;
  int v = 0;
  std::optional<int> w;

  auto operator<=>(const GroupId&) const = default;
};

struct PlaceLabel {
  std::string image_id;
  GroupId group;
  std::int64_t class_id = 0;
  Dataset source = Dataset::G;

  bool operator==(const PlaceLabel&) const = default;
};

struct MatchScore {
  std::string query_id;
  std::string candidate_id;
  std::size_t inlier_count = 0;
};

/// Headings reduced into [0, 360).
double normalize_heading(double degrees);

ClassKey assign_class_sfxl(const GeoRecord& rec, const GridConfig& cfg);
ClassKey assign_class_grid(const GeoRecord& rec, const GridConfig& cfg);
GroupId assign_group(const ClassKey& key, const GridConfig& cfg);

/// Local-feature matcher between two images identified by id.
class Matcher {
 public:
  virtual ~Matcher() = default;
  virtual std::size_t inliers(const std::string& query_id, const std::string& candidate_id) const = 0;
};

/// Test matcher: inliers = round(max(0, <v_q, v_c>) * scale) over supplied vectors.
class MockMatcher : public Matcher {
 public:
  explicit MockMatcher(std::unordered_map<std::string, std::vector<double>> vectors, double scale = 100.0)
      : vectors_(std::move(vectors)), scale_(scale) {}
  std::size_t inliers(const std::string& query_id, const std::string& candidate_id) const override;

 private:
  std::unordered_map<std::string, std::vector<double>> vectors_;
  double scale_;
};

/// Brute-force patch correlation: counts mutual nearest-neighbour location
/// pairs whose cosine similarity reaches `min_cosine`.
class PatchCorrelationMatcher : public Matcher {
 public:
  using Loader = std::function<FeatureMap(const std::string& image_id)>;
  explicit PatchCorrelationMatcher(Loader loader, double min_cosine = 0.8)
      : loader_(std::move(loader)), min_cosine_(min_cosine) {}
  std::size_t inliers(const std::string& query_id, const std::string& candidate_id) const override;

  static std::size_t mutual_matches(const FeatureMap& a, const FeatureMap& b, double min_cosine);

 private:
  Loader loader_;
  double min_cosine_;
};

/// Assigns each non-query image of one grid cell to the panorama-slice query
/// with the most inliers (ties to the lower query index), provided that count
/// reaches `min_inliers`; other images are left out. Matcher exceptions count
/// as zero inliers. Subclass indices refer to positions in `pano_queries`.
std::map<std::string, std::size_t> refine_pitts_subclasses(const std::vector<GeoRecord>& cell,
                                                           const std::vector<GeoRecord>& pano_queries,
                                                           const Matcher& matcher, int min_inliers);

/// Builds labels for all records. G keeps its native place ids (dense-mapped),
/// S uses position + heading cells, M position cells, P position cells refined
/// by panorama-slice matching. A null matcher leaves each P cell as a single
/// class. Classes with fewer than two images are dropped. Output follows input
/// order and is independent of `threads`.
std::vector<PlaceLabel> build_unified_labels(const std::vector<GeoRecord>& records,
                                             const std::map<std::string, std::int64_t>& native_g_labels,
                                             const GridConfig& cfg, const Matcher* matcher, int threads = 1);

/// Dense training class per label, unique across (source, group, class_id).
std::vector<std::int64_t> global_class_ids(const std::vector<PlaceLabel>& labels);

/// Distinct classes per dataset.
std::map<Dataset, std::size_t> class_counts(const std::vector<PlaceLabel>& labels);
std::map<Dataset, std::size_t> image_counts(const std::vector<PlaceLabel>& labels);

// I/O. Parse errors carry the 1-based line number.
std::vector<GeoRecord> read_records_csv(std::istream& in);
std::vector<GeoRecord> read_records_jsonl(std::istream& in);
/// Chooses CSV or JSON-lines by extension (.csv, otherwise JSON-lines).
std::vector<GeoRecord> read_records(const std::string& path);
void write_records_csv(std::ostream& out, const std::vector<GeoRecord>& records);
void write_labels_jsonl(std::ostream& out, const std::vector<PlaceLabel>& labels);
std::vector<PlaceLabel> read_labels_jsonl(std::istream& in);

}  // namespace vpr::sla
