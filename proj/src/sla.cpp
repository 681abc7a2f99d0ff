#include "vpr/sla.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "json.hpp"

namespace vpr::sla {

using nlohmann::ordered_json;

char to_char(Dataset d) {
  switch (d) {
    case Dataset::G: return 'G';
    case Dataset::P: return 'P';
    case Dataset::M: return 'M';
    case Dataset::S: return 'S';
  }
  return '?';
}

Dataset parse_dataset(const std::string& tag) {
  if (tag == "G") return Dataset::G;
  if (tag == "P") return Dataset::P;
  if (tag == "M") return Dataset::M;
  if (tag == "S") return Dataset::S;
  throw Error(ErrorCode::Parse, "unknown dataset tag '" + tag + "' (expected G, P, M or S)");
}

void GridConfig::validate() const {
  if (!(cell_size > 0) || !std::isfinite(cell_size)) throw Error(ErrorCode::Constraint, "cell size M must be > 0");
  if (!(heading_bin > 0) || heading_bin > 360) throw Error(ErrorCode::Constraint, "heading bin alpha must be in (0, 360]");
  const double bins = 360.0 / heading_bin;
  if (std::abs(bins - std::round(bins)) > 1e-9) throw Error(ErrorCode::Constraint, "heading bin alpha must divide 360");
  if (pos_groups < 1) throw Error(ErrorCode::Constraint, "N must be >= 1");
  if (heading_groups < 1) throw Error(ErrorCode::Constraint, "L must be >= 1");
  if (min_inliers < 0) throw Error(ErrorCode::Constraint, "min_inliers must be >= 0");
}

int GridConfig::heading_bins() const { return static_cast<int>(std::lround(360.0 / heading_bin)); }

double normalize_heading(double degrees) {
  if (!std::isfinite(degrees)) throw Error(ErrorCode::Constraint, "heading must be finite");
  double h = std::fmod(degrees, 360.0);
  if (h < 0) h += 360.0;
  if (h >= 360.0) h = 0.0;
  return h;
}

namespace {

std::int64_t cell_index(double coord, double cell) {
  if (!std::isfinite(coord)) throw Error(ErrorCode::Constraint, "coordinate must be finite");
  return static_cast<std::int64_t>(std::floor(coord / cell));
}

int positive_mod(std::int64_t value, int mod) {
  const auto r = value % mod;
  return static_cast<int>(r < 0 ? r + mod : r);
}

}  // namespace

ClassKey assign_class_sfxl(const GeoRecord& rec, const GridConfig& cfg) {
  if (!rec.heading) throw Error(ErrorCode::Constraint, "record " + rec.image_id + " has no heading");
  ClassKey key{cell_index(rec.east, cfg.cell_size), cell_index(rec.north, cfg.cell_size), std::nullopt};
  const auto bin = static_cast<std::int64_t>(std::floor(normalize_heading(*rec.heading) / cfg.heading_bin));
  key.h = std::min<std::int64_t>(bin, cfg.heading_bins() - 1);
  return key;
}

ClassKey assign_class_grid(const GeoRecord& rec, const GridConfig& cfg) {
  return ClassKey{cell_index(rec.east, cfg.cell_size), cell_index(rec.north, cfg.cell_size), std::nullopt};
}

GroupId assign_group(const ClassKey& key, const GridConfig& cfg) {
  GroupId g{positive_mod(key.e, cfg.pos_groups), positive_mod(key.n, cfg.pos_groups), std::nullopt};
  if (key.h) g.w = positive_mod(*key.h, cfg.heading_groups);
  return g;
}

// ------------------------------------------------------------------ matchers

std::size_t MockMatcher::inliers(const std::string& query_id, const std::string& candidate_id) const {
  const auto q = vectors_.find(query_id);
  const auto c = vectors_.find(candidate_id);
  if (q == vectors_.end() || c == vectors_.end()) {
    throw Error(ErrorCode::InvalidArgument, "mock matcher has no vector for " +
                                                (q == vectors_.end() ? query_id : candidate_id));
  }
  if (q->second.size() != c->second.size()) throw Error(ErrorCode::InvalidArgument, "mock vectors differ in length");
  const double s = dot(q->second, c->second);
  return static_cast<std::size_t>(std::lround(std::max(0.0, s) * scale_));
}

std::size_t PatchCorrelationMatcher::mutual_matches(const FeatureMap& a, const FeatureMap& b, double min_cosine) {
  if (a.channels != b.channels) throw Error(ErrorCode::InvalidArgument, "matched feature maps differ in channels");
  const std::size_t C = a.channels, na = a.locations(), nb = b.locations();
  auto unit_rows = [C](const FeatureMap& fm) {
    std::vector<double> rows(fm.locations() * C);
    for (std::size_t i = 0; i < fm.locations(); ++i) {
      for (std::size_t c = 0; c < C; ++c) rows[i * C + c] = fm.at(c, i);
      l2_normalize(std::span<double>(rows.data() + i * C, C));
    }
    return rows;
  };
  const auto ra = unit_rows(a), rb = unit_rows(b);
  std::vector<double> cos(na * nb);
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      cos[i * nb + j] = dot(std::span<const double>(ra.data() + i * C, C), std::span<const double>(rb.data() + j * C, C));
    }
  }
  std::vector<std::size_t> best_b(na), best_a(nb);
  for (std::size_t i = 0; i < na; ++i) {
    best_b[i] = static_cast<std::size_t>(std::max_element(cos.begin() + static_cast<std::ptrdiff_t>(i * nb),
                                                          cos.begin() + static_cast<std::ptrdiff_t>((i + 1) * nb)) -
                                         (cos.begin() + static_cast<std::ptrdiff_t>(i * nb)));
  }
  for (std::size_t j = 0; j < nb; ++j) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < na; ++i) {
      if (cos[i * nb + j] > cos[arg * nb + j]) arg = i;
    }
    best_a[j] = arg;
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < na; ++i) {
    const std::size_t j = best_b[i];
    if (best_a[j] == i && cos[i * nb + j] >= min_cosine) ++count;
  }
  return count;
}

std::size_t PatchCorrelationMatcher::inliers(const std::string& query_id, const std::string& candidate_id) const {
  return mutual_matches(loader_(query_id), loader_(candidate_id), min_cosine_);
}

// -------------------------------------------------------------- refinement

std::map<std::string, std::size_t> refine_pitts_subclasses(const std::vector<GeoRecord>& cell,
                                                           const std::vector<GeoRecord>& pano_queries,
                                                           const Matcher& matcher, int min_inliers) {
  std::map<std::string, std::size_t> out;
  if (pano_queries.empty()) return out;
  for (const auto& rec : cell) {
    if (rec.pano_slice) continue;  // queries label themselves
    std::size_t best_q = 0, best_count = 0;
    bool found = false;
    for (std::size_t q = 0; q < pano_queries.size(); ++q) {
      std::size_t count = 0;
      try {
        count = matcher.inliers(pano_queries[q].image_id, rec.image_id);
      } catch (const std::exception&) {
        count = 0;
      }
      if (!found || count > best_count) {
        best_q = q;
        best_count = count;
        found = true;
      }
    }
    if (found && best_count >= static_cast<std::size_t>(min_inliers)) out[rec.image_id] = best_q;
  }
  return out;
}

// ------------------------------------------------------------ label building

namespace {

void validate_record(const GeoRecord& rec) {
  if (rec.image_id.empty()) throw Error(ErrorCode::Constraint, "record with empty image_id");
  if (rec.heading && rec.dataset != Dataset::S) {
    throw Error(ErrorCode::Constraint, "record " + rec.image_id + ": heading is only allowed for dataset S");
  }
  if (!rec.heading && rec.dataset == Dataset::S) {
    throw Error(ErrorCode::Constraint, "record " + rec.image_id + ": dataset S requires a heading");
  }
  if (rec.pano_slice) {
    if (rec.dataset != Dataset::P) {
      throw Error(ErrorCode::Constraint, "record " + rec.image_id + ": pano_slice is only allowed for dataset P");
    }
    const int s = *rec.pano_slice;
    if (s != 0 && s != 90 && s != 180 && s != 270) {
      throw Error(ErrorCode::Constraint, "record " + rec.image_id + ": pano_slice must be 0, 90, 180 or 270");
    }
  }
}

struct Slot {
  bool labeled = false;
  GroupId group;
  std::vector<std::int64_t> key;  // ordering key of the class within its group
};

using Bucket = std::tuple<Dataset, GroupId>;

}  // namespace

std::vector<PlaceLabel> build_unified_labels(const std::vector<GeoRecord>& records,
                                             const std::map<std::string, std::int64_t>& native_g_labels,
                                             const GridConfig& cfg, const Matcher* matcher, int threads) {
  cfg.validate();
  {
    std::unordered_set<std::string> seen;
    for (const auto& rec : records) {
      validate_record(rec);
      if (!seen.insert(rec.image_id).second) {
        throw Error(ErrorCode::Constraint, "duplicate image_id across datasets: " + rec.image_id);
      }
    }
  }

  std::vector<Slot> slots(records.size());
  std::vector<ClassKey> cell_keys(records.size());
  parallel_for(records.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto& rec = records[i];
      Slot& s = slots[i];
      switch (rec.dataset) {
        case Dataset::G: {
          std::int64_t id = 0;
          if (rec.place_id) {
            id = *rec.place_id;
          } else if (auto it = native_g_labels.find(rec.image_id); it != native_g_labels.end()) {
            id = it->second;
          } else {
            throw Error(ErrorCode::Constraint, "G record " + rec.image_id + " has no native place id");
          }
          s.labeled = true;
          s.group = GroupId{0, 0, std::nullopt};
          s.key = {id};
          break;
        }
        case Dataset::S: {
          const ClassKey k = assign_class_sfxl(rec, cfg);
          s.labeled = true;
          s.group = assign_group(k, cfg);
          s.key = {k.e, k.n, *k.h};
          break;
        }
        case Dataset::M: {
          const ClassKey k = assign_class_grid(rec, cfg);
          s.labeled = true;
          s.group = assign_group(k, cfg);
          s.key = {k.e, k.n};
          break;
        }
        case Dataset::P:
          cell_keys[i] = assign_class_grid(rec, cfg);
          break;
      }
    }
  });

  // Pittsburgh: one subclass per panorama-slice query inside each cell.
  std::map<ClassKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].dataset == Dataset::P) cells[cell_keys[i]].push_back(i);
  }
  std::vector<std::pair<ClassKey, std::vector<std::size_t>>> cell_list(cells.begin(), cells.end());
  parallel_for(cell_list.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t c = b; c < e; ++c) {
      const auto& [key, members] = cell_list[c];
      const GroupId group = assign_group(key, cfg);
      auto label = [&](std::size_t idx, std::int64_t sub) {
        slots[idx].labeled = true;
        slots[idx].group = group;
        slots[idx].key = {key.e, key.n, sub};
      };
      if (!matcher) {
        for (auto idx : members) label(idx, 0);
        continue;
      }
      std::vector<std::size_t> query_idx;
      std::vector<GeoRecord> cell;
      for (auto idx : members) {
        cell.push_back(records[idx]);
        if (records[idx].pano_slice) query_idx.push_back(idx);
      }
      std::sort(query_idx.begin(), query_idx.end(), [&](std::size_t a, std::size_t b2) {
        return std::tie(records[a].image_id, *records[a].pano_slice) <
               std::tie(records[b2].image_id, *records[b2].pano_slice);
      });
      std::vector<GeoRecord> queries;
      for (std::size_t q = 0; q < query_idx.size(); ++q) {
        queries.push_back(records[query_idx[q]]);
        label(query_idx[q], static_cast<std::int64_t>(q));
      }
      const auto assigned = refine_pitts_subclasses(cell, queries, *matcher, cfg.min_inliers);
      for (auto idx : members) {
        if (records[idx].pano_slice) continue;
        if (auto it = assigned.find(records[idx].image_id); it != assigned.end()) {
          label(idx, static_cast<std::int64_t>(it->second));
        }
      }
    }
  });

  // Dense class ids per (source, group) in lexicographic key order; classes
  // with a single image are dropped.
  std::map<Bucket, std::map<std::vector<std::int64_t>, std::size_t>> members;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (slots[i].labeled) ++members[{records[i].dataset, slots[i].group}][slots[i].key];
  }
  std::map<Bucket, std::map<std::vector<std::int64_t>, std::int64_t>> dense;
  for (const auto& [bucket, classes] : members) {
    std::int64_t next = 0;
    for (const auto& [key, count] : classes) {
      if (count >= 2) dense[bucket][key] = next++;
    }
  }

  std::vector<PlaceLabel> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!slots[i].labeled) continue;
    const auto& ids = dense[{records[i].dataset, slots[i].group}];
    const auto it = ids.find(slots[i].key);
    if (it == ids.end()) continue;
    labels.push_back(PlaceLabel{records[i].image_id, slots[i].group, it->second, records[i].dataset});
  }
  return labels;
}

std::vector<std::int64_t> global_class_ids(const std::vector<PlaceLabel>& labels) {
  using Key = std::tuple<Dataset, GroupId, std::int64_t>;
  std::map<Key, std::int64_t> ids;
  for (const auto& l : labels) ids.emplace(Key{l.source, l.group, l.class_id}, 0);
  std::int64_t next = 0;
  for (auto& [key, id] : ids) id = next++;
  std::vector<std::int64_t> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(ids.at(Key{l.source, l.group, l.class_id}));
  return out;
}

std::map<Dataset, std::size_t> class_counts(const std::vector<PlaceLabel>& labels) {
  std::map<Dataset, std::set<std::tuple<GroupId, std::int64_t>>> distinct;
  for (const auto& l : labels) distinct[l.source].emplace(l.group, l.class_id);
  std::map<Dataset, std::size_t> out;
  for (const auto& [d, s] : distinct) out[d] = s.size();
  return out;
}

std::map<Dataset, std::size_t> image_counts(const std::vector<PlaceLabel>& labels) {
  std::map<Dataset, std::size_t> out;
  for (const auto& l : labels) ++out[l.source];
  return out;
}

// --------------------------------------------------------------------- I/O

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line, const std::string& column) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::Parse, "line " + std::to_string(line) + ": invalid number '" + s + "' in column " + column);
  }
  return v;
}

std::int64_t parse_int(const std::string& s, std::size_t line, const std::string& column) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw Error(ErrorCode::Parse, "line " + std::to_string(line) + ": invalid integer '" + s + "' in column " + column);
  }
  return v;
}

}  // namespace

std::vector<GeoRecord> read_records_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> col;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) break;
  }
  const auto header = split_csv(line);
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"image_id", "dataset", "east", "north"}) {
    if (!col.count(required)) {
      throw Error(ErrorCode::Parse, "line " + std::to_string(line_no) + ": missing column " + required);
    }
  }

  std::vector<GeoRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw Error(ErrorCode::Parse, "line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                                        " fields, got " + std::to_string(f.size()));
    }
    auto field = [&](const std::string& name) -> std::string {
      const auto it = col.find(name);
      return it == col.end() ? std::string() : f[it->second];
    };
    GeoRecord r;
    r.image_id = field("image_id");
    if (r.image_id.empty()) throw Error(ErrorCode::Parse, "line " + std::to_string(line_no) + ": empty image_id");
    try {
      r.dataset = parse_dataset(field("dataset"));
    } catch (const Error& e) {
      throw Error(ErrorCode::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    r.east = parse_double(field("east"), line_no, "east");
    r.north = parse_double(field("north"), line_no, "north");
    if (auto h = field("heading"); !h.empty()) r.heading = parse_double(h, line_no, "heading");
    if (auto s = field("pano_slice"); !s.empty()) r.pano_slice = static_cast<int>(parse_int(s, line_no, "pano_slice"));
    if (auto p = field("place_id"); !p.empty()) r.place_id = parse_int(p, line_no, "place_id");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GeoRecord> read_records_jsonl(std::istream& in) {
  std::vector<GeoRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GeoRecord r;
      r.image_id = j.at("image_id").get<std::string>();
      r.dataset = parse_dataset(j.at("dataset").get<std::string>());
      r.east = j.at("east").get<double>();
      r.north = j.at("north").get<double>();
      if (j.contains("heading") && !j["heading"].is_null()) r.heading = j["heading"].get<double>();
      if (j.contains("pano_slice") && !j["pano_slice"].is_null()) r.pano_slice = j["pano_slice"].get<int>();
      if (j.contains("place_id") && !j["place_id"].is_null()) r.place_id = j["place_id"].get<std::int64_t>();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<GeoRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open records file " + path);
  const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
  return csv ? read_records_csv(in) : read_records_jsonl(in);
}

void write_records_csv(std::ostream& out, const std::vector<GeoRecord>& records) {
  out << "image_id,dataset,east,north,heading,pano_slice,place_id\n";
  out.precision(17);
  for (const auto& r : records) {
    out << r.image_id << ',' << to_char(r.dataset) << ',' << r.east << ',' << r.north << ',';
    if (r.heading) out << *r.heading;
    out << ',';
    if (r.pano_slice) out << *r.pano_slice;
    out << ',';
    if (r.place_id) out << *r.place_id;
    out << '\n';
  }
}

void write_labels_jsonl(std::ostream& out, const std::vector<PlaceLabel>& labels) {
  for (const auto& l : labels) {
    ordered_json j;
    j["image_id"] = l.image_id;
    j["group_u"] = l.group.u;
    j["group_v"] = l.group.v;
    j["group_w"] = l.group.w ? ordered_json(*l.group.w) : ordered_json(nullptr);
    j["class_id"] = l.class_id;
    j["source"] = std::string(1, to_char(l.source));
    out << j.dump() << '\n';
  }
}

std::vector<PlaceLabel> read_labels_jsonl(std::istream& in) {
  std::vector<PlaceLabel> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PlaceLabel l;
      l.image_id = j.at("image_id").get<std::string>();
      l.group.u = j.at("group_u").get<int>();
      l.group.v = j.at("group_v").get<int>();
      if (!j.at("group_w").is_null()) l.group.w = j["group_w"].get<int>();
      l.class_id = j.at("class_id").get<std::int64_t>();
      l.source = parse_dataset(j.at("source").get<std::string>());
      out.push_back(std::move(l));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::Parse, "labels line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vpr::sla
