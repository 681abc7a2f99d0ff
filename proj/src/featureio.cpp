#include "vpr/featureio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

namespace vpr::io {

namespace {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

template <class T>
void put(std::ostream& out, T v) {
  v = byteswap_if_big(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_bytes(std::ostream& out, const std::string& s) { out.write(s.data(), static_cast<std::streamsize>(s.size())); }

class Reader {
 public:
  Reader(std::istream& in, const char* what) : in_(in), what_(what) {}

  template <class T>
  T get() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return byteswap_if_big(v);
  }

  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    if (n) read(s.data(), n);
    return s;
  }

  void magic(const char (&expected)[5]) {
    if (bytes(4) != std::string(expected, 4)) {
      throw Error(ErrorCode::BadMagic, std::string(what_) + ": bad magic, expected " + expected);
    }
  }

 private:
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw Error(ErrorCode::Truncated, std::string(what_) + ": file is truncated");
    }
  }

  std::istream& in_;
  const char* what_;
};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return in;
}

void finish(std::ostream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace

// ------------------------------------------------------------ feature file

void write_feature(std::ostream& out, const FeatureMap& fm) {
  put_bytes(out, "SPFM");
  put<std::uint32_t>(out, kFeatureVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(fm.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(fm.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(fm.width));
  put<std::uint8_t>(out, fm.cls ? 1 : 0);
  for (double v : fm.values.data()) put<float>(out, static_cast<float>(v));
  if (fm.cls) {
    for (double v : fm.cls->data()) put<float>(out, static_cast<float>(v));
  }
}

FeatureMap read_feature(std::istream& in) {
  Reader r(in, "feature file");
  r.magic("SPFM");
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureVersion) {
    throw Error(ErrorCode::BadVersion, "feature file: unsupported version " + std::to_string(version));
  }
  const auto c = r.get<std::uint32_t>(), h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>();
  const auto has_cls = r.get<std::uint8_t>();
  if (c == 0 || h == 0 || w == 0) throw Error(ErrorCode::Parse, "feature file: zero dimension");
  if (has_cls > 1) throw Error(ErrorCode::Parse, "feature file: has_cls must be 0 or 1");
  std::vector<double> values(static_cast<std::size_t>(c) * h * w);
  for (auto& v : values) v = r.get<float>();
  std::optional<Tensor> cls;
  if (has_cls) {
    std::vector<double> cv(c);
    for (auto& v : cv) v = r.get<float>();
    cls = Tensor::vector(std::move(cv));
  }
  return FeatureMap::make(Tensor({c, h, w}, std::move(values)), std::move(cls));
}

void write_feature(const std::filesystem::path& path, const FeatureMap& fm) {
  auto out = open_out(path);
  write_feature(out, fm);
  finish(out, path);
}

FeatureMap read_feature(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_feature(in);
}

// -------------------------------------------------------------- checkpoint

const char* to_string(Stage s) { return s == Stage::Stage1 ? "stage1" : "stage2"; }

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw Error(ErrorCode::InvalidArgument, "checkpoint has no tensor named " + name);
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  put_bytes(out, "SPCK");
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(ckpt.stage));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.meta.size()));
  put_bytes(out, ckpt.meta);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in, "checkpoint");
  r.magic("SPCK");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::BadVersion, "checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto stage = r.get<std::uint8_t>();
  if (stage != 1 && stage != 2) throw Error(ErrorCode::Parse, "checkpoint: unknown stage tag " + std::to_string(stage));
  ckpt.stage = static_cast<Stage>(stage);
  ckpt.meta = r.bytes(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw Error(ErrorCode::Parse, "checkpoint: tensor " + name + " has invalid rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d == 0 || d > (std::size_t{1} << 32)) throw Error(ErrorCode::Parse, "checkpoint: bad dimension in " + name);
      n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>();
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto out = open_out(path);
  write_checkpoint(out, ckpt);
  finish(out, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_checkpoint(in);
}

// ------------------------------------------------------------- descriptors

void write_spdb(std::ostream& out, const DescriptorTable& table) {
  put_bytes(out, "SPDB");
  put<std::uint64_t>(out, table.count());
  put<std::uint32_t>(out, table.dim);
  for (float v : table.rows) put<float>(out, v);
}

DescriptorTable read_spdb(std::istream& in) {
  Reader r(in, "descriptor db");
  r.magic("SPDB");
  DescriptorTable t;
  const auto n = r.get<std::uint64_t>();
  t.dim = r.get<std::uint32_t>();
  if (t.dim == 0) throw Error(ErrorCode::Parse, "descriptor db: zero dimension");
  if (n > (std::uint64_t{1} << 40) / t.dim) throw Error(ErrorCode::Parse, "descriptor db: implausible row count");
  t.rows.resize(static_cast<std::size_t>(n) * t.dim);
  for (auto& v : t.rows) v = r.get<float>();
  return t;
}

std::filesystem::path sidecar_path(const std::filesystem::path& db_path) {
  return std::filesystem::path(db_path.string() + ".jsonl");
}

void write_row_meta(std::ostream& out, const std::vector<RowMeta>& meta) {
  using nlohmann::ordered_json;
  for (std::size_t i = 0; i < meta.size(); ++i) {
    const auto& m = meta[i];
    ordered_json j;
    j["row"] = i;
    j["image_id"] = m.image_id;
    j["east"] = m.east ? ordered_json(*m.east) : ordered_json(nullptr);
    j["north"] = m.north ? ordered_json(*m.north) : ordered_json(nullptr);
    j["frame"] = m.frame ? ordered_json(*m.frame) : ordered_json(nullptr);
    j["match_id"] = m.match_id ? ordered_json(*m.match_id) : ordered_json(nullptr);
    out << j.dump() << '\n';
  }
}

std::vector<RowMeta> read_row_meta(std::istream& in) {
  std::vector<RowMeta> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RowMeta m;
      if (j.contains("row") && j["row"].get<std::size_t>() != out.size()) {
        throw Error(ErrorCode::Parse, "rows out of order");
      }
      m.image_id = j.at("image_id").get<std::string>();
      auto opt = [&](const char* key, auto& field) {
        using T = typename std::remove_reference_t<decltype(field)>::value_type;
        if (j.contains(key) && !j[key].is_null()) field = j[key].template get<T>();
      };
      opt("east", m.east);
      opt("north", m.north);
      opt("frame", m.frame);
      opt("match_id", m.match_id);
      out.push_back(std::move(m));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::Parse, "metadata line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_spdb(const std::filesystem::path& path, const DescriptorTable& table) {
  if (!table.meta.empty() && table.meta.size() != table.count()) {
    throw Error(ErrorCode::InvalidArgument, "descriptor db metadata must have one entry per row");
  }
  {
    auto out = open_out(path);
    write_spdb(out, table);
    finish(out, path);
  }
  const auto side = sidecar_path(path);
  std::ofstream meta(side, std::ios::trunc);
  if (!meta) throw Error(ErrorCode::Io, "cannot open " + side.string() + " for writing");
  write_row_meta(meta, table.meta);
  finish(meta, side);
}

DescriptorTable read_spdb(const std::filesystem::path& path) {
  auto in = open_in(path);
  DescriptorTable t = read_spdb(in);
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream meta(side);
    t.meta = read_row_meta(meta);
    if (!t.meta.empty() && t.meta.size() != t.count()) {
      throw Error(ErrorCode::Parse, "descriptor db sidecar has " + std::to_string(t.meta.size()) + " rows, binary has " +
                                        std::to_string(t.count()));
    }
  }
  return t;
}

}  // namespace vpr::io
