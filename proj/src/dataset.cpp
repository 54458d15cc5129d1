#include "epc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_set>

#include "detail/parse.hpp"
#include "epc/binary_io.hpp"

namespace epc {

std::string to_string(Split split) {
  switch (split) {
    case Split::database: return "database";
    case Split::query: return "query";
    case Split::train: return "train";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "database") return Split::database;
  if (text == "query") return Split::query;
  if (text == "train") return Split::train;
  throw std::invalid_argument("unknown split '" + text + "'");
}

const SubmapRecord& SubmapIndex::at(std::uint64_t id) const {
  for (const auto& r : records) {
    if (r.id == id) return r;
  }
  throw std::out_of_range("submap id " + std::to_string(id) + " not in index");
}

std::vector<std::uint64_t> SubmapIndex::ids(Split split) const {
  std::vector<std::uint64_t> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r.id);
  }
  return out;
}

std::filesystem::path SubmapIndex::path_of(const SubmapRecord& record) const {
  const std::filesystem::path file(record.file);
  return file.is_absolute() ? file : root / file;
}

double world_distance(const SubmapRecord& a, const SubmapRecord& b) {
  return std::hypot(a.northing - b.northing, a.easting - b.easting);
}

namespace {

constexpr const char* kIndexHeader = "id,file,northing,easting,split";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

SubmapIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::missing_file, "cannot open index " + path.string());
  SubmapIndex index;
  index.root = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw DataError(DataError::Kind::malformed_header, path.string() + ": empty file");
  strip_cr(line);
  if (line != kIndexHeader) {
    throw DataError(DataError::Kind::malformed_header,
                    path.string() + ": expected header '" + kIndexHeader + "', got '" + line + "'");
  }
  std::unordered_set<std::uint64_t> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 5) {
      throw DataError(DataError::Kind::malformed_record,
                      where + ": expected 5 fields, got " + std::to_string(fields.size()));
    }
    SubmapRecord r;
    try {
      r.id = detail::parse_u64("id", fields[0]);
      r.file = fields[1];
      r.northing = detail::parse_double("northing", fields[2]);
      r.easting = detail::parse_double("easting", fields[3]);
      r.split = parse_split(fields[4]);
    } catch (const std::invalid_argument& e) {
      throw DataError(DataError::Kind::malformed_record, where + ": " + e.what());
    }
    if (!std::isfinite(r.northing) || !std::isfinite(r.easting)) {
      throw DataError(DataError::Kind::malformed_record, where + ": non-finite coordinate");
    }
    if (!seen.insert(r.id).second) {
      throw DataError(DataError::Kind::duplicate_id, where + ": duplicate submap id " + std::to_string(r.id));
    }
    index.records.push_back(std::move(r));
  }
  return index;
}

void save_index(const std::filesystem::path& path, const SubmapIndex& index) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << kIndexHeader << '\n';
  for (const auto& r : index.records) {
    out << r.id << ',' << r.file << ',' << detail::format_double(r.northing) << ','
        << detail::format_double(r.easting) << ',' << to_string(r.split) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_point_file(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  io::write_magic(out, "EPCS");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cloud.size()));
  out.write(reinterpret_cast<const char*>(cloud.coords.data()),
            static_cast<std::streamsize>(cloud.coords.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

PointCloud read_point_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::missing_file, "cannot open point file " + path.string());
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string(magic, 4) != "EPCS") {
    throw DataError(DataError::Kind::malformed_header, path.string() + ": missing EPCS magic");
  }
  std::uint32_t count = 0;
  if (!io::try_read_le(in, count)) throw DataError(DataError::Kind::truncated, path.string() + ": missing point count");
  std::vector<float> coords(std::size_t(count) * 3);
  in.read(reinterpret_cast<char*>(coords.data()), static_cast<std::streamsize>(coords.size() * sizeof(float)));
  const auto got = static_cast<std::size_t>(in.gcount()) / (3 * sizeof(float));
  if (got < count) {
    throw DataError(DataError::Kind::truncated, path.string() + ": header claims " + std::to_string(count) +
                                                    " points, payload holds " + std::to_string(got));
  }
  return PointCloud(std::move(coords));
}

PointCloud load_submap(const SubmapIndex& index, const SubmapRecord& record) {
  try {
    return read_point_file(index.path_of(record));
  } catch (const DataError& e) {
    throw DataError(e.kind(), "submap " + std::to_string(record.id) + ": " + e.what());
  }
}

// --- synthetic scenes -------------------------------------------------------

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("synth config: " + what); };
  if (places < 1) fail("places must be >= 1");
  if (traversals < 2) fail("traversals must be >= 2");
  if (query_traversals < 1 || query_traversals >= traversals) fail("query_traversals must be in [1, traversals)");
  if (!(grid_spacing > 100.0)) fail("grid_spacing must exceed 100 m so distinct places are negatives");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (points < 2) fail("points must be >= 2");
  if (!(scene_extent > 0.0)) fail("scene_extent must be positive");
}

std::vector<std::pair<std::string, std::string>> SyntheticConfig::entries() const {
  using detail::format_double;
  return {
      {"places", std::to_string(places)},
      {"traversals", std::to_string(traversals)},
      {"grid_spacing", format_double(grid_spacing)},
      {"noise_sigma", format_double(noise_sigma)},
      {"dropout", format_double(dropout)},
      {"points", std::to_string(points)},
      {"rotation", rotation == Rotation::yaw ? "yaw" : "none"},
      {"seed", std::to_string(seed)},
      {"query_traversals", std::to_string(query_traversals)},
      {"scene_extent", format_double(scene_extent)},
  };
}

void SyntheticConfig::set(const std::string& key, const std::string& value) {
  const std::string full = "synth." + key;
  if (key == "places") places = detail::parse_size(full, value);
  else if (key == "traversals") traversals = detail::parse_size(full, value);
  else if (key == "grid_spacing") grid_spacing = detail::parse_double(full, value);
  else if (key == "noise_sigma") noise_sigma = detail::parse_double(full, value);
  else if (key == "dropout") dropout = detail::parse_double(full, value);
  else if (key == "points") points = detail::parse_size(full, value);
  else if (key == "rotation") {
    if (value == "none") rotation = Rotation::none;
    else if (value == "yaw") rotation = Rotation::yaw;
    else throw std::invalid_argument(full + ": expected none or yaw, got '" + value + "'");
  } else if (key == "seed") seed = detail::parse_u64(full, value);
  else if (key == "query_traversals") query_traversals = detail::parse_size(full, value);
  else if (key == "scene_extent") scene_extent = detail::parse_double(full, value);
  else throw std::invalid_argument("unknown configuration key '" + full + "'");
}

namespace {

using Rng64 = std::mt19937_64;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

struct Surface {
  enum class Kind { wall, pole, box } kind;
  double cx, cy;
  double a, b, height, heading;  // kind-specific extents
  double area;
};

/// A random set of structures on a gently tilted ground patch.
std::vector<float> base_scene(const SyntheticConfig& cfg, std::size_t place) {
  Rng64 rng(mix_seed(cfg.seed, 0x5ce7e, place));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double e = cfg.scene_extent;

  const double tilt_x = uniform(-0.05, 0.05);
  const double tilt_y = uniform(-0.05, 0.05);
  std::vector<Surface> surfaces;
  const int count = 4 + static_cast<int>(rng() % 5);
  for (int s = 0; s < count; ++s) {
    Surface f{};
    const auto pick = rng() % 3;
    f.cx = uniform(-0.8 * e, 0.8 * e);
    f.cy = uniform(-0.8 * e, 0.8 * e);
    f.heading = uniform(0.0, std::numbers::pi);
    if (pick == 0) {
      f.kind = Surface::Kind::wall;
      f.a = uniform(0.3 * e, 0.9 * e);
      f.height = uniform(2.0, 5.0);
      f.area = f.a * f.height;
    } else if (pick == 1) {
      f.kind = Surface::Kind::pole;
      f.a = uniform(0.15, 0.5);
      f.height = uniform(3.0, 8.0);
      f.area = 2.0 * std::numbers::pi * f.a * f.height;
    } else {
      f.kind = Surface::Kind::box;
      f.a = uniform(1.0, 4.0);
      f.b = uniform(1.0, 4.0);
      f.height = uniform(1.0, 3.0);
      f.area = 2.0 * (f.a + f.b) * f.height + f.a * f.b;
    }
    surfaces.push_back(f);
  }

  const std::size_t n = cfg.points;
  const std::size_t ground = std::max<std::size_t>(1, static_cast<std::size_t>(0.3 * static_cast<double>(n)));
  std::vector<float> coords;
  coords.reserve(3 * n);
  auto ground_z = [&](double x, double y) { return tilt_x * x + tilt_y * y; };
  auto push = [&](double x, double y, double z) {
    coords.push_back(static_cast<float>(x));
    coords.push_back(static_cast<float>(y));
    coords.push_back(static_cast<float>(z));
  };
  for (std::size_t i = 0; i < ground; ++i) {
    const double x = uniform(-e, e);
    const double y = uniform(-e, e);
    push(x, y, ground_z(x, y));
  }
  std::vector<double> areas;
  for (const auto& f : surfaces) areas.push_back(f.area);
  std::discrete_distribution<std::size_t> choose(areas.begin(), areas.end());
  for (std::size_t i = ground; i < n; ++i) {
    const Surface& f = surfaces[choose(rng)];
    const double c = std::cos(f.heading);
    const double s = std::sin(f.heading);
    double lx = 0.0;
    double ly = 0.0;
    double z = 0.0;
    switch (f.kind) {
      case Surface::Kind::wall:
        lx = uniform(-0.5, 0.5) * f.a;
        ly = 0.0;
        z = uniform(0.0, f.height);
        break;
      case Surface::Kind::pole: {
        const double t = uniform(0.0, 2.0 * std::numbers::pi);
        lx = f.a * std::cos(t);
        ly = f.a * std::sin(t);
        z = uniform(0.0, f.height);
        break;
      }
      case Surface::Kind::box: {
        const double side = uniform(0.0, 2.0 * (f.a + f.b) * f.height + f.a * f.b);
        if (side < f.a * f.b) {  // roof
          lx = uniform(-0.5, 0.5) * f.a;
          ly = uniform(-0.5, 0.5) * f.b;
          z = f.height;
        } else {
          const double along = uniform(0.0, 2.0 * (f.a + f.b));
          z = uniform(0.0, f.height);
          if (along < f.a) {
            lx = along - 0.5 * f.a;
            ly = -0.5 * f.b;
          } else if (along < f.a + f.b) {
            lx = 0.5 * f.a;
            ly = along - f.a - 0.5 * f.b;
          } else if (along < 2.0 * f.a + f.b) {
            lx = along - f.a - f.b - 0.5 * f.a;
            ly = 0.5 * f.b;
          } else {
            lx = -0.5 * f.a;
            ly = along - 2.0 * f.a - f.b - 0.5 * f.b;
          }
        }
        break;
      }
    }
    const double x = f.cx + c * lx - s * ly;
    const double y = f.cy + s * lx + c * ly;
    push(x, y, ground_z(f.cx, f.cy) + z);
  }
  return coords;
}

/// One observation of a place: dropout with refill by duplicates, noise, yaw.
std::vector<float> observe(const SyntheticConfig& cfg, const std::vector<float>& base, std::size_t place,
                           std::size_t traversal) {
  Rng64 rng(mix_seed(cfg.seed, place + 1, traversal + 1));
  const std::size_t n = base.size() / 3;
  std::vector<float> coords = base;
  const auto dropped = static_cast<std::size_t>(cfg.dropout * static_cast<double>(n));
  if (dropped > 0 && dropped < n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < dropped; ++i) {
      const std::size_t target = order[i];
      const std::size_t source = order[dropped + rng() % (n - dropped)];
      std::copy_n(base.begin() + static_cast<std::ptrdiff_t>(3 * source), 3,
                  coords.begin() + static_cast<std::ptrdiff_t>(3 * target));
    }
  }
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (auto& v : coords) v = static_cast<float>(v + noise(rng));
  }
  if (cfg.rotation == Rotation::yaw) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const double t = angle(rng);
    const double c = std::cos(t);
    const double s = std::sin(t);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = coords[3 * i];
      const double y = coords[3 * i + 1];
      coords[3 * i] = static_cast<float>(c * x - s * y);
      coords[3 * i + 1] = static_cast<float>(s * x + c * y);
    }
  }
  return coords;
}

struct Synthesized {
  SubmapIndex index;
  std::vector<PointCloud> clouds;
};

Synthesized synthesize(const SyntheticConfig& cfg) {
  cfg.validate();
  Synthesized out;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.places))));
  for (std::size_t p = 0; p < cfg.places; ++p) {
    const double north = static_cast<double>(p / cols) * cfg.grid_spacing;
    const double east = static_cast<double>(p % cols) * cfg.grid_spacing;
    const std::vector<float> base = base_scene(cfg, p);
    for (std::size_t t = 0; t < cfg.traversals; ++t) {
      Rng64 rng(mix_seed(cfg.seed, 0x7a9, p * cfg.traversals + t));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double radius = 5.0 * std::sqrt(unit(rng));
      const double theta = 2.0 * std::numbers::pi * unit(rng);
      SubmapRecord r;
      r.id = p * cfg.traversals + t;
      char name[64];
      std::snprintf(name, sizeof(name), "p%04zu_t%02zu.epcs", p, t);
      r.file = name;
      r.northing = north + radius * std::cos(theta);
      r.easting = east + radius * std::sin(theta);
      r.split = t == 0 ? Split::database : t >= cfg.traversals - cfg.query_traversals ? Split::query : Split::train;
      out.index.records.push_back(r);
      out.clouds.emplace_back(observe(cfg, base, p, t));
    }
  }
  return out;
}

}  // namespace

SubmapIndex generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir) {
  Synthesized data = synthesize(config);
  std::filesystem::create_directories(out_dir);
  data.index.root = out_dir;
  for (std::size_t i = 0; i < data.clouds.size(); ++i) {
    write_point_file(out_dir / data.index.records[i].file, data.clouds[i]);
  }
  save_index(out_dir / "index.csv", data.index);
  return data.index;
}

Dataset synthesize_in_memory(const SyntheticConfig& config) {
  Synthesized data = synthesize(config);
  return Dataset(std::move(data.index), std::move(data.clouds));
}

Dataset::Dataset(SubmapIndex index, std::vector<PointCloud> clouds)
    : index_(std::move(index)), clouds_(std::move(clouds)) {
  if (clouds_.size() != index_.records.size()) throw std::invalid_argument("dataset: cloud count != record count");
  for (std::size_t i = 0; i < index_.records.size(); ++i) {
    if (!lookup_.emplace(index_.records[i].id, i).second) {
      throw DataError(DataError::Kind::duplicate_id,
                      "dataset: duplicate submap id " + std::to_string(index_.records[i].id));
    }
  }
}

Dataset Dataset::load(const std::filesystem::path& index_path) {
  SubmapIndex index = load_index(index_path);
  std::vector<PointCloud> clouds;
  clouds.reserve(index.size());
  for (const auto& r : index.records) clouds.push_back(load_submap(index, r));
  return Dataset(std::move(index), std::move(clouds));
}

std::size_t Dataset::position(std::uint64_t id) const {
  const auto it = lookup_.find(id);
  if (it == lookup_.end()) throw std::out_of_range("submap id " + std::to_string(id) + " not in dataset");
  return it->second;
}

}  // namespace epc
