#pragma once

// Submap index and point files, plus a synthetic place-recognition dataset
// generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "epc/spatial_graph.hpp"

namespace epc {

enum class Split { database, query, train };

std::string to_string(Split split);
Split parse_split(const std::string& text);

/// Failure reading index or point files. kind() tells which check failed.
class DataError : public std::runtime_error {
 public:
  enum class Kind { missing_file, malformed_header, malformed_record, truncated, duplicate_id };

  DataError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct SubmapRecord {
  std::uint64_t id = 0;
  std::string file;  // relative to the index directory unless absolute
  double northing = 0.0;
  double easting = 0.0;
  Split split = Split::database;
};

struct SubmapIndex {
  std::vector<SubmapRecord> records;
  /// Directory that relative record paths resolve against.
  std::filesystem::path root;

  std::size_t size() const { return records.size(); }
  const SubmapRecord& at(std::uint64_t id) const;
  std::vector<std::uint64_t> ids(Split split) const;
  std::filesystem::path path_of(const SubmapRecord& record) const;
};

/// Planar distance between the tagged coordinates of two records.
double world_distance(const SubmapRecord& a, const SubmapRecord& b);

/// CSV with header `id,file,northing,easting,split`.
SubmapIndex load_index(const std::filesystem::path& path);
void save_index(const std::filesystem::path& path, const SubmapIndex& index);

/// "EPCS", u32 count, count x (f32 x, y, z).
void write_point_file(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_point_file(const std::filesystem::path& path);
PointCloud load_submap(const SubmapIndex& index, const SubmapRecord& record);

enum class Rotation { none, yaw };

struct SyntheticConfig {
  std::size_t places = 16;
  std::size_t traversals = 5;
  double grid_spacing = 120.0;
  double noise_sigma = 0.03;
  double dropout = 0.1;
  std::size_t points = 256;
  Rotation rotation = Rotation::none;
  std::uint64_t seed = 0;
  /// Trailing traversals held out as queries; traversal 0 is the database,
  /// the ones between are training-only.
  std::size_t query_traversals = 1;
  /// Half-width of the square scene around each place, meters.
  double scene_extent = 10.0;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  void set(const std::string& key, const std::string& value);
};

/// Writes one point file per (place, traversal) and `index.csv` into out_dir.
SubmapIndex generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir);

/// An index with every cloud loaded.
class Dataset {
 public:
  Dataset() = default;
  Dataset(SubmapIndex index, std::vector<PointCloud> clouds);

  static Dataset load(const std::filesystem::path& index_path);

  const SubmapIndex& index() const { return index_; }
  const std::vector<PointCloud>& clouds() const { return clouds_; }
  const PointCloud& cloud(std::uint64_t id) const { return clouds_[position(id)]; }
  std::size_t position(std::uint64_t id) const;

 private:
  SubmapIndex index_;
  std::vector<PointCloud> clouds_;  // parallel to index_.records
  std::unordered_map<std::uint64_t, std::size_t> lookup_;
};

/// The dataset generate_synthetic would write, kept in memory.
Dataset synthesize_in_memory(const SyntheticConfig& config);

}  // namespace epc
