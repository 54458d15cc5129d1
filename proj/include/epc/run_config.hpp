#pragma once

// Dotted key=value configuration shared by every CLI subcommand.
//
//   model.*  EpcNetConfig      loss.*   LossConfig      optim.*  AdamConfig
//   synth.*  SyntheticConfig   train.*  epochs, seed, batch_tuples, tuple mining
//   eval.*   radius, max_k

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "epc/training.hpp"

namespace epc {

struct TrainSettings {
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t batch_tuples = 1;
};

struct EvalSettings {
  double radius = 25.0;
  std::size_t max_k = 25;
};

struct ResolvedConfig {
  EpcNetConfig model;
  LossConfig loss;
  AdamConfig optim;
  SyntheticConfig synth;
  MiningConfig mining;
  TrainSettings train;
  EvalSettings eval;

  TrainOptions train_options() const;
  /// Applies one dotted assignment; throws std::invalid_argument for unknown
  /// keys or bad values.
  void apply(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
};

/// Ordered assignments from a config file and the command line. Later
/// assignments win.
class RunConfig {
 public:
  /// Lines of key=value; blank lines and lines starting with '#' are ignored.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  /// "key=value".
  void set(const std::string& assignment);

  /// Applies every assignment on top of `base`.
  ResolvedConfig resolve(ResolvedConfig base = {}) const;

 private:
  std::vector<std::pair<std::string, std::string>> assignments_;
};

}  // namespace epc
