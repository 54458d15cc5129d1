#pragma once

// EPC-Net (proxy-conv backbone + G-VLAD) and EPC-Net-L (two proxy-conv
// modules + max pool), with parameter/FLOP accounting and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "epc/descriptor_heads.hpp"
#include "epc/spatial_graph.hpp"

namespace epc {

enum class HeadKind { g_vlad, maxpool };

std::string to_string(HeadKind head);
HeadKind parse_head(const std::string& text);

struct EpcNetConfig {
  HeadKind head = HeadKind::g_vlad;
  std::size_t modules = 4;
  std::size_t k = 20;
  std::size_t width = 64;
  std::size_t mlp_width = 1024;
  std::size_t clusters = 64;
  std::size_t output_dim = 256;
  std::size_t groups = 4;
  /// Dense blocks inside each proxy conv's g_Θ.
  std::size_t proxy_depth = 2;
  bool context_gating = true;
  bool intra_normalize = true;
  bool include_self = false;

  static EpcNetConfig epcnet();
  static EpcNetConfig epcnet_l();

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  /// key=value view, keys without the "model." prefix.
  std::vector<std::pair<std::string, std::string>> entries() const;
  /// Throws std::invalid_argument for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  static bool has_key(const std::string& key);
};

/// Named non-learnable state (batch-norm running statistics).
template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values = nullptr;
};

template <typename T>
class EpcModel {
 public:
  EpcModel() = default;
  EpcModel(const EpcNetConfig& config, std::uint64_t seed);

  const EpcNetConfig& config() const { return config_; }

  /// Descriptors [B, O] for a batch of equally sized clouds. `tally` collects
  /// the adjacency entries and the backbone + MLP feature maps.
  Tensor<T> forward(std::span<const PointCloud> clouds, BatchNormMode mode, ElementTally* tally = nullptr);
  /// Same, reusing precomputed graphs (one per cloud, built with knn_options()).
  Tensor<T> forward(std::span<const PointCloud> clouds, std::span<const AdjacencyMatrix> graphs, BatchNormMode mode,
                    ElementTally* tally = nullptr);
  KnnOptions knn_options() const;

  /// Inference-mode descriptor of one cloud, without recording.
  std::vector<float> describe(const PointCloud& cloud);

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::vector<NamedBuffer<T>> buffers();
  void zero_grad();

  /// Independent copy (no shared storage).
  EpcModel clone() const;

  /// Same architecture and values in another precision.
  template <typename U>
  EpcModel<U> cast() const;

  /// Sets BN running statistics to mean 0 / variance 1.
  void reset_statistics();

 private:
  template <typename U>
  friend class EpcModel;

  std::vector<BatchNormParams<T>*> norms();

  EpcNetConfig config_;
  std::vector<ProxyConvParams<T>> convs_;
  DenseBlock<T> mlp_;
  VladParams<T> vlad_;
  GfcParams<T> gfc_;
  GatingParams<T> gating_;
  MaxPoolHeadParams<T> maxpool_;
};

template <typename T>
std::size_t count_params(const EpcModel<T>& model);

struct CostReport {
  std::size_t parameter_count = 0;
  std::size_t flop_count = 0;
  /// Adjacency entries plus backbone and MLP feature maps per cloud.
  std::size_t activation_elements = 0;
};

/// Analytic costs for one cloud of n points. One multiply-accumulate is 2
/// FLOPs; bias adds, normalizations and activations are 1 FLOP per element;
/// the adjacency build costs 8 FLOPs per point pair.
CostReport count_flops(const EpcNetConfig& config, std::size_t n);

/// Same as count_params on an instantiated model, without allocating one.
std::size_t count_params(const EpcNetConfig& config);

/// "EPCM", u32 length + key=value config text, u32 tensor count, then per
/// tensor (sorted by name): u32 name length, name, EPCT tensor.
void save_checkpoint(const std::filesystem::path& path, EpcModel<float>& model);
EpcModel<float> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 over the serialized checkpoint bytes.
std::uint64_t checkpoint_hash(EpcModel<float>& model);

}  // namespace epc
