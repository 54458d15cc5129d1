#pragma once

// Global descriptor heads: soft-assignment VLAD with grouped FC compression
// (G-VLAD), and the max-pool head. Also the EPCD descriptor table format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "epc/layers.hpp"

namespace epc {

template <typename T>
struct VladParams {
  Parameter<T> centers;  // [K, d]
  Affine<T> assign;      // d -> K scores

  VladParams() = default;
  VladParams(std::size_t d, std::size_t clusters, const std::string& name, Rng& rng);

  std::size_t clusters() const { return centers.value().dim(0); }
  std::size_t dim() const { return centers.value().dim(1); }
};

/// One (K·d/G) x O weight shared by the G segments, and one O-bias per group.
template <typename T>
struct GfcParams {
  std::size_t groups = 1;
  Parameter<T> weight;  // [K·d/G, O]
  Parameter<T> bias;    // [G, O]

  GfcParams() = default;
  /// Throws std::invalid_argument when groups does not divide flat_dim.
  GfcParams(std::size_t flat_dim, std::size_t out, std::size_t groups, const std::string& name, Rng& rng);

  std::size_t segment() const { return weight.value().dim(0); }
  std::size_t out() const { return weight.value().dim(1); }
};

/// y = x ⊙ sigmoid(x·W + b).
template <typename T>
struct GatingParams {
  Affine<T> gate;

  GatingParams() = default;
  GatingParams(std::size_t dim, const std::string& name, Rng& rng);
};

struct VladOptions {
  bool intra_normalize = true;
  bool final_normalize = true;
};

/// softmax over clusters of F·W + b. features [..., n, d] -> [..., n, K].
template <typename T>
Tensor<T> soft_assign(const Tensor<T>& features, const VladParams<T>& vlad);

/// V_k = Σ_i a_ik (f_i - c_k). features [n, d] -> [K, d], or [B, n, d] -> [B, K, d].
template <typename T>
Tensor<T> vlad_aggregate(const Tensor<T>& features, const VladParams<T>& vlad);

/// Splits the last axis (length K·d) into G contiguous segments, maps each with
/// the shared weight and its group bias, and sums the results.
template <typename T>
Tensor<T> grouped_fc(const Tensor<T>& flat, const GfcParams<T>& gfc);

/// Weights K·d·O/G plus biases G·O.
std::size_t gfc_param_count(std::size_t clusters, std::size_t dim, std::size_t out, std::size_t groups);

template <typename T>
Tensor<T> context_gating(const Tensor<T>& x, const GatingParams<T>& gating);

/// soft assign -> aggregate -> intra-normalize -> flatten -> grouped FC ->
/// optional gating -> L2 normalize. features [n, d] -> [O] or [B, n, d] -> [B, O].
template <typename T>
Tensor<T> g_vlad_forward(const Tensor<T>& features, const VladParams<T>& vlad, const GfcParams<T>& gfc,
                         const GatingParams<T>* gating = nullptr, const VladOptions& options = {});

template <typename T>
struct MaxPoolHeadParams {
  Affine<T> fc;

  MaxPoolHeadParams() = default;
  MaxPoolHeadParams(std::size_t in, std::size_t out, const std::string& name, Rng& rng);
};

/// Channel max over points, affine map, L2 normalize. [..., n, C] -> [..., O].
template <typename T>
Tensor<T> maxpool_head(const Tensor<T>& features, const MaxPoolHeadParams<T>& params);

/// Descriptors with their submap ids, row-major [count, dim].
struct DescriptorTable {
  std::size_t dim = 0;
  std::vector<float> values;
  std::vector<std::uint64_t> ids;

  std::size_t count() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  void append(std::uint64_t id, std::span<const float> descriptor);
};

/// "EPCD", u32 dim, u32 count, count·dim f32, count u64 ids.
void write_descriptors(std::ostream& out, const DescriptorTable& table);
DescriptorTable read_descriptors(std::istream& in);
void save_descriptors(const std::filesystem::path& path, const DescriptorTable& table);
DescriptorTable load_descriptors(const std::filesystem::path& path);

}  // namespace epc
