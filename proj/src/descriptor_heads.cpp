#include "epc/descriptor_heads.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

#include "epc/binary_io.hpp"

namespace epc {

template <typename T>
VladParams<T>::VladParams(std::size_t d, std::size_t clusters, const std::string& name, Rng& rng)
    : centers(name + ".centers", xavier_uniform<T>(clusters, d, rng)), assign(d, clusters, name + ".assign", rng) {
  if (clusters == 0) throw std::invalid_argument("vlad: need at least one cluster");
}

template <typename T>
GfcParams<T>::GfcParams(std::size_t flat_dim, std::size_t out, std::size_t groups_, const std::string& name,
                        Rng& rng)
    : groups(groups_) {
  if (groups == 0 || flat_dim % groups != 0) {
    throw std::invalid_argument("grouped fc: group count " + std::to_string(groups) + " does not divide " +
                                std::to_string(flat_dim));
  }
  weight = Parameter<T>(name + ".weight", xavier_uniform<T>(flat_dim / groups, out, rng));
  bias = Parameter<T>(name + ".bias", Tensor<T>({groups, out}));
}

template <typename T>
GatingParams<T>::GatingParams(std::size_t dim, const std::string& name, Rng& rng) : gate(dim, dim, name, rng) {}

template <typename T>
MaxPoolHeadParams<T>::MaxPoolHeadParams(std::size_t in, std::size_t out, const std::string& name, Rng& rng)
    : fc(in, out, name, rng) {}

template <typename T>
Tensor<T> soft_assign(const Tensor<T>& features, const VladParams<T>& vlad) {
  const Tensor<T> scores = vlad.assign(features);
  return softmax(scores, scores.rank() - 1);
}

template <typename T>
Tensor<T> vlad_aggregate(const Tensor<T>& features, const VladParams<T>& vlad) {
  if (features.rank() < 2 || features.rank() > 3 || features.shape().back() != vlad.dim()) {
    throw ShapeError("vlad_aggregate: features " + shape_string(features.shape()) + " vs centers " +
                     shape_string(vlad.centers.value().shape()));
  }
  const Tensor<T> a = soft_assign(features, vlad);
  const Tensor<T> weighted = matmul(transpose(a), features);
  const Tensor<T> mass = reduce(a, a.rank() - 2, Reduce::sum);
  return sub(weighted, row_scale(vlad.centers.value(), mass));
}

template <typename T>
Tensor<T> grouped_fc(const Tensor<T>& flat, const GfcParams<T>& gfc) {
  const std::size_t flat_dim = gfc.segment() * gfc.groups;
  if (flat.rank() < 1 || flat.shape().back() != flat_dim) {
    throw ShapeError("grouped_fc: input " + shape_string(flat.shape()) + " vs " + std::to_string(gfc.groups) +
                     " groups of weight " + shape_string(gfc.weight.value().shape()));
  }
  Shape split = flat.shape();
  split.back() = gfc.groups;
  split.push_back(gfc.segment());
  const Tensor<T> summed = reduce(reshape(flat, split), split.size() - 2, Reduce::sum);
  const Tensor<T> bias = reduce(gfc.bias.value(), 0, Reduce::sum);
  return linear(summed, gfc.weight.value(), bias);
}

std::size_t gfc_param_count(std::size_t clusters, std::size_t dim, std::size_t out, std::size_t groups) {
  const std::size_t flat = clusters * dim;
  if (groups == 0 || flat % groups != 0) {
    throw std::invalid_argument("gfc_param_count: group count " + std::to_string(groups) + " does not divide " +
                                std::to_string(flat));
  }
  return flat / groups * out + groups * out;
}

template <typename T>
Tensor<T> context_gating(const Tensor<T>& x, const GatingParams<T>& gating) {
  return mul(x, sigmoid(gating.gate(x)));
}

template <typename T>
Tensor<T> g_vlad_forward(const Tensor<T>& features, const VladParams<T>& vlad, const GfcParams<T>& gfc,
                         const GatingParams<T>* gating, const VladOptions& options) {
  Tensor<T> v = vlad_aggregate(features, vlad);
  if (options.intra_normalize) v = l2_normalize(v);
  Shape flat_shape(v.shape().begin(), v.shape().end() - 2);
  flat_shape.push_back(vlad.clusters() * vlad.dim());
  Tensor<T> x = grouped_fc(reshape(v, flat_shape), gfc);
  if (gating) x = context_gating(x, *gating);
  return options.final_normalize ? l2_normalize(x) : x;
}

template <typename T>
Tensor<T> maxpool_head(const Tensor<T>& features, const MaxPoolHeadParams<T>& params) {
  if (features.rank() < 2) throw ShapeError("maxpool_head: expected [..., n, C], got " + shape_string(features.shape()));
  return l2_normalize(params.fc(reduce(features, features.rank() - 2, Reduce::max)));
}

void DescriptorTable::append(std::uint64_t id, std::span<const float> descriptor) {
  if (ids.empty() && dim == 0) dim = descriptor.size();
  if (descriptor.size() != dim) {
    throw ShapeError("descriptor table: dimension " + std::to_string(descriptor.size()) + " vs table dimension " +
                     std::to_string(dim));
  }
  values.insert(values.end(), descriptor.begin(), descriptor.end());
  ids.push_back(id);
}

void write_descriptors(std::ostream& out, const DescriptorTable& table) {
  io::write_magic(out, "EPCD");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.count()));
  out.write(reinterpret_cast<const char*>(table.values.data()),
            static_cast<std::streamsize>(table.values.size() * sizeof(float)));
  for (std::uint64_t id : table.ids) io::write_le<std::uint64_t>(out, id);
}

DescriptorTable read_descriptors(std::istream& in) {
  io::expect_magic(in, "EPCD");
  DescriptorTable table;
  table.dim = io::read_le<std::uint32_t>(in, "descriptor dimension");
  const std::size_t count = io::read_le<std::uint32_t>(in, "descriptor count");
  table.values.resize(count * table.dim);
  if (!in.read(reinterpret_cast<char*>(table.values.data()),
               static_cast<std::streamsize>(table.values.size() * sizeof(float)))) {
    throw FormatError("truncated descriptor payload: header claims " + std::to_string(count) + " descriptors");
  }
  table.ids.resize(count);
  for (auto& id : table.ids) id = io::read_le<std::uint64_t>(in, "descriptor id");
  return table;
}

void save_descriptors(const std::filesystem::path& path, const DescriptorTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_descriptors(out, table);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DescriptorTable load_descriptors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_descriptors(in);
}

#define EPC_INSTANTIATE_HEADS(T)                                                                           \
  template struct VladParams<T>;                                                                           \
  template struct GfcParams<T>;                                                                            \
  template struct GatingParams<T>;                                                                         \
  template struct MaxPoolHeadParams<T>;                                                                    \
  template Tensor<T> soft_assign(const Tensor<T>&, const VladParams<T>&);                                  \
  template Tensor<T> vlad_aggregate(const Tensor<T>&, const VladParams<T>&);                               \
  template Tensor<T> grouped_fc(const Tensor<T>&, const GfcParams<T>&);                                    \
  template Tensor<T> context_gating(const Tensor<T>&, const GatingParams<T>&);                             \
  template Tensor<T> g_vlad_forward(const Tensor<T>&, const VladParams<T>&, const GfcParams<T>&,           \
                                    const GatingParams<T>*, const VladOptions&);                           \
  template Tensor<T> maxpool_head(const Tensor<T>&, const MaxPoolHeadParams<T>&);

EPC_INSTANTIATE_HEADS(float)
EPC_INSTANTIATE_HEADS(double)

}  // namespace epc
