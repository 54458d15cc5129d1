#include "epc/models.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "detail/parse.hpp"
#include "epc/binary_io.hpp"
#include "epc/tensor_io.hpp"

namespace epc {

std::string to_string(HeadKind head) { return head == HeadKind::g_vlad ? "g_vlad" : "maxpool"; }

HeadKind parse_head(const std::string& text) {
  if (text == "g_vlad" || text == "gvlad") return HeadKind::g_vlad;
  if (text == "maxpool") return HeadKind::maxpool;
  throw std::invalid_argument("head: expected g_vlad or maxpool, got '" + text + "'");
}

EpcNetConfig EpcNetConfig::epcnet() { return EpcNetConfig{}; }

EpcNetConfig EpcNetConfig::epcnet_l() {
  EpcNetConfig c;
  c.head = HeadKind::maxpool;
  c.modules = 2;
  return c;
}

void EpcNetConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (modules < 1) fail("modules must be >= 1");
  if (k < 1) fail("k must be >= 1");
  if (width < 1 || mlp_width < 1 || output_dim < 1) fail("widths must be positive");
  if (proxy_depth < 1) fail("proxy_depth must be >= 1");
  if (head == HeadKind::g_vlad) {
    if (clusters < 1) fail("clusters must be >= 1");
    if (groups < 1 || (clusters * mlp_width) % groups != 0) {
      fail("groups = " + std::to_string(groups) + " must divide clusters*mlp_width = " +
           std::to_string(clusters * mlp_width));
    }
  }
}

std::vector<std::pair<std::string, std::string>> EpcNetConfig::entries() const {
  using detail::format_bool;
  return {
      {"head", to_string(head)},
      {"modules", std::to_string(modules)},
      {"k", std::to_string(k)},
      {"width", std::to_string(width)},
      {"mlp_width", std::to_string(mlp_width)},
      {"clusters", std::to_string(clusters)},
      {"output_dim", std::to_string(output_dim)},
      {"groups", std::to_string(groups)},
      {"proxy_depth", std::to_string(proxy_depth)},
      {"context_gating", format_bool(context_gating)},
      {"intra_normalize", format_bool(intra_normalize)},
      {"include_self", format_bool(include_self)},
  };
}

bool EpcNetConfig::has_key(const std::string& key) {
  for (const auto& [name, value] : EpcNetConfig{}.entries()) {
    if (name == key) return true;
  }
  return false;
}

void EpcNetConfig::set(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_size;
  const std::string full = "model." + key;
  if (key == "head") head = parse_head(value);
  else if (key == "modules") modules = parse_size(full, value);
  else if (key == "k") k = parse_size(full, value);
  else if (key == "width") width = parse_size(full, value);
  else if (key == "mlp_width") mlp_width = parse_size(full, value);
  else if (key == "clusters") clusters = parse_size(full, value);
  else if (key == "output_dim") output_dim = parse_size(full, value);
  else if (key == "groups") groups = parse_size(full, value);
  else if (key == "proxy_depth") proxy_depth = parse_size(full, value);
  else if (key == "context_gating") context_gating = parse_bool(full, value);
  else if (key == "intra_normalize") intra_normalize = parse_bool(full, value);
  else if (key == "include_self") include_self = parse_bool(full, value);
  else throw std::invalid_argument("unknown configuration key '" + full + "'");
}

template <typename T>
EpcModel<T>::EpcModel(const EpcNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  for (std::size_t i = 0; i < config_.modules; ++i) {
    convs_.emplace_back(i == 0 ? 3 : config_.width, config_.width, config_.proxy_depth, "proxy" + std::to_string(i),
                        rng);
  }
  mlp_ = DenseBlock<T>(config_.width * config_.modules, config_.mlp_width, "mlp", rng);
  if (config_.head == HeadKind::g_vlad) {
    vlad_ = VladParams<T>(config_.mlp_width, config_.clusters, "vlad", rng);
    gfc_ = GfcParams<T>(config_.clusters * config_.mlp_width, config_.output_dim, config_.groups, "gfc", rng);
    if (config_.context_gating) gating_ = GatingParams<T>(config_.output_dim, "gating", rng);
  } else {
    maxpool_ = MaxPoolHeadParams<T>(config_.mlp_width, config_.output_dim, "fc", rng);
  }
}

template <typename T>
Tensor<T> EpcModel<T>::forward(std::span<const PointCloud> clouds, BatchNormMode mode, ElementTally* tally) {
  if (clouds.empty()) throw std::invalid_argument("forward: empty batch");
  const KnnOptions knn = knn_options();
  std::vector<AdjacencyMatrix> graphs;
  graphs.reserve(clouds.size());
  for (const auto& cloud : clouds) {
    cloud.validate();
    if (cloud.size() <= config_.k) {
      throw std::invalid_argument("forward: cloud has " + std::to_string(cloud.size()) +
                                  " points; need more than k = " + std::to_string(config_.k));
    }
    graphs.push_back(build_adjacency(cloud, knn));
  }
  return forward(clouds, graphs, mode, tally);
}

template <typename T>
KnnOptions EpcModel<T>::knn_options() const {
  KnnOptions knn;
  knn.k = config_.k;
  knn.include_self = config_.include_self;
  return knn;
}

template <typename T>
Tensor<T> EpcModel<T>::forward(std::span<const PointCloud> clouds, std::span<const AdjacencyMatrix> graphs,
                               BatchNormMode mode, ElementTally* tally) {
  if (clouds.empty()) throw std::invalid_argument("forward: empty batch");
  if (graphs.size() != clouds.size()) {
    throw std::invalid_argument("forward: " + std::to_string(graphs.size()) + " graphs for " +
                                std::to_string(clouds.size()) + " clouds");
  }
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (graphs[i].size() != clouds[i].size() || graphs[i].k() != config_.k) {
      throw std::invalid_argument("forward: graph " + std::to_string(i) + " does not match its cloud");
    }
    if (tally) tally->add(graphs[i].size() * graphs[i].size());
  }
  Tensor<T> x = clouds_to_tensor<T>(clouds);
  std::vector<Tensor<T>> scales;
  for (auto& conv : convs_) {
    x = proxy_conv(x, graphs, conv, mode, tally);
    scales.push_back(x);
  }
  const Tensor<T> stacked = scales.size() == 1 ? scales.front() : concat(std::span<const Tensor<T>>(scales));
  const Tensor<T> features = mlp_.forward(stacked, mode);
  if (tally) tally->add(features.size());
  if (config_.head == HeadKind::maxpool) return maxpool_head(features, maxpool_);
  VladOptions options;
  options.intra_normalize = config_.intra_normalize;
  return g_vlad_forward(features, vlad_, gfc_, config_.context_gating ? &gating_ : nullptr, options);
}

template <typename T>
std::vector<float> EpcModel<T>::describe(const PointCloud& cloud) {
  NoGradScope<T> no_grad;
  const Tensor<T> d = forward(std::span<const PointCloud>(&cloud, 1), BatchNormMode::inference);
  return std::vector<float>(d.values().begin(), d.values().end());
}

template <typename T>
std::vector<Parameter<T>*> EpcModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto block = [&](DenseBlock<T>& b) {
    out.push_back(&b.affine.weight);
    out.push_back(&b.affine.bias);
    out.push_back(&b.bn.gamma);
    out.push_back(&b.bn.beta);
  };
  for (auto& conv : convs_) {
    for (auto& stage : conv.stages) block(stage);
  }
  block(mlp_);
  if (config_.head == HeadKind::g_vlad) {
    out.push_back(&vlad_.centers);
    out.push_back(&vlad_.assign.weight);
    out.push_back(&vlad_.assign.bias);
    out.push_back(&gfc_.weight);
    out.push_back(&gfc_.bias);
    if (config_.context_gating) {
      out.push_back(&gating_.gate.weight);
      out.push_back(&gating_.gate.bias);
    }
  } else {
    out.push_back(&maxpool_.fc.weight);
    out.push_back(&maxpool_.fc.bias);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> EpcModel<T>::parameters() const {
  auto all = const_cast<EpcModel*>(this)->parameters();
  return std::vector<const Parameter<T>*>(all.begin(), all.end());
}

template <typename T>
std::vector<BatchNormParams<T>*> EpcModel<T>::norms() {
  std::vector<BatchNormParams<T>*> out;
  for (auto& conv : convs_) {
    for (auto& stage : conv.stages) out.push_back(&stage.bn);
  }
  out.push_back(&mlp_.bn);
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> EpcModel<T>::buffers() {
  std::vector<NamedBuffer<T>> out;
  for (auto* bn : norms()) {
    const std::string& gamma = bn->gamma.name();
    const std::string base = gamma.substr(0, gamma.size() - std::string(".gamma").size());
    out.push_back({base + ".running_mean", &bn->running_mean});
    out.push_back({base + ".running_var", &bn->running_var});
  }
  return out;
}

template <typename T>
void EpcModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
void EpcModel<T>::reset_statistics() {
  for (auto* bn : norms()) bn->reset_statistics();
}

template <typename T>
template <typename U>
EpcModel<U> EpcModel<T>::cast() const {
  auto& self = const_cast<EpcModel&>(*this);
  EpcModel<U> out(config_, 0);
  auto src = self.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i]->value().values();
    auto to = dst[i]->value().values();
    std::transform(from.begin(), from.end(), to.begin(), [](T v) { return static_cast<U>(v); });
  }
  auto src_norms = self.norms();
  auto dst_norms = out.norms();
  for (std::size_t i = 0; i < src_norms.size(); ++i) {
    const auto& a = *src_norms[i];
    auto& b = *dst_norms[i];
    b.running_mean.assign(a.running_mean.begin(), a.running_mean.end());
    b.running_var.assign(a.running_var.begin(), a.running_var.end());
    b.initialized = a.initialized;
  }
  return out;
}

template <typename T>
EpcModel<T> EpcModel<T>::clone() const {
  return cast<T>();
}

template <typename T>
std::size_t count_params(const EpcModel<T>& model) {
  std::size_t total = 0;
  for (const auto* p : model.parameters()) total += p->size();
  return total;
}

namespace {

std::size_t dense_block_params(std::size_t in, std::size_t out) { return in * out + out + 2 * out; }

struct FlopCounter {
  std::size_t flops = 0;
  void mac(std::size_t count) { flops += 2 * count; }
  void elementwise(std::size_t count) { flops += count; }
  /// Affine + bias + batch norm + activation on `rows` rows.
  void dense_block(std::size_t rows, std::size_t in, std::size_t out) {
    mac(rows * in * out);
    elementwise(3 * rows * out);
  }
};

}  // namespace

std::size_t count_params(const EpcNetConfig& c) {
  c.validate();
  std::size_t total = 0;
  for (std::size_t i = 0; i < c.modules; ++i) {
    total += dense_block_params(i == 0 ? 3 : c.width, c.width);
    total += (c.proxy_depth - 1) * dense_block_params(c.width, c.width);
  }
  total += dense_block_params(c.width * c.modules, c.mlp_width);
  if (c.head == HeadKind::g_vlad) {
    total += c.clusters * c.mlp_width;                 // centers
    total += c.mlp_width * c.clusters + c.clusters;    // assignment
    total += gfc_param_count(c.clusters, c.mlp_width, c.output_dim, c.groups);
    if (c.context_gating) total += c.output_dim * c.output_dim + c.output_dim;
  } else {
    total += c.mlp_width * c.output_dim + c.output_dim;
  }
  return total;
}

CostReport count_flops(const EpcNetConfig& c, std::size_t n) {
  c.validate();
  CostReport report;
  report.parameter_count = count_params(c);
  FlopCounter f;
  std::size_t act = n * n;
  f.elementwise(8 * n * n);
  for (std::size_t i = 0; i < c.modules; ++i) {
    const std::size_t in = i == 0 ? 3 : c.width;
    f.mac(n * c.k * in);       // neighbor sums
    f.elementwise(n * in);     // 1/k scaling
    f.elementwise(n * in);     // q - y
    act += 3 * n * in;
    for (std::size_t s = 0; s < c.proxy_depth; ++s) {
      f.dense_block(n, s == 0 ? in : c.width, c.width);
      act += n * c.width;
    }
    if (in == c.width) {
      f.elementwise(n * c.width);
      act += n * c.width;
    }
  }
  f.dense_block(n, c.width * c.modules, c.mlp_width);
  act += n * c.mlp_width;
  const std::size_t d = c.mlp_width;
  if (c.head == HeadKind::g_vlad) {
    const std::size_t K = c.clusters;
    const std::size_t O = c.output_dim;
    f.mac(n * d * K);                 // assignment scores
    f.elementwise(2 * n * K);         // bias + softmax
    f.mac(n * K * d);                 // A^T F
    f.elementwise(n * K);             // assignment mass
    f.elementwise(2 * K * d);         // mass * c_k and the subtraction
    if (c.intra_normalize) f.elementwise(K * d);
    f.elementwise(K * d - K * d / c.groups);  // summing the G segments
    f.mac(K * d / c.groups * O);
    f.elementwise(O);
    if (c.context_gating) {
      f.mac(O * O);
      f.elementwise(3 * O);  // bias, sigmoid, product
    }
    f.elementwise(O);  // final normalization
  } else {
    f.elementwise(n * d);  // max pool
    f.mac(d * c.output_dim);
    f.elementwise(2 * c.output_dim);
  }
  report.flop_count = f.flops;
  report.activation_elements = act;
  return report;
}

namespace {

std::string config_text(const EpcNetConfig& config) {
  std::string text;
  for (const auto& [key, value] : config.entries()) text += "model." + key + "=" + value + "\n";
  return text;
}

void write_checkpoint(std::ostream& out, EpcModel<float>& model) {
  std::map<std::string, Tensor<float>> tensors;
  for (auto* p : model.parameters()) tensors.emplace(p->name(), p->value());
  for (const auto& b : model.buffers()) {
    tensors.emplace(b.name, Tensor<float>({b.values->size()}, *b.values));
  }
  io::write_magic(out, "EPCM");
  const std::string text = config_text(model.config());
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, EpcModel<float>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

EpcModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::expect_magic(in, "EPCM");
  const auto text_size = io::read_le<std::uint32_t>(in, "checkpoint config length");
  std::string text(text_size, '\0');
  if (!in.read(text.data(), text_size)) throw FormatError("truncated checkpoint config block");
  EpcNetConfig config;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.rfind("model.", 0) != 0) {
      throw FormatError("checkpoint config: bad line '" + line + "'");
    }
    config.set(line.substr(6, eq - 6), line.substr(eq + 1));
  }
  EpcModel<float> model(config, 0);
  std::map<std::string, Tensor<float>*> params;
  for (auto* p : model.parameters()) params.emplace(p->name(), &p->value());
  std::map<std::string, std::vector<float>*> buffers;
  for (const auto& b : model.buffers()) buffers.emplace(b.name, b.values);

  const auto count = io::read_le<std::uint32_t>(in, "checkpoint tensor count");
  if (count != params.size() + buffers.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors; model expects " +
                      std::to_string(params.size() + buffers.size()));
  }
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = io::read_le<std::uint32_t>(in, "tensor name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated tensor name");
    const Tensor<float> tensor = read_tensor<float>(in);
    if (auto it = params.find(name); it != params.end()) {
      if (tensor.shape() != it->second->shape()) {
        throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(tensor.shape()) +
                          ", model expects " + shape_string(it->second->shape()));
      }
      std::copy(tensor.values().begin(), tensor.values().end(), it->second->values().begin());
    } else if (auto bt = buffers.find(name); bt != buffers.end()) {
      if (tensor.size() != bt->second->size()) throw FormatError("checkpoint buffer " + name + " has wrong length");
      std::copy(tensor.values().begin(), tensor.values().end(), bt->second->begin());
    } else {
      throw FormatError("checkpoint tensor " + name + " does not belong to the model");
    }
  }
  return model;
}

std::uint64_t checkpoint_hash(EpcModel<float>& model) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, model);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : out.str()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template class EpcModel<float>;
template class EpcModel<double>;
template EpcModel<double> EpcModel<float>::cast<double>() const;
template EpcModel<float> EpcModel<double>::cast<float>() const;
template std::size_t count_params(const EpcModel<float>&);
template std::size_t count_params(const EpcModel<double>&);

}  // namespace epc
