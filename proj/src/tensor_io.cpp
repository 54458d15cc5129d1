#include "epc/tensor_io.hpp"

#include <fstream>
#include <limits>
#include <vector>

namespace epc {

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  io::write_magic(out, "EPCT");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("tensor dimension exceeds u32");
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  std::vector<float> buffer(tensor.values().begin(), tensor.values().end());
  out.write(reinterpret_cast<const char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size() * sizeof(float)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  io::expect_magic(in, "EPCT");
  const auto rank = io::read_le<std::uint32_t>(in, "tensor rank");
  if (rank > 16) throw FormatError("tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& d : shape) d = io::read_le<std::uint32_t>(in, "tensor dimension");
  const std::size_t count = shape_size(shape);
  std::vector<float> buffer(count);
  if (!in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(count * sizeof(float)))) {
    throw FormatError("truncated tensor payload: expected " + std::to_string(count) + " floats for shape " +
                      shape_string(shape));
  }
  return Tensor<T>::from_storage(std::move(shape), Storage<T>(buffer.begin(), buffer.end()));
}

void save_tensor(const std::filesystem::path& path, const Tensor<float>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(out, tensor);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor<float> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_tensor<float>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace epc
