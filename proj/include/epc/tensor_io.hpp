#pragma once

// EPCT tensor files: "EPCT", u32 rank, rank x u32 dims, little-endian f32 data
// in row-major order.

#include <filesystem>
#include <istream>
#include <ostream>

#include "epc/binary_io.hpp"
#include "epc/tensor.hpp"

namespace epc {

/// Writes values as 32-bit floats regardless of T.
template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

template <typename T>
Tensor<T> read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> load_tensor(const std::filesystem::path& path);

}  // namespace epc
