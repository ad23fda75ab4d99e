#pragma once

// TSR1 tensor container:
//   "TSR1" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u32 LE dims |
//   raw LE elements.
// Tensors of either dtype can be read into either precision.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "rin/tensor.hpp"

namespace rin {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor<T>>& tensors);

/// Reads tensors until end of file.
template <typename T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& path);

}  // namespace rin
