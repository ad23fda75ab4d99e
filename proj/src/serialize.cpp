#include "rin/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rin {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'S', 'R', '1'};

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(char((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("TSR1: truncated stream");
    v |= U(std::uint8_t(c)) << (8 * i);
  }
  return v;
}

template <typename F>
void read_elements(std::istream& is, std::size_t count, std::vector<double>& out) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  out.resize(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = double(std::bit_cast<F>(get_le<Bits>(is)));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  os.write(kMagic.data(), kMagic.size());
  os.put(char(sizeof(T) == 4 ? DType::F32 : DType::F64));
  if (t.rank() > 255) throw FormatError("TSR1: rank exceeds 255");
  os.put(char(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint32_t>(os, std::uint32_t(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.numel() * sizeof(T)));
  } else {
    for (T v : t.data()) put_le<Bits>(os, std::bit_cast<Bits>(v));
  }
  if (!os) throw FormatError("TSR1: write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != 4 || magic != kMagic) throw FormatError("TSR1: bad magic");
  const auto dtype = get_le<std::uint8_t>(is);
  const auto rank = get_le<std::uint8_t>(is);
  if (dtype > 1) throw FormatError("TSR1: unknown dtype code " + std::to_string(dtype));
  if (rank == 0) throw FormatError("TSR1: rank 0 is not allowed");
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_le<std::uint32_t>(is);
    if (d == 0) throw FormatError("TSR1: zero dimension");
  }
  const std::size_t count = shape_numel(shape);
  std::vector<T> values(count);
  const bool native = std::endian::native == std::endian::little &&
                      ((dtype == 0 && sizeof(T) == 4) || (dtype == 1 && sizeof(T) == 8));
  if (native) {
    is.read(reinterpret_cast<char*>(values.data()), std::streamsize(count * sizeof(T)));
    if (std::size_t(is.gcount()) != count * sizeof(T)) throw FormatError("TSR1: truncated payload");
  } else {
    std::vector<double> tmp;
    if (dtype == 0) {
      read_elements<float>(is, count, tmp);
    } else {
      read_elements<double>(is, count, tmp);
    }
    for (std::size_t i = 0; i < count; ++i) values[i] = T(tmp[i]);
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& t : tensors) write_tensor(os, t);
}

template <typename T>
std::vector<Tensor<T>> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<Tensor<T>> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor<T>(is));
  return out;
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensors(const std::filesystem::path&, const std::vector<Tensor<float>>&);
template void save_tensors(const std::filesystem::path&, const std::vector<Tensor<double>>&);
template std::vector<Tensor<float>> load_tensors(const std::filesystem::path&);
template std::vector<Tensor<double>> load_tensors(const std::filesystem::path&);

}  // namespace rin
