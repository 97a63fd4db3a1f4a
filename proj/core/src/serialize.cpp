#include "metabdc/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace metabdc {
namespace {

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  out.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!in) throw FormatError("array stream truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

template <typename T>
using bits_t = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;

template <typename T>
Array<T> read_payload(std::istream& in, Shape shape) {
  const std::size_t n = shape_size(shape);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = std::bit_cast<T>(get_le<bits_t<T>>(in));
  }
  return Array<T>(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
void write_array(std::ostream& out, const Array<T>& array) {
  out.write(kArrayMagic, 4);
  put_le<std::uint16_t>(out, kArrayFormatVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  if (array.rank() > 255) throw FormatError("array rank exceeds 255");
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(array.rank()));
  for (std::size_t d : array.shape()) put_le<std::uint64_t>(out, d);
  for (T v : array.data()) put_le<bits_t<T>>(out, std::bit_cast<bits_t<T>>(v));
  if (!out) throw FormatError("failed writing array");
}

AnyArray read_any_array(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kArrayMagic, 4) != 0) throw FormatError("bad array magic");
  const auto version = get_le<std::uint16_t>(in);
  if (version != kArrayFormatVersion) {
    throw FormatError("unsupported array format version " + std::to_string(version));
  }
  const auto dtype = get_le<std::uint8_t>(in);
  const auto rank = get_le<std::uint8_t>(in);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  switch (static_cast<DType>(dtype)) {
    case DType::f32:
      return read_payload<float>(in, std::move(shape));
    case DType::f64:
      return read_payload<double>(in, std::move(shape));
  }
  throw FormatError("unknown dtype tag " + std::to_string(dtype));
}

template <typename T>
Array<T> read_array(std::istream& in) {
  return std::visit(
      [](auto&& a) -> Array<T> {
        using Stored = typename std::decay_t<decltype(a)>::value_type;
        if constexpr (std::is_same_v<Stored, T>) {
          return std::move(a);
        } else {
          return a.template cast<T>();
        }
      },
      read_any_array(in));
}

template <typename T>
void save_array(const std::filesystem::path& path, const Array<T>& array) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_array(out, array);
}

template <typename T>
Array<T> load_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_array<T>(in);
}

template void write_array(std::ostream&, const Array<float>&);
template void write_array(std::ostream&, const Array<double>&);
template Array<float> read_array(std::istream&);
template Array<double> read_array(std::istream&);
template void save_array(const std::filesystem::path&, const Array<float>&);
template void save_array(const std::filesystem::path&, const Array<double>&);
template Array<float> load_array(const std::filesystem::path&);
template Array<double> load_array(const std::filesystem::path&);

}  // namespace metabdc
