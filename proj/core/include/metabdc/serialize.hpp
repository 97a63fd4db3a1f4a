#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "metabdc/array.hpp"

namespace metabdc {

// Binary array layout, all integers little-endian:
//   "MBDC" | u16 version | u8 dtype (1 = f32, 2 = f64) | u8 rank
//   | rank x u64 dims | row-major IEEE-754 payload
inline constexpr char kArrayMagic[4] = {'M', 'B', 'D', 'C'};
inline constexpr std::uint16_t kArrayFormatVersion = 1;

using AnyArray = std::variant<ArrayF, ArrayD>;

template <typename T>
void write_array(std::ostream& out, const Array<T>& array);

/// Reads one array in whatever dtype it was stored with.
AnyArray read_any_array(std::istream& in);

/// Reads one array and converts it to T if it was stored in the other dtype.
template <typename T>
Array<T> read_array(std::istream& in);

template <typename T>
void save_array(const std::filesystem::path& path, const Array<T>& array);
template <typename T>
Array<T> load_array(const std::filesystem::path& path);

}  // namespace metabdc
