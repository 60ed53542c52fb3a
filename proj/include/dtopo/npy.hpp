#pragma once

// Reader and writer for the NumPy .npy container, format version 1.0.
//
// Payloads are normalised on load: byte order is converted to the host and
// Fortran-ordered arrays are transposed into C order. The Array keeps the
// on-disk dtype so that writing it back reproduces the original encoding of
// the logical array.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dtopo/error.hpp"

namespace dtopo::npy {

enum class ElementKind { Float, SignedInt, UnsignedInt };

struct Dtype {
  ElementKind kind = ElementKind::Float;
  std::size_t size = 8;
  std::endian order = std::endian::little;

  static Dtype parse(std::string_view descr) {
    if (descr.size() != 3) throw DataError("unsupported dtype '" + std::string(descr) + "'");
    Dtype d;
    switch (descr[0]) {
      case '<': d.order = std::endian::little; break;
      case '>': d.order = std::endian::big; break;
      case '=':
      case '|': d.order = std::endian::native; break;
      default: throw DataError("unsupported dtype '" + std::string(descr) + "'");
    }
    switch (descr[1]) {
      case 'f': d.kind = ElementKind::Float; break;
      case 'i': d.kind = ElementKind::SignedInt; break;
      case 'u': d.kind = ElementKind::UnsignedInt; break;
      default: throw DataError("unsupported dtype '" + std::string(descr) + "'");
    }
    d.size = static_cast<std::size_t>(descr[2] - '0');
    const bool ok = (d.kind == ElementKind::Float && (d.size == 4 || d.size == 8)) ||
                    (d.kind == ElementKind::SignedInt && (d.size == 4 || d.size == 8)) ||
                    (d.kind == ElementKind::UnsignedInt && d.size == 1);
    if (!ok) throw DataError("unsupported dtype '" + std::string(descr) + "'");
    return d;
  }

  std::string descr() const {
    std::string s;
    s += size == 1 ? '|' : (order == std::endian::big ? '>' : '<');
    s += kind == ElementKind::Float ? 'f' : kind == ElementKind::SignedInt ? 'i' : 'u';
    s += static_cast<char>('0' + size);
    return s;
  }

  bool operator==(const Dtype&) const = default;
};

inline constexpr Dtype f8{ElementKind::Float, 8, std::endian::little};
inline constexpr Dtype f4{ElementKind::Float, 4, std::endian::little};
inline constexpr Dtype i8{ElementKind::SignedInt, 8, std::endian::little};
inline constexpr Dtype i4{ElementKind::SignedInt, 4, std::endian::little};
inline constexpr Dtype u1{ElementKind::UnsignedInt, 1, std::endian::little};

struct Array {
  Dtype dtype;
  std::vector<std::size_t> shape;
  /// Host byte order, C (row-major) layout.
  std::vector<std::byte> data;

  std::size_t count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  double real_at(std::size_t flat) const {
    const std::byte* p = data.data() + flat * dtype.size;
    switch (dtype.kind) {
      case ElementKind::Float:
        if (dtype.size == 4) return load<float>(p);
        return load<double>(p);
      case ElementKind::SignedInt:
        if (dtype.size == 4) return load<std::int32_t>(p);
        return static_cast<double>(load<std::int64_t>(p));
      case ElementKind::UnsignedInt:
        return load<std::uint8_t>(p);
    }
    return 0.0;
  }

  std::int64_t int_at(std::size_t flat) const {
    const std::byte* p = data.data() + flat * dtype.size;
    if (dtype.kind == ElementKind::SignedInt)
      return dtype.size == 4 ? load<std::int32_t>(p) : load<std::int64_t>(p);
    if (dtype.kind == ElementKind::UnsignedInt) return load<std::uint8_t>(p);
    throw DataError("array of dtype " + dtype.descr() + " is not integral");
  }

  std::vector<double> to_real() const {
    std::vector<double> out(count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = real_at(i);
    return out;
  }

  std::vector<std::int64_t> to_int() const {
    std::vector<std::int64_t> out(count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = int_at(i);
    return out;
  }

 private:
  template <class T>
  static T load(const std::byte* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
  }
};

namespace detail {

inline constexpr char kMagic[] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

inline void swap_elements(std::span<std::byte> bytes, std::size_t size) {
  if (size == 1) return;
  for (std::size_t off = 0; off + size <= bytes.size(); off += size)
    std::reverse(bytes.begin() + off, bytes.begin() + off + size);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

/// Value text following `'key':` in the header dictionary.
inline std::string_view dict_value(std::string_view header, std::string_view key) {
  const std::string quoted_single = "'" + std::string(key) + "'";
  const std::string quoted_double = "\"" + std::string(key) + "\"";
  std::size_t pos = header.find(quoted_single);
  std::size_t key_len = quoted_single.size();
  if (pos == std::string_view::npos) {
    pos = header.find(quoted_double);
    key_len = quoted_double.size();
  }
  if (pos == std::string_view::npos) throw DataError("npy header lacks key '" + std::string(key) + "'");
  std::size_t colon = header.find(':', pos + key_len);
  if (colon == std::string_view::npos) throw DataError("malformed npy header");
  std::string_view rest = header.substr(colon + 1);
  rest = trim(rest);
  if (!rest.empty() && rest.front() == '(') {
    const std::size_t close = rest.find(')');
    if (close == std::string_view::npos) throw DataError("malformed npy shape");
    return rest.substr(0, close + 1);
  }
  if (!rest.empty() && (rest.front() == '\'' || rest.front() == '"')) {
    const std::size_t close = rest.find(rest.front(), 1);
    if (close == std::string_view::npos) throw DataError("malformed npy header string");
    return rest.substr(1, close - 1);
  }
  const std::size_t end = rest.find_first_of(",}");
  return trim(rest.substr(0, end));
}

inline std::vector<std::size_t> parse_shape(std::string_view text) {
  if (text.size() < 2 || text.front() != '(' || text.back() != ')') throw DataError("malformed npy shape");
  std::vector<std::size_t> shape;
  std::string_view body = text.substr(1, text.size() - 2);
  while (!body.empty()) {
    const std::size_t comma = body.find(',');
    std::string_view item = trim(body.substr(0, comma));
    if (!item.empty()) {
      std::size_t v = 0;
      for (char c : item) {
        if (c < '0' || c > '9') throw DataError("malformed npy shape entry '" + std::string(item) + "'");
        v = v * 10 + static_cast<std::size_t>(c - '0');
      }
      shape.push_back(v);
    }
    if (comma == std::string_view::npos) break;
    body.remove_prefix(comma + 1);
  }
  return shape;
}

/// Reorders a Fortran-layout payload into C layout.
inline std::vector<std::byte> fortran_to_c(std::span<const std::byte> src, const std::vector<std::size_t>& shape,
                                           std::size_t elem) {
  const std::size_t n = src.size() / elem;
  std::vector<std::byte> dst(src.size());
  const std::size_t rank = shape.size();
  std::vector<std::size_t> index(rank, 0);
  std::vector<std::size_t> f_stride(rank, 1);
  for (std::size_t d = 1; d < rank; ++d) f_stride[d] = f_stride[d - 1] * shape[d - 1];
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t f = 0;
    for (std::size_t d = 0; d < rank; ++d) f += index[d] * f_stride[d];
    std::memcpy(dst.data() + c * elem, src.data() + f * elem, elem);
    for (std::size_t d = rank; d-- > 0;) {
      if (++index[d] < shape[d]) break;
      index[d] = 0;
    }
  }
  return dst;
}

}  // namespace detail

inline Array read(std::istream& in, const std::string& what = "stream") {
  char magic[6];
  if (!in.read(magic, 6) || !std::equal(magic, magic + 6, detail::kMagic))
    throw DataError(what + ": bad magic, not an npy container");
  unsigned char version[2];
  if (!in.read(reinterpret_cast<char*>(version), 2)) throw DataError(what + ": truncated header");
  if (version[0] != 1 || version[1] != 0)
    throw DataError(what + ": unsupported npy version " + std::to_string(version[0]) + "." +
                    std::to_string(version[1]));
  unsigned char len_bytes[2];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 2)) throw DataError(what + ": truncated header");
  const std::size_t header_len = len_bytes[0] | (static_cast<std::size_t>(len_bytes[1]) << 8);
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) throw DataError(what + ": truncated header");

  Array arr;
  arr.dtype = Dtype::parse(detail::dict_value(header, "descr"));
  const std::string_view fortran = detail::dict_value(header, "fortran_order");
  bool fortran_order;
  if (fortran == "True") {
    fortran_order = true;
  } else if (fortran == "False") {
    fortran_order = false;
  } else {
    throw DataError(what + ": malformed fortran_order");
  }
  arr.shape = detail::parse_shape(detail::dict_value(header, "shape"));

  const std::size_t bytes = arr.count() * arr.dtype.size;
  std::vector<std::byte> payload(bytes);
  if (bytes > 0 && !in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes)))
    throw DataError(what + ": truncated payload");
  if (arr.dtype.order != std::endian::native) detail::swap_elements(payload, arr.dtype.size);
  arr.data = fortran_order && arr.shape.size() > 1 ? detail::fortran_to_c(payload, arr.shape, arr.dtype.size)
                                                   : std::move(payload);
  return arr;
}

inline Array read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read(in, path.string());
}

/// Writes `arr` in C order using arr.dtype's byte order.
inline void write(std::ostream& out, const Array& arr) {
  std::ostringstream dict;
  dict << "{'descr': '" << arr.dtype.descr() << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < arr.shape.size(); ++i) {
    dict << arr.shape[i];
    if (arr.shape.size() == 1 || i + 1 < arr.shape.size()) dict << ',';
    if (i + 1 < arr.shape.size()) dict << ' ';
  }
  dict << "), }";
  std::string header = dict.str();
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';

  out.write(detail::kMagic, 6);
  const unsigned char preamble[4] = {1, 0, static_cast<unsigned char>(header.size() & 0xff),
                                     static_cast<unsigned char>(header.size() >> 8)};
  out.write(reinterpret_cast<const char*>(preamble), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  if (arr.dtype.order != std::endian::native && arr.dtype.size > 1) {
    std::vector<std::byte> swapped = arr.data;
    detail::swap_elements(swapped, arr.dtype.size);
    out.write(reinterpret_cast<const char*>(swapped.data()), static_cast<std::streamsize>(swapped.size()));
  } else {
    out.write(reinterpret_cast<const char*>(arr.data.data()), static_cast<std::streamsize>(arr.data.size()));
  }
}

inline void write(const std::filesystem::path& path, const Array& arr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write(out, arr);
  if (!out) throw DataError("write failed for " + path.string());
}

template <class T>
Array make_array(std::span<const T> values, std::vector<std::size_t> shape, Dtype dtype) {
  Array arr;
  arr.dtype = dtype;
  arr.shape = std::move(shape);
  if (arr.count() != values.size()) throw UsageError("npy::make_array: shape does not match value count");
  arr.data.resize(values.size() * dtype.size);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::byte* p = arr.data.data() + i * dtype.size;
    auto store = [p](auto v) { std::memcpy(p, &v, sizeof v); };
    switch (dtype.kind) {
      case ElementKind::Float:
        if (dtype.size == 4) {
          store(static_cast<float>(values[i]));
        } else {
          store(static_cast<double>(values[i]));
        }
        break;
      case ElementKind::SignedInt:
        if (dtype.size == 4) {
          store(static_cast<std::int32_t>(values[i]));
        } else {
          store(static_cast<std::int64_t>(values[i]));
        }
        break;
      case ElementKind::UnsignedInt:
        store(static_cast<std::uint8_t>(values[i]));
        break;
    }
  }
  return arr;
}

template <class T>
void write_values(const std::filesystem::path& path, std::span<const T> values, std::vector<std::size_t> shape,
                  Dtype dtype) {
  write(path, make_array(values, std::move(shape), dtype));
}

}  // namespace dtopo::npy
