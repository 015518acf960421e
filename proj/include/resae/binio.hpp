#pragma once

// Little-endian binary reader/writer shared by the TLM1, ASH1, RCH1 and SAE1
// file formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "resae/tensor.hpp"

namespace resae::binio {

template <typename T>
T to_little(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    require(out_.is_open(), ErrorCode::kIo, "cannot open for writing: " + path.string());
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }

  template <typename T>
  void put(T v) {
    v = to_little(v);
    raw(&v, sizeof(T));
  }

  template <typename T>
  void put_array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      raw(values.data(), values.size_bytes());
    } else {
      for (const T& v : values) put(v);
    }
  }

  void close() {
    out_.flush();
    require(out_.good(), ErrorCode::kIo, "write failed: " + path_.string());
    out_.close();
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    require(in_.is_open(), ErrorCode::kIo, "cannot open for reading: " + path.string());
  }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    raw(got.data(), got.size());
    require(got == m, ErrorCode::kFormat,
            path_.string() + ": bad magic (expected " + std::string(m) + ")");
  }

  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return to_little(v);
  }

  template <typename T>
  void get_array(std::span<T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      raw(values.data(), values.size_bytes());
    } else {
      for (T& v : values) v = get<T>();
    }
  }

  // Trailing bytes mean the header lied about the payload size.
  void expect_eof() {
    in_.peek();
    require(in_.eof(), ErrorCode::kFormat, path_.string() + ": trailing bytes after payload");
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorCode::kFormat,
            path_.string() + ": truncated file");
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

template <typename Derived>
void put_matrix(Writer& w, const Eigen::DenseBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  // Always row-major on disk.
  MatT<Scalar> rm = m;
  w.put_array<Scalar>(std::span<const Scalar>(rm.data(), static_cast<std::size_t>(rm.size())));
}

template <typename Scalar>
MatT<Scalar> get_matrix(Reader& r, Eigen::Index rows, Eigen::Index cols) {
  MatT<Scalar> m(rows, cols);
  r.get_array<Scalar>(std::span<Scalar>(m.data(), static_cast<std::size_t>(m.size())));
  return m;
}

template <typename Scalar>
VecT<Scalar> get_vector(Reader& r, Eigen::Index n) {
  VecT<Scalar> v(n);
  r.get_array<Scalar>(std::span<Scalar>(v.data(), static_cast<std::size_t>(v.size())));
  return v;
}

}  // namespace resae::binio
