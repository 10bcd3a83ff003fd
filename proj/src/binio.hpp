// SPDX-License-Identifier: Apache-2.0
// Little-endian byte buffer helpers shared by the binary file formats.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

#include "thdbar/error.hpp"

namespace thdbar::detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto n = buf_.size();
    buf_.resize(n + sizeof(T));
    std::memcpy(buf_.data() + n, &v, sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& data() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("cannot write " + path);
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string buf, std::string what) : buf_(std::move(buf)), what_(std::move(what)) {}

  static ByteReader load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing upstream artifact: " + path);
    return ByteReader(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()), path);
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw FormatError("truncated file: " + what_);
  }
  bool done() const { return pos_ == buf_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace thdbar::detail
