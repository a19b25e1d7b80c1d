// SPDX-License-Identifier: Apache-2.0
//
// Binary PPM (P6) and PGM (P5) with maxval 255.
#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "segpool/error.hpp"

namespace segpool::netpbm {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 3 for PPM, 1 for PGM
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

inline void write(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("netpbm: unsupported channel count");
  if (img.pixels.size() != img.width * img.height * img.channels) throw DataError("netpbm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

namespace detail {
inline std::size_t read_header_int(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& where) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= buf.size() || !std::isdigit(buf[pos])) throw DataError(where + ": malformed netpbm header");
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > (1u << 24)) throw DataError(where + ": netpbm header value too large");
    ++pos;
  }
  return v;
}
}  // namespace detail

inline Image8 read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '6' && buf[1] != '5'))
    throw DataError(where + ": not a binary PPM/PGM file");
  Image8 img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  img.width = detail::read_header_int(buf, pos, where);
  img.height = detail::read_header_int(buf, pos, where);
  const std::size_t maxval = detail::read_header_int(buf, pos, where);
  if (maxval != 255) throw DataError(where + ": only maxval 255 is supported");
  if (img.width == 0 || img.height == 0) throw DataError(where + ": empty image");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw DataError(where + ": malformed netpbm header");
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (buf.size() - pos < n) throw DataError(where + ": truncated pixel data");
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

}  // namespace segpool::netpbm
