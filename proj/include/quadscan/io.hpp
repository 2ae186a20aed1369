#pragma once

// File formats:
//   QTEN   raw tensor records: magic "QTEN", u32 rank, u32 dims[], then
//          little-endian f32 payload, row-major. Used by fixtures and
//          checkpoints. Payload is always f32 regardless of the in-memory
//          scalar type.
//   PGM    binary P5, 8-bit, for images and score-map exports.
//   Checkpoint  u64 header length, JSON header (config echo + tensor
//          manifest), then concatenated QTEN records in manifest order.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace quadscan {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff),
                        (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check(bool(is), "qten: truncated stream");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is) {
  std::uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

template <typename S>
void write_qten(std::ostream& os, const Tensor<S>& t) {
  os.write("QTEN", 4);
  detail::write_u32(os, std::uint32_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    detail::write_u32(os, std::uint32_t(t.dim(i)));
  for (S v : t.vals()) detail::write_f32(os, float(v));
}

template <typename S>
Tensor<S> read_qten(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  check(bool(is) && std::memcmp(magic, "QTEN", 4) == 0, "qten: bad magic");
  std::uint32_t rank = detail::read_u32(is);
  check(rank <= 8, "qten: implausible rank");
  Shape shape(rank);
  long long n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = int(detail::read_u32(is));
    n *= shape[i];
  }
  std::vector<S> vals(static_cast<size_t>(n));
  for (long long i = 0; i < n; ++i) vals[size_t(i)] = S(detail::read_f32(is));
  return Tensor<S>::from(shape, std::move(vals));
}

template <typename S>
void save_qten(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "qten: cannot open " + path + " for writing");
  write_qten(os, t);
}

template <typename S>
Tensor<S> load_qten(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "qten: cannot open " + path);
  return read_qten<S>(is);
}

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)

inline void save_pgm(const std::string& path, const std::vector<unsigned char>& px,
                     int width, int height) {
  check((long long)px.size() == (long long)width * height, "pgm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "pgm: cannot open " + path + " for writing");
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
}

inline std::vector<unsigned char> load_pgm(const std::string& path, int& width,
                                           int& height) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "pgm: cannot open " + path);
  std::string magic;
  is >> magic;
  check(magic == "P5", "pgm: only binary P5 supported");
  auto skip_ws_comments = [&] {
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
  };
  skip_ws_comments();
  is >> width;
  skip_ws_comments();
  is >> height;
  skip_ws_comments();
  int maxval;
  is >> maxval;
  check(maxval == 255, "pgm: only 8-bit supported");
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> px(size_t(width) * size_t(height));
  is.read(reinterpret_cast<char*>(px.data()), std::streamsize(px.size()));
  check(bool(is), "pgm: truncated pixel data");
  return px;
}

// ---------------------------------------------------------------------------
// Checkpoint container

struct CheckpointEntry {
  std::string name;
  Shape shape;
};

inline void write_checkpoint_raw(const std::string& path,
                                 const std::string& header_json,
                                 const std::vector<Tensor<float>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "checkpoint: cannot open " + path + " for writing");
  std::uint64_t len = header_json.size();
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((len >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
  os.write(header_json.data(), std::streamsize(header_json.size()));
  for (const auto& t : tensors) write_qten(os, t);
}

inline std::string read_checkpoint_header(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  check(bool(is), "checkpoint: truncated header length");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(b[i]) << (8 * i);
  check(len < (1ull << 30), "checkpoint: implausible header length");
  std::string header(static_cast<size_t>(len), '\0');
  is.read(header.data(), std::streamsize(len));
  check(bool(is), "checkpoint: truncated header");
  return header;
}

}  // namespace quadscan
