#pragma once

// Netpbm (P5/P6, maxval 255) and PFM codecs.
//
// PFM headers: "Pf" (1 channel), "PF" (3 channels) and the multi-channel
// extension "PM" whose dimension line is "<width> <height> <channels>".
// A negative scale marks little-endian samples. Rows are stored bottom-up on
// disk and are always top-down in memory.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "mdepth/error.hpp"
#include "mdepth/grid.hpp"

namespace mdepth {

enum class ImageKind { PpmColor, PgmGray, PfmFloat };

namespace detail {

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<unsigned char>& bytes) : b_(bytes) {}

  std::size_t pos() const noexcept { return pos_; }

  std::string magic() {
    if (b_.size() < 2) throw FormatError("file too short for a magic number", pos_);
    std::string m{static_cast<char>(b_[0]), static_cast<char>(b_[1])};
    pos_ = 2;
    return m;
  }

  // Skips whitespace and '#' comments, then reads one token.
  std::string token() {
    skip_space();
    const std::size_t start = pos_;
    while (pos_ < b_.size() && !std::isspace(b_[pos_])) ++pos_;
    if (pos_ == start) throw FormatError("unexpected end of header", pos_);
    return {reinterpret_cast<const char*>(b_.data()) + start, pos_ - start};
  }

  long integer(long lo, long hi) {
    skip_space();
    const std::size_t at = pos_;
    const std::string t = token();
    long v = 0;
    for (char ch : t)
      if (!std::isdigit(static_cast<unsigned char>(ch))) throw FormatError("bad integer '" + t + "'", at);
    try {
      v = std::stol(t);
    } catch (const std::exception&) {
      throw FormatError("integer out of range '" + t + "'", at);
    }
    if (v < lo || v > hi) throw FormatError("header value " + t + " out of range", at);
    return v;
  }

  double real() {
    skip_space();
    const std::size_t at = pos_;
    const std::string t = token();
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || !std::isfinite(v) || v == 0.0)
      throw FormatError("bad PFM scale '" + t + "'", at);
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  void end_of_header() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw FormatError("missing header terminator", pos_);
    ++pos_;
  }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spill(const std::filesystem::path& path, const std::string& header,
                  const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline Grid decode_netpbm(const std::vector<unsigned char>& bytes, int channels, const char* want) {
  HeaderReader hr(bytes);
  if (hr.magic() != want) throw FormatError(std::string("expected magic ") + want, 0);
  const int w = static_cast<int>(hr.integer(1, 1 << 20));
  const int h = static_cast<int>(hr.integer(1, 1 << 20));
  const std::size_t maxval_at = hr.pos();
  if (hr.integer(1, 65535) != 255) throw FormatError("only maxval 255 is supported", maxval_at);
  hr.end_of_header();
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - hr.pos() < need) throw FormatError("truncated raster", bytes.size());
  std::vector<double> data(need);
  for (std::size_t i = 0; i < need; ++i) data[i] = bytes[hr.pos() + i] / 255.0;
  return Grid(w, h, channels, std::move(data));
}

inline Grid decode_pfm(const std::vector<unsigned char>& bytes) {
  HeaderReader hr(bytes);
  const std::string magic = hr.magic();
  int channels = 0;
  if (magic == "Pf") channels = 1;
  else if (magic == "PF") channels = 3;
  else if (magic != "PM") throw FormatError("expected PFM magic Pf, PF or PM", 0);
  const int w = static_cast<int>(hr.integer(1, 1 << 20));
  const int h = static_cast<int>(hr.integer(1, 1 << 20));
  if (magic == "PM") channels = static_cast<int>(hr.integer(1, 4096));
  const double scale = hr.real();
  hr.end_of_header();
  const bool little = scale < 0;
  const std::size_t count = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - hr.pos() < count * 4) throw FormatError("truncated PFM raster", bytes.size());
  std::vector<double> data(count);
  const std::size_t row = static_cast<std::size_t>(w) * channels;
  for (int y = 0; y < h; ++y) {
    const std::size_t disk_row = static_cast<std::size_t>(h - 1 - y);
    for (std::size_t i = 0; i < row; ++i) {
      const unsigned char* p = bytes.data() + hr.pos() + (disk_row * row + i) * 4;
      std::uint32_t u = 0;
      if (little) u = p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t{p[3]} << 24);
      else u = (std::uint32_t{p[0]} << 24) | (p[1] << 16) | (p[2] << 8) | p[3];
      const float f = std::bit_cast<float>(u);
      if (!std::isfinite(f))
        throw DataError("non-finite PFM sample at pixel (" + std::to_string(i / channels) + ", " +
                        std::to_string(y) + ")");
      data[static_cast<std::size_t>(y) * row + i] = f;
    }
  }
  return Grid(w, h, channels, std::move(data));
}

inline unsigned char quantize8(double v) {
  // Half-away-from-zero rounding of v * 255, saturated to [0, 255].
  const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<unsigned char>(q);
}

}  // namespace detail

inline Grid read_image(const std::filesystem::path& path, ImageKind kind) {
  const auto bytes = detail::slurp(path);
  switch (kind) {
    case ImageKind::PpmColor: return detail::decode_netpbm(bytes, 3, "P6");
    case ImageKind::PgmGray: return detail::decode_netpbm(bytes, 1, "P5");
    case ImageKind::PfmFloat: return detail::decode_pfm(bytes);
  }
  throw PreconditionError("unknown image kind");
}

/// Chooses the codec from the extension (.ppm, .pgm, .pfm).
inline ImageKind kind_from_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm") return ImageKind::PpmColor;
  if (ext == ".pgm") return ImageKind::PgmGray;
  if (ext == ".pfm") return ImageKind::PfmFloat;
  throw PreconditionError("unrecognized image extension '" + ext + "'");
}

inline Grid read_image(const std::filesystem::path& path) { return read_image(path, kind_from_extension(path)); }

/// PFM samples are written little-endian as 32-bit floats; PGM/PPM quantize
/// v * 255 with half-away-from-zero rounding.
inline void write_image(const Grid& grid, const std::filesystem::path& path, ImageKind kind) {
  std::vector<unsigned char> payload;
  std::ostringstream header;
  const int w = grid.width(), h = grid.height(), c = grid.channels();
  switch (kind) {
    case ImageKind::PgmGray:
    case ImageKind::PpmColor: {
      const int want = kind == ImageKind::PgmGray ? 1 : 3;
      if (c != want)
        throw PreconditionError(std::string(kind == ImageKind::PgmGray ? "PGM" : "PPM") + " needs " +
                                std::to_string(want) + " channel(s), grid has " + std::to_string(c));
      header << (want == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
      payload.reserve(grid.size());
      for (double v : grid.data()) payload.push_back(detail::quantize8(v));
      break;
    }
    case ImageKind::PfmFloat: {
      if (c == 1) header << "Pf\n" << w << ' ' << h << '\n';
      else if (c == 3) header << "PF\n" << w << ' ' << h << '\n';
      else header << "PM\n" << w << ' ' << h << ' ' << c << '\n';
      header << "-1.0\n";
      payload.resize(grid.size() * 4);
      const std::size_t row = static_cast<std::size_t>(w) * c;
      for (int y = 0; y < h; ++y) {
        const std::size_t disk_row = static_cast<std::size_t>(h - 1 - y);
        for (std::size_t i = 0; i < row; ++i) {
          const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(grid[y * row + i]));
          unsigned char* p = payload.data() + (disk_row * row + i) * 4;
          p[0] = u & 0xff;
          p[1] = (u >> 8) & 0xff;
          p[2] = (u >> 16) & 0xff;
          p[3] = (u >> 24) & 0xff;
        }
      }
      break;
    }
  }
  detail::spill(path, header.str(), payload);
}

/// Single-channel map writer (depth, disparity, masks).
inline void write_map(const Grid& grid, const std::filesystem::path& path, ImageKind kind) {
  if (kind == ImageKind::PpmColor) throw PreconditionError("write_map writes single-channel PFM or PGM only");
  if (grid.channels() != 1)
    throw PreconditionError("write_map needs a 1-channel grid, got " + std::to_string(grid.channels()));
  write_image(grid, path, kind);
}

}  // namespace mdepth
