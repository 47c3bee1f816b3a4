#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotr/errors.hpp"
#include "cotr/geometry.hpp"
#include "cotr/metrics.hpp"

namespace cotr {

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}

/// Little-endian cursor over a byte buffer; running past the end throws.
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string what) : b_(b), what_(std::move(what)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(b_.begin() + std::ptrdiff_t(pos_), b_.begin() + std::ptrdiff_t(pos_ + n));
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw TruncatedFileError(what_ + ": truncated file");
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::uint8_t to_byte(float v) {
  return std::uint8_t(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Binary PPM (P6) or PGM (P5) with maxval 255; values scaled to [0,1].
inline Image read_image(const std::string& path) {
  const auto b = read_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < b.size() && std::isspace(b[pos])) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(char(b[pos++]));
    if (t.empty()) throw TruncatedFileError(path + ": truncated header");
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P5") throw BadMagicError(path + ": unsupported image magic '" + magic + "'");
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos || t.size() > 9)
      throw FormatError(path + ": bad " + std::string(what) + " '" + t + "'");
    return std::stoul(t);
  };
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) throw FormatError(path + ": image dimensions must be positive");
  if (maxval != 255) throw FormatError(path + ": maxval must be 255, got " + std::to_string(maxval));
  ++pos;  // single whitespace byte after maxval
  const std::size_t c = magic == "P6" ? 3 : 1;
  if (pos > b.size() || b.size() - pos < w * h * c) throw TruncatedFileError(path + ": truncated pixel payload");
  Image img(w, h, c);
  for (std::size_t i = 0; i < w * h * c; ++i) img.data[i] = float(b[pos + i]) / 255.0f;
  return img;
}

inline void write_image(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_image: 1 or 3 channels");
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) +
                             " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> b(header.begin(), header.end());
  for (float v : img.data) b.push_back(detail::to_byte(v));
  write_bytes(path, b);
}

/// Grayscale single-channel image replicated to three channels.
inline Image to_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out(img.width, img.height, 3);
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    for (std::size_t k = 0; k < 3; ++k) out.data[3 * i + k] = img.data[i];
  return out;
}

/// Sidecar mask path for a flow file: "x.flo" → "x.valid.pgm".
inline std::string valid_mask_path(const std::string& flo_path) {
  const auto dot = flo_path.rfind(".flo");
  const std::string stem = dot != std::string::npos && dot + 4 == flo_path.size() ? flo_path.substr(0, dot) : flo_path;
  return stem + ".valid.pgm";
}

inline constexpr float kFloMagic = 202021.25f;

inline std::vector<std::uint8_t> encode_flo(const FlowField& f) {
  std::vector<std::uint8_t> b;
  b.reserve(12 + f.flow.size() * 4);
  detail::put_f32(b, kFloMagic);
  detail::put_u32(b, std::uint32_t(f.width));
  detail::put_u32(b, std::uint32_t(f.height));
  for (float v : f.flow) detail::put_f32(b, v);
  return b;
}

/// Middlebury .flo payload; the mask is set all-valid.
inline FlowField decode_flo(const std::vector<std::uint8_t>& b, const std::string& what) {
  detail::Reader r(b, what);
  const float magic = r.f32();
  if (magic != kFloMagic) throw BadMagicError(what + ": not a .flo file");
  const std::int32_t w = std::int32_t(r.u32()), h = std::int32_t(r.u32());
  if (w <= 0 || h <= 0) throw FormatError(what + ": flow dimensions must be positive");
  if (r.remaining() / 8 < std::size_t(w) * std::size_t(h)) throw TruncatedFileError(what + ": truncated payload");
  FlowField f(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  for (float& v : f.flow) v = r.f32();
  std::fill(f.valid.begin(), f.valid.end(), 1);
  return f;
}

/// Writes the .flo file and its validity PGM (255 = valid).
inline void write_flo(const FlowField& f, const std::string& path) {
  write_bytes(path, encode_flo(f));
  Image mask(f.width, f.height, 1);
  for (std::size_t i = 0; i < f.valid.size(); ++i) mask.data[i] = f.valid[i] ? 1.f : 0.f;
  write_image(mask, valid_mask_path(path));
}

/// Reads a .flo file; the sidecar mask is applied when present.
inline FlowField read_flo(const std::string& path) {
  FlowField f = decode_flo(read_bytes(path), path);
  const std::string mp = valid_mask_path(path);
  if (std::ifstream(mp).good()) {
    const Image mask = read_image(mp);
    if (mask.width != f.width || mask.height != f.height || mask.channels != 1)
      throw FormatError(mp + ": mask does not match flow dimensions");
    for (std::size_t i = 0; i < f.valid.size(); ++i) f.valid[i] = mask.data[i] == 1.f ? 1 : 0;
  }
  return f;
}

struct Correspondence {
  Vec2 query;   // image-one pixels
  Vec2 target;  // image-two pixels
  double cycle_error = 0;
};

inline std::string format_correspondences(const std::vector<Correspondence>& list) {
  std::string out;
  char line[160];
  for (const auto& c : list) {
    std::snprintf(line, sizeof(line), "%.6g %.6g %.6g %.6g %.6g\n", c.query.x, c.query.y, c.target.x, c.target.y,
                  c.cycle_error);
    out += line;
  }
  return out;
}

inline std::vector<Correspondence> parse_correspondences(const std::string& text) {
  std::vector<Correspondence> out;
  std::istringstream is(text);
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    double v[5];
    std::size_t k = 0;
    std::string tok;
    while (ls >> tok) {
      if (k == 5) throw FormatError("line " + std::to_string(n) + ": expected 5 fields, got more");
      try {
        std::size_t used = 0;
        v[k] = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(n) + ": bad number '" + tok + "'");
      }
      ++k;
    }
    if (k != 5) throw FormatError("line " + std::to_string(n) + ": expected 5 fields, got " + std::to_string(k));
    out.push_back({{v[0], v[1]}, {v[2], v[3]}, v[4]});
  }
  return out;
}

inline void write_correspondences(const std::vector<Correspondence>& list, const std::string& path) {
  const std::string s = format_correspondences(list);
  write_bytes(path, {s.begin(), s.end()});
}

inline std::vector<Correspondence> read_correspondences(const std::string& path) {
  const auto b = read_bytes(path);
  return parse_correspondences({b.begin(), b.end()});
}

}  // namespace cotr
