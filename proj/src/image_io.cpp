#include "munet/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "munet/error.hpp"

namespace munet {

namespace {

// Reads whitespace-separated header tokens, skipping '#' comments.
struct HeaderReader {
  const std::string& bytes;
  size_t pos = 0;

  std::string token() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError("truncated image header");
    return bytes.substr(start, pos - start);
  }

  int integer() {
    std::string t = token();
    try {
      size_t used = 0;
      int v = std::stoi(t, &used);
      if (used != t.size()) throw ParseError("bad header integer '" + t + "'");
      return v;
    } catch (const std::logic_error&) {
      throw ParseError("bad header integer '" + t + "'");
    }
  }

  // Exactly one whitespace byte separates the header from the raster.
  void end_header() {
    if (pos >= bytes.size()) throw ParseError("missing image payload");
    ++pos;
  }
};

} // namespace

std::string encode_pgm(const BinaryMask& mask) {
  std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  out.reserve(out.size() + mask.pixels.size());
  for (auto p : mask.pixels) out.push_back(p ? static_cast<char>(255) : 0);
  return out;
}

FloatImage decode_pgm(const std::string& bytes) {
  HeaderReader h{bytes};
  if (h.token() != "P5") throw ParseError("not a binary PGM (expected P5)");
  FloatImage img;
  img.width = h.integer();
  img.height = h.integer();
  int maxval = h.integer();
  if (img.width <= 0 || img.height <= 0) throw ParseError("PGM dimensions must be positive");
  if (maxval <= 0 || maxval > 255) throw ParseError("only 8-bit PGM is supported");
  h.end_header();
  img.channels = 1;
  size_t n = static_cast<size_t>(img.width) * img.height;
  if (bytes.size() - h.pos < n) throw ParseError("PGM payload truncated");
  img.data.resize(n);
  for (size_t i = 0; i < n; ++i)
    img.data[i] = static_cast<unsigned char>(bytes[h.pos + i]) / static_cast<double>(maxval);
  return img;
}

std::string encode_pfm(const FloatImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("PFM supports 1 or 3 channels");
  std::string out = std::string(img.channels == 3 ? "PF" : "Pf") + "\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.at(x, y, c)));
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
      }
    }
  }
  return out;
}

FloatImage decode_pfm(const std::string& bytes) {
  HeaderReader h{bytes};
  std::string magic = h.token();
  FloatImage img;
  if (magic == "PF")
    img.channels = 3;
  else if (magic == "Pf")
    img.channels = 1;
  else
    throw ParseError("not a PFM file");
  img.width = h.integer();
  img.height = h.integer();
  if (img.width <= 0 || img.height <= 0) throw ParseError("PFM dimensions must be positive");
  double scale = 0.0;
  try {
    scale = std::stod(h.token());
  } catch (const std::logic_error&) {
    throw ParseError("bad PFM scale");
  }
  if (scale == 0.0) throw ParseError("bad PFM scale");
  bool little = scale < 0.0;
  h.end_header();
  size_t n = static_cast<size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - h.pos < n * 4) throw ParseError("PFM payload truncated");
  img.data.resize(n);
  size_t p = h.pos;
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          auto byte = static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[p + b]));
          bits |= little ? byte << (8 * b) : byte << (8 * (3 - b));
        }
        p += 4;
        float v = std::bit_cast<float>(bits);
        if (!std::isfinite(v)) throw ParseError("non-finite PFM sample");
        img.at(x, y, c) = v;
      }
    }
  }
  return img;
}

FloatImage normal_map_image(const NormalMap& map) {
  FloatImage img;
  img.width = map.width;
  img.height = map.height;
  img.channels = 3;
  img.data.resize(static_cast<size_t>(map.width) * map.height * 3);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = map.at(x, y)[c];
  return img;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

FloatImage read_image(const std::string& path) {
  auto ends_with = [&](const char* ext) {
    size_t n = std::strlen(ext);
    return path.size() >= n && path.compare(path.size() - n, n, ext) == 0;
  };
  if (ends_with(".pfm")) return decode_pfm(read_file(path));
  if (ends_with(".pgm")) return decode_pgm(read_file(path));
  throw IoError("unsupported image extension: " + path);
}

} // namespace munet
