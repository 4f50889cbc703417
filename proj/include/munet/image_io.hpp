#pragma once

#include <string>
#include <vector>

#include "munet/raster.hpp"

namespace munet {

/// Dense single- or multi-channel float image, row-major with the top row first.
struct FloatImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data; // (y * width + x) * channels + c

  double& at(int x, int y, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

/// Binary PGM (P5, maxval 255): mask pixels are written as 0 or 255.
std::string encode_pgm(const BinaryMask& mask);
/// 8-bit PGM decoded to one channel scaled to [0, 1].
FloatImage decode_pgm(const std::string& bytes);

/// PFM with a negative scale (little-endian). Rows are stored bottom-up on disk.
std::string encode_pfm(const FloatImage& image);
FloatImage decode_pfm(const std::string& bytes);

/// Normal map as a 3-channel PFM.
FloatImage normal_map_image(const NormalMap& map);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

/// Reads .pfm or .pgm by extension.
FloatImage read_image(const std::string& path);

} // namespace munet
