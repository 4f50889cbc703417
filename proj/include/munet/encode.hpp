#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "munet/image_io.hpp"
#include "munet/mesh.hpp"
#include "munet/nn.hpp"
#include "munet/raster.hpp"

namespace munet {

using nn::Matrix;
using RowVector = Eigen::RowVectorXd;

/// Per-pixel channel stack. Channel plan for a full sample:
///   0-2 image RGB, 3 front depth, 4-6 front normals, 7-9 back normals.
struct ImageStack {
  int width = 0;
  int height = 0;
  std::vector<std::string> channels;
  Matrix data; // (height*width) x channels, row y*width + x

  int channel_count() const { return static_cast<int>(channels.size()); }
  /// New stack with the named channels, in the given order. Throws ShapeError on unknown names.
  ImageStack select(const std::vector<std::string>& names) const;
  nn::Grid grid() const;
};

inline const std::vector<std::string> kFullChannels = {"r", "g", "b", "depth", "nfx", "nfy",
                                                       "nfz", "nbx", "nby", "nbz"};
inline const std::vector<std::string> kGlobalChannels = {"r", "g", "b", "depth"};
inline const std::vector<std::string> kLocalChannels = {"r", "g", "b", "nfx", "nfy", "nfz", "nbx", "nby", "nbz"};

/// Assembles an ImageStack from per-channel-group images (PGM/PFM), all of one size.
ImageStack stack_images(const std::vector<std::pair<FloatImage, std::vector<std::string>>>& parts);

/// Local feature grid F with its spatial downsample factor relative to the image.
struct FeatureMap {
  int width = 0;
  int height = 0;
  int downsample = 1;
  Matrix data; // (height*width) x D

  int depth() const { return static_cast<int>(data.cols()); }
  RowVector cell(int x, int y) const { return data.row(static_cast<long>(y) * width + x); }
};

using FeatureVector = RowVector;

// ---------------------------------------------------------------------------
// Encoders: three 3x3 convolution blocks with leaky activations.

struct EncoderParams {
  std::array<Matrix, 3> weight;
  std::array<Matrix, 3> bias;
  std::array<int, 3> stride{2, 2, 2};
  int in_channels = 0;

  int out_channels() const { return static_cast<int>(weight[2].cols()); }
};

/// Widths (16, 32, out_channels), uniform fan-in weights, zero biases.
EncoderParams init_encoder(int in_channels, int out_channels, std::array<int, 3> strides, std::mt19937_64& rng);
inline EncoderParams init_global_encoder(int out_channels, std::mt19937_64& rng) {
  return init_encoder(static_cast<int>(kGlobalChannels.size()), out_channels, {2, 2, 2}, rng);
}
inline EncoderParams init_local_encoder(int out_channels, std::mt19937_64& rng) {
  return init_encoder(static_cast<int>(kLocalChannels.size()), out_channels, {2, 2, 1}, rng);
}

struct EncoderTape {
  std::array<nn::Conv2dTape, 3> conv;
  int pooled_cells = 0;
};

struct EncoderGrads {
  std::array<Matrix, 3> d_weight;
  std::array<Matrix, 3> d_bias;
  Matrix d_input; // same layout as ImageStack::data
};

/// f_g: conv blocks on (RGB, depth), then the spatial mean.
FeatureVector encode_global(const ImageStack& stack, const EncoderParams& params, EncoderTape* tape = nullptr);
EncoderGrads encode_global_backward(EncoderTape& tape, const EncoderParams& params, const FeatureVector& upstream);

/// F: conv blocks on (RGB, front normals, back normals), downsample factor 4.
FeatureMap encode_local(const ImageStack& stack, const EncoderParams& params, EncoderTape* tape = nullptr);
EncoderGrads encode_local_backward(EncoderTape& tape, const EncoderParams& params, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Bilinear puncturing. Feature-map coordinates put the center of cell (i, j)
// at (i + 0.5, j + 0.5); points are clamped to the span of cell centers, so
// the gradient vanishes along a clamped axis.

struct BilinearSample {
  RowVector value;
  Matrix d_point; // D x 2
  std::array<long, 4> cells{};
  std::array<double, 4> weights{};
};

BilinearSample sample_bilinear(const FeatureMap& map, const Vec2& point);

/// Square grid of offsets (in feature cells) around the projected point.
struct NeighborhoodPattern {
  int size = 3; // 1, 3 or 5
  double spacing = 1.0;
  std::vector<Vec2> offsets() const;
};

struct PunctureResult {
  RowVector value;
  Matrix d_point;  // D x 3
  Matrix d_camera; // D x 3 over (scale, tx, ty)
};

/// Projects `point` with the image camera, maps it into feature cells, and
/// averages bilinear samples over the pattern.
PunctureResult puncture_vertex(const FeatureMap& map, const Vec3& point, const CameraWP& cam,
                               const NeighborhoodPattern& pattern);

/// psi_v = (f_v, v, N_v) per vertex: width D + 6.
struct VertexFeatures {
  Matrix psi;
};

VertexFeatures assemble_vertex_features(const MeshGraph& mesh, const FeatureMap& map, const CameraWP& cam,
                                        const NeighborhoodPattern& pattern);

struct VertexFeatureGrads {
  Positions d_vertices;
  Vec3 d_camera = Vec3::Zero(); // (scale, tx, ty)
  Matrix d_features;            // same layout as FeatureMap::data
};

VertexFeatureGrads assemble_vertex_features_backward(const MeshGraph& mesh, const FeatureMap& map,
                                                     const CameraWP& cam, const NeighborhoodPattern& pattern,
                                                     const Matrix& d_psi);

/// psi_e = psi_{v_i} (+) psi_{v_j} for every canonical edge (i < j).
Matrix assemble_edge_features(const Matrix& vertex_features, const std::vector<Edge>& edges);
Matrix assemble_edge_features_backward(const Matrix& d_edge_features, const std::vector<Edge>& edges,
                                       int vertex_count);

} // namespace munet
