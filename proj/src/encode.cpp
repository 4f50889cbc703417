#include "munet/encode.hpp"

#include <algorithm>
#include <cmath>

#include "munet/error.hpp"

namespace munet {

// ---------------------------------------------------------------------------
// ImageStack

ImageStack ImageStack::select(const std::vector<std::string>& names) const {
  ImageStack out;
  out.width = width;
  out.height = height;
  out.channels = names;
  out.data.resize(data.rows(), static_cast<long>(names.size()));
  for (size_t k = 0; k < names.size(); ++k) {
    auto it = std::find(channels.begin(), channels.end(), names[k]);
    if (it == channels.end()) throw ShapeError("image stack has no channel '" + names[k] + "'");
    out.data.col(static_cast<long>(k)) = data.col(it - channels.begin());
  }
  return out;
}

nn::Grid ImageStack::grid() const {
  nn::Grid g;
  g.width = width;
  g.height = height;
  g.data = data;
  return g;
}

ImageStack stack_images(const std::vector<std::pair<FloatImage, std::vector<std::string>>>& parts) {
  ImageStack out;
  if (parts.empty()) throw ShapeError("no images to stack");
  out.width = parts.front().first.width;
  out.height = parts.front().first.height;
  long total = 0;
  for (const auto& [img, names] : parts) {
    if (img.width != out.width || img.height != out.height)
      throw ShapeError("image stack parts differ in resolution");
    if (static_cast<int>(names.size()) != img.channels)
      throw ShapeError("channel names do not match image channel count");
    total += img.channels;
  }
  out.data.resize(static_cast<long>(out.width) * out.height, total);
  long col = 0;
  for (const auto& [img, names] : parts) {
    for (int c = 0; c < img.channels; ++c, ++col) {
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) out.data(static_cast<long>(y) * out.width + x, col) = img.at(x, y, c);
      out.channels.push_back(names[c]);
    }
  }
  if (!out.data.allFinite()) throw NumericalError("image stack contains non-finite values");
  return out;
}

// ---------------------------------------------------------------------------
// Encoders

EncoderParams init_encoder(int in_channels, int out_channels, std::array<int, 3> strides, std::mt19937_64& rng) {
  EncoderParams p;
  p.in_channels = in_channels;
  p.stride = strides;
  const std::array<int, 4> widths{in_channels, 16, 32, out_channels};
  for (int l = 0; l < 3; ++l) {
    int fan_in = 9 * widths[l];
    p.weight[l] = nn::init_matrix(fan_in, widths[l + 1], fan_in, nn::InitScheme::UniformFanIn, rng);
    p.bias[l] = Matrix::Zero(1, widths[l + 1]);
  }
  return p;
}

namespace {

void check_stack(const ImageStack& stack, const EncoderParams& params, const std::vector<std::string>& plan) {
  if (stack.channels != plan || stack.channel_count() != params.in_channels)
    throw ShapeError("encoder expects " + std::to_string(plan.size()) + " channels in plan order, got " +
                     std::to_string(stack.channel_count()));
  if (stack.data.rows() != static_cast<long>(stack.width) * stack.height)
    throw ShapeError("image stack size does not match its resolution");
}

nn::Grid run_blocks(const ImageStack& stack, const EncoderParams& params, EncoderTape* tape) {
  nn::Grid g = stack.grid();
  for (int l = 0; l < 3; ++l)
    g = nn::conv2d_forward(g, params.weight[l], params.bias[l], params.stride[l], nn::Activation::LeakyRelu,
                           tape ? &tape->conv[l] : nullptr);
  return g;
}

EncoderGrads backprop_blocks(EncoderTape& tape, const EncoderParams& params, Matrix upstream) {
  EncoderGrads g;
  for (int l = 2; l >= 0; --l) {
    nn::Conv2dGrads cg = nn::conv2d_backward(tape.conv[l], params.weight[l], upstream);
    g.d_weight[l] = std::move(cg.d_weight);
    g.d_bias[l] = std::move(cg.d_bias);
    upstream = std::move(cg.d_input.data);
  }
  g.d_input = std::move(upstream);
  return g;
}

} // namespace

FeatureVector encode_global(const ImageStack& stack, const EncoderParams& params, EncoderTape* tape) {
  check_stack(stack, params, kGlobalChannels);
  nn::Grid g = run_blocks(stack, params, tape);
  if (tape) tape->pooled_cells = static_cast<int>(g.data.rows());
  return g.data.colwise().mean();
}

EncoderGrads encode_global_backward(EncoderTape& tape, const EncoderParams& params, const FeatureVector& upstream) {
  Matrix spread = upstream.replicate(tape.pooled_cells, 1) / static_cast<double>(tape.pooled_cells);
  return backprop_blocks(tape, params, std::move(spread));
}

FeatureMap encode_local(const ImageStack& stack, const EncoderParams& params, EncoderTape* tape) {
  check_stack(stack, params, kLocalChannels);
  nn::Grid g = run_blocks(stack, params, tape);
  FeatureMap map;
  map.width = g.width;
  map.height = g.height;
  map.downsample = params.stride[0] * params.stride[1] * params.stride[2];
  map.data = std::move(g.data);
  return map;
}

EncoderGrads encode_local_backward(EncoderTape& tape, const EncoderParams& params, const Matrix& upstream) {
  return backprop_blocks(tape, params, upstream);
}

// ---------------------------------------------------------------------------
// Puncturing

BilinearSample sample_bilinear(const FeatureMap& map, const Vec2& point) {
  if (!point.allFinite()) throw NumericalError("sample point is not finite");
  if (map.width <= 0 || map.height <= 0) throw ShapeError("empty feature map");

  struct Axis {
    long i0, i1;
    double frac;
    bool clamped;
  };
  auto axis = [](double p, int n) {
    const double lo = 0.5, hi = n - 0.5;
    bool clamped = p < lo || p > hi;
    double c = std::clamp(p, lo, hi) - 0.5;
    long i0 = std::min(static_cast<long>(std::floor(c)), static_cast<long>(std::max(n - 2, 0)));
    long i1 = std::min(i0 + 1, static_cast<long>(n - 1));
    return Axis{i0, i1, c - i0, clamped};
  };
  const Axis ax = axis(point.x(), map.width);
  const Axis ay = axis(point.y(), map.height);

  BilinearSample s;
  s.cells = {ay.i0 * map.width + ax.i0, ay.i0 * map.width + ax.i1, ay.i1 * map.width + ax.i0,
             ay.i1 * map.width + ax.i1};
  s.weights = {(1 - ax.frac) * (1 - ay.frac), ax.frac * (1 - ay.frac), (1 - ax.frac) * ay.frac,
               ax.frac * ay.frac};
  const auto f00 = map.data.row(s.cells[0]), f10 = map.data.row(s.cells[1]);
  const auto f01 = map.data.row(s.cells[2]), f11 = map.data.row(s.cells[3]);
  s.value = s.weights[0] * f00 + s.weights[1] * f10 + s.weights[2] * f01 + s.weights[3] * f11;

  s.d_point = Matrix::Zero(map.depth(), 2);
  if (!ax.clamped && ax.i1 != ax.i0)
    s.d_point.col(0) = ((1 - ay.frac) * (f10 - f00) + ay.frac * (f11 - f01)).transpose();
  if (!ay.clamped && ay.i1 != ay.i0)
    s.d_point.col(1) = ((1 - ax.frac) * (f01 - f00) + ax.frac * (f11 - f10)).transpose();
  return s;
}

std::vector<Vec2> NeighborhoodPattern::offsets() const {
  if (size != 1 && size != 3 && size != 5)
    throw ShapeError("neighborhood pattern size must be 1, 3 or 5");
  std::vector<Vec2> out;
  const int half = size / 2;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) out.emplace_back(dx * spacing, dy * spacing);
  return out;
}

PunctureResult puncture_vertex(const FeatureMap& map, const Vec3& point, const CameraWP& cam,
                               const NeighborhoodPattern& pattern) {
  const Projection proj = project_weak_perspective_with_jacobian(point, cam);
  const double inv_ds = 1.0 / map.downsample;
  const Vec2 center = proj.pixel * inv_ds;
  const auto offsets = pattern.offsets();

  PunctureResult r;
  r.value = RowVector::Zero(map.depth());
  Matrix d_center = Matrix::Zero(map.depth(), 2);
  for (const Vec2& o : offsets) {
    BilinearSample s = sample_bilinear(map, center + o);
    r.value += s.value;
    d_center += s.d_point;
  }
  const double inv_n = 1.0 / offsets.size();
  r.value *= inv_n;
  d_center *= inv_n * inv_ds;
  r.d_point = d_center * proj.d_point;
  r.d_camera = d_center * proj.d_camera;
  return r;
}

VertexFeatures assemble_vertex_features(const MeshGraph& mesh, const FeatureMap& map, const CameraWP& cam,
                                        const NeighborhoodPattern& pattern) {
  const int d = map.depth();
  const Positions normals = vertex_normals(mesh);
  VertexFeatures out;
  out.psi.resize(mesh.vertex_count(), d + 6);
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    const Vec3 v = mesh.vertices().row(i).transpose();
    out.psi.block(i, 0, 1, d) = puncture_vertex(map, v, cam, pattern).value;
    out.psi.block(i, d, 1, 3) = v.transpose();
    out.psi.block(i, d + 3, 1, 3) = normals.row(i);
  }
  return out;
}

VertexFeatureGrads assemble_vertex_features_backward(const MeshGraph& mesh, const FeatureMap& map,
                                                     const CameraWP& cam, const NeighborhoodPattern& pattern,
                                                     const Matrix& d_psi) {
  const int d = map.depth();
  if (d_psi.rows() != mesh.vertex_count() || d_psi.cols() != d + 6)
    throw ShapeError("vertex feature gradient has the wrong shape");

  VertexFeatureGrads g;
  g.d_vertices = d_psi.middleCols(d, 3);
  g.d_vertices += vertex_normals_backward(mesh, d_psi.middleCols(d + 3, 3));
  g.d_features = Matrix::Zero(map.data.rows(), d);

  const auto offsets = pattern.offsets();
  const double inv_ds = 1.0 / map.downsample;
  const double inv_n = 1.0 / offsets.size();
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    const RowVector up = d_psi.block(i, 0, 1, d);
    if (up.isZero(0.0)) continue;
    const Vec3 v = mesh.vertices().row(i).transpose();
    const Projection proj = project_weak_perspective_with_jacobian(v, cam);
    const Vec2 center = proj.pixel * inv_ds;
    Eigen::RowVector2d d_center = Eigen::RowVector2d::Zero();
    for (const Vec2& o : offsets) {
      BilinearSample s = sample_bilinear(map, center + o);
      d_center += up * s.d_point;
      for (int k = 0; k < 4; ++k) g.d_features.row(s.cells[k]) += (s.weights[k] * inv_n) * up;
    }
    d_center *= inv_n * inv_ds;
    g.d_vertices.row(i) += d_center * proj.d_point;
    g.d_camera += (d_center * proj.d_camera).transpose();
  }
  return g;
}

Matrix assemble_edge_features(const Matrix& vertex_features, const std::vector<Edge>& edges) {
  const long w = vertex_features.cols();
  Matrix out(static_cast<long>(edges.size()), 2 * w);
  for (size_t e = 0; e < edges.size(); ++e) {
    if (edges[e][0] >= vertex_features.rows() || edges[e][1] >= vertex_features.rows())
      throw ShapeError("edge references vertex beyond feature rows");
    out.block(static_cast<long>(e), 0, 1, w) = vertex_features.row(edges[e][0]);
    out.block(static_cast<long>(e), w, 1, w) = vertex_features.row(edges[e][1]);
  }
  return out;
}

Matrix assemble_edge_features_backward(const Matrix& d_edge_features, const std::vector<Edge>& edges,
                                       int vertex_count) {
  if (d_edge_features.rows() != static_cast<long>(edges.size()) || d_edge_features.cols() % 2 != 0)
    throw ShapeError("edge feature gradient has the wrong shape");
  const long w = d_edge_features.cols() / 2;
  Matrix out = Matrix::Zero(vertex_count, w);
  for (size_t e = 0; e < edges.size(); ++e) {
    out.row(edges[e][0]) += d_edge_features.block(static_cast<long>(e), 0, 1, w);
    out.row(edges[e][1]) += d_edge_features.block(static_cast<long>(e), w, 1, w);
  }
  return out;
}

} // namespace munet
