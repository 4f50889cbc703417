#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "munet/mesh.hpp"

namespace munet::nn {

using Matrix = Eigen::MatrixXd;

enum class Activation { Linear, LeakyRelu };
inline constexpr double kLeakySlope = 0.01;

Matrix activate(const Matrix& pre, Activation act);
/// upstream * act'(pre), elementwise.
Matrix activation_backward(const Matrix& pre, const Matrix& upstream, Activation act);

// ---------------------------------------------------------------------------
// Parameters

enum class InitScheme { UniformFanIn, Zeros };

/// Ordered, named parameter blocks. Gradients use a store of identical shape.
class ParamStore {
public:
  struct Block {
    std::string name;
    Matrix value;
  };

  int add(std::string name, Matrix value);
  Matrix& operator[](int i) { return blocks_[i].value; }
  const Matrix& operator[](int i) const { return blocks_[i].value; }
  const std::string& name(int i) const { return blocks_[i].name; }
  int size() const { return static_cast<int>(blocks_.size()); }
  int find(const std::string& name) const;
  long scalar_count() const;

  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  ParamStore zeros_like() const;
  void set_zero();
  /// this += alpha * other (shapes must match)
  void axpy(double alpha, const ParamStore& other);
  bool all_finite() const;

private:
  std::vector<Block> blocks_;
};

/// Uniform U(-a, a) with a = sqrt(6 / fan_in): variance 2 / fan_in.
Matrix init_matrix(int rows, int cols, int fan_in, InitScheme scheme, std::mt19937_64& rng);
double init_target_variance(int fan_in);

/// Layer parameters for a fixed width plan, reproducible from (seed, scheme).
struct LayerParams {
  ParamStore store;
  std::uint64_t seed = 0;
  InitScheme scheme = InitScheme::UniformFanIn;
};
/// One weight block per (fan_in, fan_out) pair in `shapes`, named w0, w1, ...
LayerParams init_params(std::uint64_t seed, InitScheme scheme, const std::vector<std::array<int, 2>>& shapes);

// ---------------------------------------------------------------------------
// Tapes: intermediate values recorded by a forward call. Each may be consumed
// by exactly one backward call.

class TapeBase {
public:
  void consume();
  bool consumed() const { return consumed_; }

private:
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Dense (per-row affine map)

struct DenseTape : TapeBase {
  Matrix input;
  Matrix pre;
  Activation act = Activation::Linear;
};

struct DenseGrads {
  Matrix d_input;
  Matrix d_weight;
  Matrix d_bias; // 1 x out
};

/// act(H W + 1 b), H: rows x in, W: in x out, b: 1 x out.
Matrix dense_forward(const Matrix& h, const Matrix& weight, const Matrix& bias, Activation act,
                     DenseTape* tape = nullptr);
DenseGrads dense_backward(DenseTape& tape, const Matrix& weight, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Vertex graph convolution: act(A H W)

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct GraphConvTape : TapeBase {
  Matrix input;
  Matrix pre;
  const SparseRowMatrix* adjacency = nullptr;
  Activation act = Activation::LeakyRelu;
};

struct GraphConvGrads {
  Matrix d_input;
  Matrix d_weight;
};

Matrix graph_conv_forward(const Matrix& h, const SparseRowMatrix& adjacency, const Matrix& weight,
                          Activation act, GraphConvTape* tape = nullptr);
GraphConvGrads graph_conv_backward(GraphConvTape& tape, const Matrix& weight, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Edge mesh convolution over the four-edge neighbourhood.
//
// Symmetric (default):
//   out(e0) = X(e0) K0 + (X(e1)+X(e3)) K1 + |X(e1)-X(e3)| K2 + (X(e2)+X(e4)) K3 + |X(e2)-X(e4)| K4
// RawOrdered:
//   out(e0) = sum_k X(e_k) K_k, using the canonical neighbour order.
// |.| has subgradient 0 at ties.

enum class MeshConvMode { Symmetric, RawOrdered };

using MeshConvKernel = std::array<Matrix, 5>;

struct MeshConvTape : TapeBase {
  std::array<Matrix, 5> terms; // gathered inputs per kernel slot
  Matrix diff13, diff24;       // signed differences under the absolute values
  Matrix pre;
  const EdgeAdjacency* adjacency = nullptr;
  MeshConvMode mode = MeshConvMode::Symmetric;
  Activation act = Activation::LeakyRelu;
};

struct MeshConvGrads {
  Matrix d_input;
  MeshConvKernel d_kernel;
};

Matrix mesh_conv_forward(const Matrix& x, const EdgeAdjacency& adjacency, const MeshConvKernel& kernel,
                         Activation act, MeshConvMode mode = MeshConvMode::Symmetric,
                         MeshConvTape* tape = nullptr);
MeshConvGrads mesh_conv_backward(MeshConvTape& tape, const MeshConvKernel& kernel, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Edge -> vertex: each vertex takes the mean of its incident edge rows.

SparseRowMatrix build_edge_to_vertex(const MeshGraph& mesh);
Matrix edge_to_vertex(const Matrix& edge_values, const SparseRowMatrix& pooling);
Matrix edge_to_vertex_backward(const Matrix& upstream, const SparseRowMatrix& pooling);

// ---------------------------------------------------------------------------
// 2D convolution, 3x3 kernel, zero padding 1, configurable stride.
// Images are (height*width) x channels, row index y*width + x.

struct Grid {
  int width = 0;
  int height = 0;
  Matrix data;
  int channels() const { return static_cast<int>(data.cols()); }
};

struct Conv2dTape : TapeBase {
  Matrix columns; // out_pixels x (9 * in_channels)
  Matrix pre;
  int in_width = 0, in_height = 0, in_channels = 0, stride = 1;
  int out_width = 0, out_height = 0;
  Activation act = Activation::LeakyRelu;
};

struct Conv2dGrads {
  Grid d_input;
  Matrix d_weight; // (9 * in) x out
  Matrix d_bias;   // 1 x out
};

int conv2d_output_size(int input, int stride);
Grid conv2d_forward(const Grid& input, const Matrix& weight, const Matrix& bias, int stride, Activation act,
                    Conv2dTape* tape = nullptr);
Conv2dGrads conv2d_backward(Conv2dTape& tape, const Matrix& weight, const Matrix& upstream);

// ---------------------------------------------------------------------------
// Finite-difference verification

/// A contiguous run of parameters and the analytic gradient claimed for it.
struct GradBlock {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    int checked = 0;
  };
  std::vector<Entry> blocks;
  double tolerance = 0.0;

  bool pass() const;
  double worst() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Entries per block to probe; 0 probes all. Subsets are chosen by a seeded shuffle.
  int max_entries = 0;
  std::uint64_t seed = 0;
  /// Floor on the block's numeric-gradient magnitude used as the denominator.
  double scale_floor = 1e-3;
  /// Optional filter over (block, entry); rejected entries are never probed.
  /// Used to keep probes away from kinks of piecewise-smooth closures.
  std::function<bool(size_t, size_t)> accept;
};

/// Central differences of a scalar closure against analytic gradients.
/// Per block: max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, scale_floor).
GradCheckReport grad_check(const std::function<double()>& closure, std::span<GradBlock> blocks,
                           const GradCheckOptions& options = {});

} // namespace munet::nn
