#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "munet/error.hpp"
#include "munet/gradsuite.hpp"
#include "munet/nn.hpp"

using namespace munet;
using namespace munet::nn;

namespace {

Matrix random_matrix(long r, long c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<size_t>(m.size())}; }
std::span<const double> cspan_of(const Matrix& m) { return {m.data(), static_cast<size_t>(m.size())}; }

MeshConvKernel random_kernel(long in, long out, std::mt19937_64& rng) {
  MeshConvKernel k;
  for (auto& s : k) s = random_matrix(in, out, rng);
  return k;
}

/// Per-edge evaluation straight from the neighbourhood definition.
Matrix mesh_conv_oracle(const Matrix& x, const EdgeAdjacency& adj, const MeshConvKernel& k, MeshConvMode mode) {
  Matrix out(x.rows(), k[0].cols());
  for (long e = 0; e < x.rows(); ++e) {
    const auto& n = adj.neighbors[e];
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(k[0].cols());
    for (long o = 0; o < k[0].cols(); ++o) {
      double s = 0.0;
      for (long i = 0; i < x.cols(); ++i) {
        const double a = x(e, i), x1 = x(n[0], i), x2 = x(n[1], i), x3 = x(n[2], i), x4 = x(n[3], i);
        if (mode == MeshConvMode::Symmetric)
          s += a * k[0](i, o) + (x1 + x3) * k[1](i, o) + std::abs(x1 - x3) * k[2](i, o) + (x2 + x4) * k[3](i, o) +
               std::abs(x2 - x4) * k[4](i, o);
        else
          s += a * k[0](i, o) + x1 * k[1](i, o) + x2 * k[2](i, o) + x3 * k[3](i, o) + x4 * k[4](i, o);
      }
      acc(o) = s;
    }
    out.row(e) = acc;
  }
  return out;
}

} // namespace

TEST(Dense, IdentityLinear) {
  std::mt19937_64 rng(0);
  const Matrix h = random_matrix(5, 4, rng);
  EXPECT_EQ(dense_forward(h, Matrix::Identity(4, 4), Matrix::Zero(1, 4), Activation::Linear), h);
}

TEST(Dense, ZeroWeightsBroadcastBias) {
  std::mt19937_64 rng(0);
  const Matrix b = random_matrix(1, 3, rng, 0.1, 1.0);
  const Matrix out = dense_forward(random_matrix(6, 4, rng), Matrix::Zero(4, 3), b, Activation::LeakyRelu);
  for (long r = 0; r < 6; ++r) EXPECT_EQ(Matrix(out.row(r)), b);
}

TEST(Dense, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(1);
  Matrix h = random_matrix(7, 5, rng), w = random_matrix(5, 4, rng), b = random_matrix(1, 4, rng);
  const Matrix up = random_matrix(7, 4, rng);
  DenseTape tape;
  dense_forward(h, w, b, Activation::Linear, &tape);
  const DenseGrads g = dense_backward(tape, w, up);
  auto f = [&] { return (dense_forward(h, w, b, Activation::Linear).array() * up.array()).sum(); };
  std::vector<GradBlock> blocks{{"h", span_of(h), cspan_of(g.d_input)},
                                {"w", span_of(w), cspan_of(g.d_weight)},
                                {"b", span_of(b), cspan_of(g.d_bias)}};
  EXPECT_TRUE(grad_check(f, blocks).pass());
}

TEST(Dense, TapeIsSingleUse) {
  std::mt19937_64 rng(0);
  const Matrix w = random_matrix(3, 2, rng);
  DenseTape tape;
  dense_forward(random_matrix(4, 3, rng), w, Matrix::Zero(1, 2), Activation::Linear, &tape);
  dense_backward(tape, w, Matrix::Ones(4, 2));
  EXPECT_THROW(dense_backward(tape, w, Matrix::Ones(4, 2)), Error);
}

TEST(Dense, ShapeMismatch) {
  EXPECT_THROW(dense_forward(Matrix::Zero(2, 3), Matrix::Zero(4, 2), Matrix::Zero(1, 2), Activation::Linear),
               ShapeError);
}

TEST(GraphConv, TriangleAveragesOneHotRows) {
  const MeshGraph tri(Positions{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 2}});
  const SparseRowMatrix a = build_vertex_adjacency(tri);
  const Matrix out = graph_conv_forward(Matrix::Identity(3, 3), a, Matrix::Identity(3, 3), Activation::Linear);
  EXPECT_LE((out - Matrix::Constant(3, 3, 1.0 / 3.0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GraphConv, ZeroWeights) {
  std::mt19937_64 rng(0);
  const SparseRowMatrix a = build_vertex_adjacency(make_icosphere(0));
  EXPECT_TRUE(graph_conv_forward(random_matrix(12, 4, rng), a, Matrix::Zero(4, 3), Activation::LeakyRelu).isZero(0.0));
}

TEST(GraphConv, ConstantFieldIsFixedPoint) {
  const SparseRowMatrix a = build_vertex_adjacency(make_icosphere(2));
  const Matrix c = Matrix::Constant(162, 3, 0.7);
  EXPECT_LE((graph_conv_forward(c, a, Matrix::Identity(3, 3), Activation::Linear) - c).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GraphConv, DenseOracleAndGradients) {
  for (std::uint64_t seed : {0, 1, 2}) {
    std::mt19937_64 rng(seed);
    const MeshGraph m = make_icosphere(0);
    const SparseRowMatrix a = build_vertex_adjacency(m);
    const Eigen::MatrixXd dense = a;
    Matrix h = random_matrix(12, 5, rng), w = random_matrix(5, 4, rng);
    const Matrix pre = dense * h * w;
    const Matrix expect = pre.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; });
    GraphConvTape tape;
    EXPECT_LE((graph_conv_forward(h, a, w, Activation::LeakyRelu, &tape) - expect).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix up = random_matrix(12, 4, rng);
    const GraphConvGrads g = graph_conv_backward(tape, w, up);
    auto f = [&] { return (graph_conv_forward(h, a, w, Activation::LeakyRelu).array() * up.array()).sum(); };
    std::vector<GradBlock> blocks{{"h", span_of(h), cspan_of(g.d_input)}, {"w", span_of(w), cspan_of(g.d_weight)}};
    EXPECT_TRUE(grad_check(f, blocks).pass()) << "seed " << seed;
  }
}

TEST(MeshConv, IdentitySlot) {
  std::mt19937_64 rng(0);
  const EdgeAdjacency adj = build_edge_adjacency(munet::test::tetrahedron());
  const Matrix x = random_matrix(6, 4, rng);
  MeshConvKernel k;
  k[0] = Matrix::Identity(4, 4);
  for (int s = 1; s < 5; ++s) k[s] = Matrix::Zero(4, 4);
  EXPECT_EQ(mesh_conv_forward(x, adj, k, Activation::Linear), x);
}

TEST(MeshConv, PairSwapInvariance) {
  std::mt19937_64 rng(1);
  const MeshGraph m = make_icosphere(1);
  const EdgeAdjacency adj = build_edge_adjacency(m);
  EdgeAdjacency swapped = adj;
  for (auto& n : swapped.neighbors) {
    std::swap(n[0], n[2]);
    std::swap(n[1], n[3]);
  }
  const Matrix x = random_matrix(m.edge_count(), 3, rng);
  const MeshConvKernel k = random_kernel(3, 2, rng);
  EXPECT_EQ(mesh_conv_forward(x, adj, k, Activation::LeakyRelu), mesh_conv_forward(x, swapped, k, Activation::LeakyRelu));
}

TEST(MeshConv, DirectOracle) {
  std::mt19937_64 rng(2);
  const EdgeAdjacency adj = build_edge_adjacency(munet::test::tetrahedron());
  const Matrix x = random_matrix(6, 5, rng);
  const MeshConvKernel k = random_kernel(5, 3, rng);
  for (MeshConvMode mode : {MeshConvMode::Symmetric, MeshConvMode::RawOrdered})
    EXPECT_LE((mesh_conv_forward(x, adj, k, Activation::Linear, mode) - mesh_conv_oracle(x, adj, k, mode))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
}

TEST(MeshConv, TieHasZeroSubgradient) {
  const EdgeAdjacency adj = build_edge_adjacency(munet::test::tetrahedron());
  Matrix x = Matrix::Ones(6, 1);
  MeshConvKernel k;
  for (auto& s : k) s = Matrix::Zero(1, 1);
  k[2](0, 0) = 1.0;
  MeshConvTape tape;
  mesh_conv_forward(x, adj, k, Activation::Linear, MeshConvMode::Symmetric, &tape);
  const MeshConvGrads g = mesh_conv_backward(tape, k, Matrix::Ones(6, 1));
  EXPECT_TRUE(g.d_input.isZero(0.0));
}

TEST(EdgeToVertex, ConstantField) {
  const MeshGraph m = make_icosphere(1);
  const Matrix out = edge_to_vertex(Matrix::Constant(m.edge_count(), 2, -1.5), build_edge_to_vertex(m));
  EXPECT_LE((out.array() + 1.5).abs().maxCoeff(), 1e-15);
}

TEST(EdgeToVertex, TetrahedronMeanOfThree) {
  const MeshGraph m = munet::test::tetrahedron();
  Matrix e(6, 1);
  e << 1, 2, 4, 8, 16, 32;
  const Matrix out = edge_to_vertex(e, build_edge_to_vertex(m));
  for (int v = 0; v < 4; ++v) {
    double s = 0;
    for (int k = 0; k < 6; ++k)
      if (m.edges()[k][0] == v || m.edges()[k][1] == v) s += e(k, 0);
    EXPECT_DOUBLE_EQ(out(v, 0), s / 3.0);
  }
}

TEST(Conv2d, DirectOracle) {
  std::mt19937_64 rng(3);
  Grid in{7, 6, random_matrix(42, 2, rng)};
  const Matrix w = random_matrix(18, 3, rng), b = random_matrix(1, 3, rng);
  for (int stride : {1, 2}) {
    const Grid out = conv2d_forward(in, w, b, stride, Activation::Linear);
    ASSERT_EQ(out.width, conv2d_output_size(7, stride));
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        for (int o = 0; o < 3; ++o) {
          double s = b(0, o);
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int sx = x * stride + dx, sy = y * stride + dy;
              if (sx < 0 || sy < 0 || sx >= 7 || sy >= 6) continue;
              for (int c = 0; c < 2; ++c) s += in.data(sy * 7 + sx, c) * w(((dy + 1) * 3 + dx + 1) * 2 + c, o);
            }
          EXPECT_NEAR(out.data(y * out.width + x, o), s, 1e-12);
        }
  }
}

TEST(GradCheck, LinearClosureIsExact) {
  std::mt19937_64 rng(0);
  Matrix x = random_matrix(10, 1, rng);
  const Matrix c = random_matrix(10, 1, rng);
  auto f = [&] { return (x.array() * c.array()).sum(); };
  std::vector<GradBlock> blocks{{"x", span_of(x), cspan_of(c)}};
  EXPECT_LE(grad_check(f, blocks).worst(), 1e-10);
}

TEST(GradCheck, CorruptedBackwardReportsUnitError) {
  std::mt19937_64 rng(1);
  Matrix x = random_matrix(8, 1, rng);
  const Matrix doubled = 2.0 * 2.0 * x; // d/dx sum x^2 = 2x, scaled by 2
  auto f = [&] { return x.squaredNorm(); };
  std::vector<GradBlock> blocks{{"x", span_of(x), cspan_of(doubled)}};
  const GradCheckReport r = grad_check(f, blocks);
  EXPECT_NEAR(r.worst(), 1.0, 1e-6);
  EXPECT_FALSE(r.pass());
}

TEST(GradCheck, SubsetRestoresValues) {
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(50, 1, rng);
  const Matrix before = x;
  const Matrix g = 2.0 * x;
  auto f = [&] { return x.squaredNorm(); };
  std::vector<GradBlock> blocks{{"x", span_of(x), cspan_of(g)}};
  GradCheckOptions opt;
  opt.max_entries = 7;
  const GradCheckReport r = grad_check(f, blocks, opt);
  EXPECT_EQ(r.blocks[0].checked, 7);
  EXPECT_EQ(x, before);
}

TEST(InitParams, ReproducibleAndSeedSensitive) {
  const auto a = init_params(0, InitScheme::UniformFanIn, {{8, 4}, {4, 2}});
  const auto b = init_params(0, InitScheme::UniformFanIn, {{8, 4}, {4, 2}});
  const auto c = init_params(1, InitScheme::UniformFanIn, {{8, 4}, {4, 2}});
  EXPECT_EQ(a.store[0], b.store[0]);
  EXPECT_NE(a.store[0], c.store[0]);
  EXPECT_TRUE(init_params(0, InitScheme::Zeros, {{3, 3}}).store[0].isZero(0.0));
}

TEST(InitParams, EmpiricalVarianceNearTarget) {
  const int fan_in = 50;
  const auto p = init_params(9, InitScheme::UniformFanIn, {{fan_in, 200}});
  const Matrix& w = p.store[0];
  ASSERT_EQ(w.size(), 10000);
  const double mean = w.mean();
  const double var = (w.array() - mean).square().sum() / (w.size() - 1);
  EXPECT_NEAR(var, init_target_variance(fan_in), 0.1 * init_target_variance(fan_in));
}

TEST(GradientSuite, PassesOnSeedsZeroToTwo) {
  for (std::uint64_t seed : {0, 1, 2}) {
    GradSuiteOptions o;
    o.seed = seed;
    for (const auto& e : run_gradient_suite(o)) EXPECT_TRUE(e.report.pass()) << e.name << " seed " << seed;
  }
}

TEST(GradientSuite, InjectedFaultDetected) {
  GradSuiteOptions o;
  o.inject_fault = true;
  const auto entries = run_gradient_suite(o);
  EXPECT_FALSE(entries.front().report.pass());
  EXPECT_NEAR(entries.front().report.worst(), 1.0, 1e-3);
}
