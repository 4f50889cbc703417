#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "munet/encode.hpp"
#include "munet/error.hpp"

using namespace munet;

namespace {

ImageStack random_stack(int res, const std::vector<std::string>& channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  ImageStack s;
  s.width = s.height = res;
  s.channels = channels;
  s.data.resize(res * res, static_cast<long>(channels.size()));
  for (long i = 0; i < s.data.size(); ++i) s.data.data()[i] = u(rng);
  return s;
}

FeatureMap random_map(int w, int h, int d, std::mt19937_64& rng, int downsample = 1) {
  std::uniform_real_distribution<double> u(-1, 1);
  FeatureMap m;
  m.width = w, m.height = h, m.downsample = downsample;
  m.data.resize(w * h, d);
  for (long i = 0; i < m.data.size(); ++i) m.data.data()[i] = u(rng);
  return m;
}

CameraWP cam_at(int res, double s = 1.0, double tx = 0.0, double ty = 0.0) {
  CameraWP c;
  c.scale = s, c.tx = tx, c.ty = ty, c.width = c.height = res;
  return c;
}

} // namespace

TEST(EncodeGlobal, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(0);
  const EncoderParams p = init_global_encoder(8, rng);
  ImageStack s;
  s.width = s.height = 32;
  s.channels = kGlobalChannels;
  s.data = Matrix::Zero(32 * 32, 4);
  EXPECT_TRUE(encode_global(s, p).isZero(0.0));
}

TEST(EncodeGlobal, DeterministicAndSeedSensitive) {
  std::mt19937_64 a(5), b(5), c(6);
  const EncoderParams pa = init_global_encoder(8, a), pb = init_global_encoder(8, b), pc = init_global_encoder(8, c);
  std::mt19937_64 rng(1);
  const ImageStack s = random_stack(32, kGlobalChannels, rng);
  EXPECT_EQ(encode_global(s, pa), encode_global(s, pb));
  EXPECT_NE(encode_global(s, pa), encode_global(s, pc));
}

TEST(EncodeGlobal, ChannelMismatchRejected) {
  std::mt19937_64 rng(0);
  const EncoderParams p = init_global_encoder(8, rng);
  EXPECT_THROW(encode_global(random_stack(32, kLocalChannels, rng), p), ShapeError);
}

TEST(EncodeLocal, StrideContract) {
  std::mt19937_64 rng(0);
  const EncoderParams p = init_local_encoder(12, rng);
  const FeatureMap f = encode_local(random_stack(64, kLocalChannels, rng), p);
  EXPECT_EQ(f.width, 16);
  EXPECT_EQ(f.height, 16);
  EXPECT_EQ(f.depth(), 12);
  EXPECT_EQ(f.downsample, 4);
}

TEST(EncodeLocal, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(0);
  const EncoderParams p = init_local_encoder(6, rng);
  ImageStack s;
  s.width = s.height = 32;
  s.channels = kLocalChannels;
  s.data = Matrix::Zero(32 * 32, 9);
  EXPECT_TRUE(encode_local(s, p).data.isZero(0.0));
}

TEST(EncodeLocal, TranslationByFourPixelsShiftsOneCell) {
  std::mt19937_64 rng(3);
  const EncoderParams p = init_local_encoder(6, rng);
  const ImageStack s = random_stack(64, kLocalChannels, rng);
  ImageStack shifted = s;
  shifted.data.setZero();
  for (int y = 0; y < 64; ++y)
    for (int x = 4; x < 64; ++x) shifted.data.row(y * 64 + x) = s.data.row(y * 64 + x - 4);
  const FeatureMap a = encode_local(s, p), b = encode_local(shifted, p);
  for (int y = 3; y < 13; ++y)
    for (int x = 3; x < 12; ++x) EXPECT_LE((a.cell(x, y) - b.cell(x + 1, y)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bilinear, CellCenterReturnsCell) {
  std::mt19937_64 rng(0);
  const FeatureMap m = random_map(6, 5, 4, rng);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x)
      EXPECT_LE((sample_bilinear(m, Vec2(x + 0.5, y + 0.5)).value - m.cell(x, y)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Bilinear, MidpointAveragesFour) {
  std::mt19937_64 rng(0);
  const FeatureMap m = random_map(6, 5, 4, rng);
  const RowVector avg = (m.cell(2, 1) + m.cell(3, 1) + m.cell(2, 2) + m.cell(3, 2)) / 4.0;
  EXPECT_LE((sample_bilinear(m, Vec2(3.0, 2.0)).value - avg).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Bilinear, RandomPointsMatchFourTermFormula) {
  std::mt19937_64 rng(4);
  const FeatureMap m = random_map(7, 9, 3, rng);
  std::uniform_real_distribution<double> ux(0.5, 6.5), uy(0.5, 8.5);
  for (int t = 0; t < 200; ++t) {
    const double px = ux(rng), py = uy(rng);
    const double cx = px - 0.5, cy = py - 0.5;
    const int x0 = std::min(static_cast<int>(cx), 5), y0 = std::min(static_cast<int>(cy), 7);
    const double fx = cx - x0, fy = cy - y0;
    const RowVector expect = (1 - fx) * (1 - fy) * m.cell(x0, y0) + fx * (1 - fy) * m.cell(x0 + 1, y0) +
                             (1 - fx) * fy * m.cell(x0, y0 + 1) + fx * fy * m.cell(x0 + 1, y0 + 1);
    EXPECT_LE((sample_bilinear(m, Vec2(px, py)).value - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Bilinear, ClampedAxisHasZeroGradient) {
  std::mt19937_64 rng(0);
  const FeatureMap m = random_map(4, 4, 2, rng);
  const BilinearSample s = sample_bilinear(m, Vec2(-3.0, 2.2));
  EXPECT_TRUE(s.d_point.col(0).isZero(0.0));
  EXPECT_FALSE(s.d_point.col(1).isZero(0.0));
  EXPECT_THROW(sample_bilinear(m, Vec2(std::nan(""), 1.0)), NumericalError);
}

TEST(Puncture, ConstantMap) {
  FeatureMap m;
  m.width = m.height = 8;
  m.downsample = 4;
  m.data = Matrix::Constant(64, 3, 0.25);
  for (const Vec3& v : {Vec3(0, 0, 0), Vec3(0.9, -0.7, 0.3), Vec3(5, 5, 5)})
    EXPECT_LE((puncture_vertex(m, v, cam_at(32, 0.8, 0.1), {3, 1.0}).value.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(Puncture, SinglePointPatternIsBilinear) {
  std::mt19937_64 rng(1);
  const FeatureMap m = random_map(8, 8, 3, rng, 4);
  const CameraWP cam = cam_at(32, 0.7, 0.05, -0.1);
  const Vec3 v(0.3, -0.2, 0.5);
  const RowVector expect = sample_bilinear(m, project_weak_perspective(v, cam) / 4.0).value;
  EXPECT_LE((puncture_vertex(m, v, cam, {1, 1.0}).value - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Puncture, PatternOnRampEqualsRampAtCenter) {
  FeatureMap m;
  m.width = m.height = 16;
  m.downsample = 2;
  m.data.resize(256, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) m.data(y * 16 + x, 0) = 0.3 * (x + 0.5) - 0.7 * (y + 0.5) + 1.0;
  const CameraWP cam = cam_at(32, 0.6);
  for (const Vec3& v : {Vec3(0.1, 0.2, 0), Vec3(-0.3, 0.05, 1)}) {
    const Vec2 c = project_weak_perspective(v, cam) / 2.0;
    const double ramp = 0.3 * c.x() - 0.7 * c.y() + 1.0;
    for (int size : {3, 5}) EXPECT_NEAR(puncture_vertex(m, v, cam, {size, 1.0}).value(0), ramp, 1e-12);
  }
}

TEST(Puncture, OrderInvariantMean) {
  std::mt19937_64 rng(2);
  const FeatureMap m = random_map(8, 8, 2, rng, 4);
  const CameraWP cam = cam_at(32, 0.9);
  const Vec3 v(0.2, 0.1, 0.0);
  const Vec2 c = project_weak_perspective(v, cam) / 4.0;
  auto offsets = NeighborhoodPattern{3, 1.0}.offsets();
  std::reverse(offsets.begin(), offsets.end());
  RowVector sum = RowVector::Zero(2);
  for (const Vec2& o : offsets) sum += sample_bilinear(m, c + o).value;
  EXPECT_LE((sum / 9.0 - puncture_vertex(m, v, cam, {3, 1.0}).value).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Puncture, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  const FeatureMap m = random_map(8, 8, 4, rng, 4);
  const CameraWP cam = cam_at(32, 0.8, 0.05, 0.1);
  const NeighborhoodPattern pat{3, 1.0};
  const double h = 1e-5;
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int t = 0; t < 10; ++t) {
    const Vec3 v(u(rng), u(rng), u(rng));
    const PunctureResult r = puncture_vertex(m, v, cam, pat);
    Matrix num_p(4, 3), num_c(4, 3);
    for (int k = 0; k < 3; ++k) {
      Vec3 a = v, b = v;
      a[k] += h, b[k] -= h;
      num_p.col(k) = ((puncture_vertex(m, a, cam, pat).value - puncture_vertex(m, b, cam, pat).value) / (2 * h)).transpose();
      CameraWP ca = cam, cb = cam;
      (k == 0 ? ca.scale : k == 1 ? ca.tx : ca.ty) += h;
      (k == 0 ? cb.scale : k == 1 ? cb.tx : cb.ty) -= h;
      num_c.col(k) = ((puncture_vertex(m, v, ca, pat).value - puncture_vertex(m, v, cb, pat).value) / (2 * h)).transpose();
    }
    EXPECT_LE((num_p - r.d_point).cwiseAbs().maxCoeff() / std::max(num_p.cwiseAbs().maxCoeff(), 1e-3), 1e-4);
    EXPECT_LE((num_c - r.d_camera).cwiseAbs().maxCoeff() / std::max(num_c.cwiseAbs().maxCoeff(), 1e-3), 1e-4);
  }
}

TEST(VertexFeatures, WidthsAndRadialNormals) {
  std::mt19937_64 rng(0);
  const MeshGraph m = make_icosphere(2);
  const FeatureMap f = random_map(8, 8, 5, rng, 4);
  const VertexFeatures vf = assemble_vertex_features(m, f, cam_at(32, 0.8), {3, 1.0});
  ASSERT_EQ(vf.psi.cols(), 11);
  for (int i = 0; i < m.vertex_count(); ++i) {
    EXPECT_EQ(Vec3(vf.psi.block(i, 5, 1, 3).transpose()), Vec3(m.vertices().row(i).transpose()));
    const Vec3 n = vf.psi.block(i, 8, 1, 3).transpose();
    EXPECT_NEAR(n.norm(), 1.0, 1e-12);
    EXPECT_LE(std::acos(std::min(1.0, n.dot(m.vertices().row(i).normalized()))), 0.05);
  }
}

TEST(VertexFeatures, PerturbationIsLocal) {
  std::mt19937_64 rng(1);
  const MeshGraph m = make_icosphere(1);
  const FeatureMap f = random_map(8, 8, 3, rng, 4);
  const CameraWP cam = cam_at(32, 0.8);
  const Matrix base = assemble_vertex_features(m, f, cam, {3, 1.0}).psi;
  const int moved = 17;
  Positions p = m.vertices();
  p.row(moved) += Eigen::RowVector3d(0.03, -0.02, 0.01);
  const Matrix after = assemble_vertex_features(m.with_vertices(p), f, cam, {3, 1.0}).psi;
  std::set<int> ring{moved};
  for (const auto& [a, b] : m.edges()) {
    if (a == moved) ring.insert(b);
    if (b == moved) ring.insert(a);
  }
  for (int i = 0; i < m.vertex_count(); ++i) {
    const bool changed = (after.row(i) - base.row(i)).cwiseAbs().maxCoeff() > 0.0;
    if (!ring.count(i)) EXPECT_FALSE(changed) << "vertex " << i;
    else if (i != moved) {
      EXPECT_EQ(after.block(i, 0, 1, 6), base.block(i, 0, 1, 6)) << "feature and position of neighbour " << i;
      EXPECT_TRUE(changed);
    }
  }
  EXPECT_NE(after.block(moved, 0, 1, 6), base.block(moved, 0, 1, 6));
}

TEST(EdgeFeatures, TetrahedronSlices) {
  std::mt19937_64 rng(2);
  const MeshGraph m = munet::test::tetrahedron();
  const FeatureMap f = random_map(8, 8, 2, rng, 4);
  const Matrix vf = assemble_vertex_features(m, f, cam_at(32, 0.8), {3, 1.0}).psi;
  const Matrix ef = assemble_edge_features(vf, m.edges());
  ASSERT_EQ(ef.rows(), 6);
  ASSERT_EQ(ef.cols(), 2 * vf.cols());
  for (int e = 0; e < 6; ++e) {
    EXPECT_EQ(Matrix(ef.block(e, 0, 1, 8)), Matrix(vf.row(m.edges()[e][0])));
    EXPECT_EQ(Matrix(ef.block(e, 8, 1, 8)), Matrix(vf.row(m.edges()[e][1])));
  }
}

TEST(EdgeFeatures, IdenticalVertexFeaturesSwapInvariant) {
  Matrix vf(3, 2);
  vf << 1, 2, 1, 2, 5, 6;
  Matrix swapped = vf;
  swapped.row(0).swap(swapped.row(1));
  const std::vector<Edge> edges{{0, 1}, {0, 2}, {1, 2}};
  EXPECT_EQ(assemble_edge_features(vf, edges), assemble_edge_features(swapped, edges));
}

TEST(EdgeFeatures, LengthMismatchRejected) {
  EXPECT_THROW(assemble_edge_features(Matrix::Zero(2, 3), {{0, 1}, {1, 2}}), ShapeError);
}

TEST(ImageStack, SelectUnknownChannel) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(random_stack(8, kGlobalChannels, rng).select({"nfx"}), ShapeError);
}
