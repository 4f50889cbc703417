#pragma once

#include <random>

#include "munet/mesh.hpp"

namespace munet::test {

inline MeshGraph tetrahedron() {
  Positions v(4, 3);
  v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  return MeshGraph(v, {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}});
}

/// Axis-aligned square in the z = `z` plane, counter-clockwise seen from +z.
inline MeshGraph quad(double half, double z = 0.0) {
  Positions v(4, 3);
  v << -half, -half, z, half, -half, z, half, half, z, -half, half, z;
  return MeshGraph(v, {{0, 1, 2}, {0, 2, 3}});
}

/// Unit cube [-1, 1]^3, twelve outward-wound triangles.
inline MeshGraph cube() {
  Positions v(8, 3);
  v << -1, -1, -1, 1, -1, -1, 1, 1, -1, -1, 1, -1, -1, -1, 1, 1, -1, 1, 1, 1, 1, -1, 1, 1;
  return MeshGraph(v, {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                       {2, 3, 7}, {2, 7, 6}, {1, 2, 6}, {1, 6, 5}, {0, 4, 7}, {0, 7, 3}});
}

inline Positions random_points(int n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Positions p(n, 3);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) p(i, k) = u(rng);
  return p;
}

inline MeshGraph scaled(const MeshGraph& m, double s) { return m.with_vertices(m.vertices() * s); }

} // namespace munet::test
