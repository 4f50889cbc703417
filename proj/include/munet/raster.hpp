#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "munet/mesh.hpp"

namespace munet {

/// Weak-perspective camera: orthographic projection, uniform scale, 2D shift.
/// Normalized image coordinates span [-1, 1] on both axes; the image row
/// index grows downward.
struct CameraWP {
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  int width = 512;
  int height = 512;

  /// Throws StructuralError unless scale > 0 and resolution >= 8x8.
  void validate() const;
};

using Vec2 = Eigen::Vector2d;

struct Projection {
  Vec2 pixel;
  /// d(pixel)/d(point)
  Eigen::Matrix<double, 2, 3> d_point;
  /// d(pixel)/d(scale, tx, ty)
  Eigen::Matrix<double, 2, 3> d_camera;
};

/// u = (s x + tx + 1) / 2 * W,  v = (1 - (s y + ty)) / 2 * H.
Vec2 project_weak_perspective(const Vec3& point, const CameraWP& cam);
Projection project_weak_perspective_with_jacobian(const Vec3& point, const CameraWP& cam);

/// The four yaw angles used by the multi-view losses and metrics.
inline constexpr std::array<double, 4> kCanonicalViews = {0.0, 90.0, 180.0, 270.0};

bool is_canonical_view(double degrees);

/// Yaw about the vertical (+y) axis through `pivot` (default: vertex centroid).
/// Right-handed: a +90 degree yaw sends +x to -z.
MeshGraph rotate_view(const MeshGraph& mesh, double degrees, std::optional<Vec3> pivot = std::nullopt);

Vec3 centroid(const MeshGraph& mesh);

struct BinaryMask {
  int width = 0;
  int height = 0;
  double angle = 0.0;
  std::vector<std::uint8_t> pixels; // row-major, 0 or 1

  std::uint8_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
  long count() const;
};

struct NormalMap {
  int width = 0;
  int height = 0;
  double angle = 0.0;
  /// Unit camera-space normals (x right, y up, z toward the viewer); zero on background.
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> mask;
  /// Camera-space depth along the viewing direction (-z); +inf on background.
  std::vector<double> depth;

  const Vec3& at(int x, int y) const { return normals[static_cast<size_t>(y) * width + x]; }
  BinaryMask foreground() const;
};

/// Coverage of pixel centers by projected triangles, regardless of facing.
/// Pixel centers lying exactly on an edge follow the top-left rule.
BinaryMask rasterize_silhouette(const MeshGraph& mesh, const CameraWP& cam);

/// Flat-shaded, z-buffered face normals after yawing the mesh by `degrees`.
/// With `face_camera`, normals pointing away from the viewer are flipped.
NormalMap rasterize_normal_map(const MeshGraph& mesh, double degrees, const CameraWP& cam,
                               bool face_camera = true, std::optional<Vec3> pivot = std::nullopt);

/// Number of pixels where the two masks differ.
long mask_abs_difference_area(const BinaryMask& a, const BinaryMask& b);

} // namespace munet
