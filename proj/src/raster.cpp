#include "munet/raster.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>

#include "munet/error.hpp"

namespace munet {

void CameraWP::validate() const {
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw StructuralError("camera scale must be positive");
  if (!std::isfinite(tx) || !std::isfinite(ty)) throw StructuralError("camera translation must be finite");
  if (width < 8 || height < 8) throw StructuralError("camera resolution must be at least 8x8");
}

Vec2 project_weak_perspective(const Vec3& p, const CameraWP& cam) {
  return {(cam.scale * p.x() + cam.tx + 1.0) * 0.5 * cam.width,
          (1.0 - (cam.scale * p.y() + cam.ty)) * 0.5 * cam.height};
}

Projection project_weak_perspective_with_jacobian(const Vec3& p, const CameraWP& cam) {
  Projection out;
  out.pixel = project_weak_perspective(p, cam);
  const double hw = 0.5 * cam.width, hh = 0.5 * cam.height;
  out.d_point << cam.scale * hw, 0.0, 0.0, 0.0, -cam.scale * hh, 0.0;
  out.d_camera << p.x() * hw, hw, 0.0, -p.y() * hh, 0.0, -hh;
  return out;
}

bool is_canonical_view(double degrees) {
  return std::find(kCanonicalViews.begin(), kCanonicalViews.end(), degrees) != kCanonicalViews.end();
}

Vec3 centroid(const MeshGraph& mesh) {
  if (mesh.vertex_count() == 0) return Vec3::Zero();
  return mesh.vertices().colwise().mean().transpose();
}

MeshGraph rotate_view(const MeshGraph& mesh, double degrees, std::optional<Vec3> pivot) {
  double c, s;
  // Exact values on the quarter turns keep repeated rotations bit-stable.
  double wrapped = std::fmod(std::fmod(degrees, 360.0) + 360.0, 360.0);
  if (wrapped == 0.0) {
    return mesh;
  } else if (wrapped == 90.0) {
    c = 0.0, s = 1.0;
  } else if (wrapped == 180.0) {
    c = -1.0, s = 0.0;
  } else if (wrapped == 270.0) {
    c = 0.0, s = -1.0;
  } else {
    double r = degrees * M_PI / 180.0;
    c = std::cos(r), s = std::sin(r);
  }
  const Vec3 center = pivot.value_or(centroid(mesh));
  Positions out = mesh.vertices();
  for (int i = 0; i < out.rows(); ++i) {
    double x = out(i, 0) - center.x();
    double z = out(i, 2) - center.z();
    out(i, 0) = c * x + s * z + center.x();
    out(i, 2) = -s * x + c * z + center.z();
  }
  return mesh.with_vertices(std::move(out));
}

long BinaryMask::count() const {
  long n = 0;
  for (auto p : pixels) n += p;
  return n;
}

BinaryMask NormalMap::foreground() const {
  BinaryMask m;
  m.width = width;
  m.height = height;
  m.angle = angle;
  m.pixels = mask;
  return m;
}

namespace {

// Vertices snap to a 1/256 pixel grid and edge functions are evaluated in
// integers, so a pixel center on a shared edge gets exactly zero from both
// triangles and the top-left rule assigns it to one of them.
constexpr double kSubpixel = 256.0;
constexpr double kCoordLimit = 1 << 29;

struct Fixed {
  std::int64_t x, y;
};

Fixed snap(const Vec2& p) {
  auto q = [](double c) {
    return static_cast<std::int64_t>(std::llround(std::clamp(c * kSubpixel, -kCoordLimit, kCoordLimit)));
  };
  return {q(p.x()), q(p.y())};
}

// Signed doubled area of (a, b, p) in image coordinates (row index down), in subpixel units squared.
std::int64_t edge_fn(const Fixed& a, const Fixed& b, const Fixed& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

// For a triangle with positive edge functions inside, an edge a->b is a top
// edge when horizontal with the interior below, a left edge when it runs upward.
bool is_top_left(const Fixed& a, const Fixed& b) {
  const std::int64_t dx = b.x - a.x, dy = b.y - a.y;
  return dy < 0 || (dy == 0 && dx > 0);
}

// Calls fn(x, y, w0, w1, w2) with normalized barycentrics for every covered pixel center.
template <typename Fn>
void scan_triangle(const Vec2& q0, const Vec2& q1, const Vec2& q2, int width, int height, Fn&& fn) {
  if (!q0.allFinite() || !q1.allFinite() || !q2.allFinite()) return;
  Fixed p0 = snap(q0), p1 = snap(q1), p2 = snap(q2);
  std::int64_t area = edge_fn(p0, p1, p2);
  if (area == 0) return;
  bool swapped = false;
  if (area < 0) {
    std::swap(p1, p2);
    area = -area;
    swapped = true;
  }
  const std::int64_t minx = std::min({p0.x, p1.x, p2.x}), maxx = std::max({p0.x, p1.x, p2.x});
  const std::int64_t miny = std::min({p0.y, p1.y, p2.y}), maxy = std::max({p0.y, p1.y, p2.y});
  auto lo = [](std::int64_t c) { return static_cast<int>(std::max<double>(std::floor(c / kSubpixel - 0.5), -1.0)); };
  auto hi = [](std::int64_t c, int n) { return static_cast<int>(std::min<double>(std::ceil(c / kSubpixel - 0.5), n)); };
  const int x0 = std::max(0, lo(minx)), x1 = std::min(width - 1, hi(maxx, width));
  const int y0 = std::max(0, lo(miny)), y1 = std::min(height - 1, hi(maxy, height));
  if (x0 > x1 || y0 > y1) return;

  const bool tl0 = is_top_left(p1, p2), tl1 = is_top_left(p2, p0), tl2 = is_top_left(p0, p1);
  const std::int64_t half = static_cast<std::int64_t>(kSubpixel / 2);
  const double inv = 1.0 / static_cast<double>(area);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const Fixed p{x * static_cast<std::int64_t>(kSubpixel) + half, y * static_cast<std::int64_t>(kSubpixel) + half};
      const std::int64_t e0 = edge_fn(p1, p2, p), e1 = edge_fn(p2, p0, p), e2 = edge_fn(p0, p1, p);
      const bool inside = (e0 > 0 || (e0 == 0 && tl0)) && (e1 > 0 || (e1 == 0 && tl1)) && (e2 > 0 || (e2 == 0 && tl2));
      if (!inside) continue;
      double w0 = e0 * inv, w1 = e1 * inv, w2 = e2 * inv;
      if (swapped) std::swap(w1, w2);
      fn(x, y, w0, w1, w2);
    }
  }
}

} // namespace

BinaryMask rasterize_silhouette(const MeshGraph& mesh, const CameraWP& cam) {
  if (mesh.empty()) throw StructuralError("cannot rasterize an empty mesh");
  cam.validate();
  BinaryMask mask;
  mask.width = cam.width;
  mask.height = cam.height;
  mask.pixels.assign(static_cast<size_t>(cam.width) * cam.height, 0);

  const Positions& v = mesh.vertices();
  std::vector<Vec2> screen(v.rows());
  for (int i = 0; i < v.rows(); ++i) screen[i] = project_weak_perspective(v.row(i).transpose(), cam);
  for (const Face& f : mesh.faces()) {
    scan_triangle(screen[f[0]], screen[f[1]], screen[f[2]], cam.width, cam.height,
                  [&](int x, int y, double, double, double) {
                    mask.pixels[static_cast<size_t>(y) * cam.width + x] = 1;
                  });
  }
  return mask;
}

NormalMap rasterize_normal_map(const MeshGraph& mesh, double degrees, const CameraWP& cam, bool face_camera,
                               std::optional<Vec3> pivot) {
  if (mesh.empty()) throw StructuralError("cannot rasterize an empty mesh");
  cam.validate();
  const MeshGraph view = rotate_view(mesh, degrees, pivot);
  const Positions& v = view.vertices();
  const Positions fn = face_normals(view);

  NormalMap map;
  map.width = cam.width;
  map.height = cam.height;
  map.angle = degrees;
  const size_t n = static_cast<size_t>(cam.width) * cam.height;
  map.normals.assign(n, Vec3::Zero());
  map.mask.assign(n, 0);
  map.depth.assign(n, std::numeric_limits<double>::infinity());

  std::vector<Vec2> screen(v.rows());
  for (int i = 0; i < v.rows(); ++i) screen[i] = project_weak_perspective(v.row(i).transpose(), cam);

  for (int fi = 0; fi < view.face_count(); ++fi) {
    const Face& f = view.faces()[fi];
    Vec3 normal = fn.row(fi).transpose();
    if (normal.isZero(0.0)) continue;
    if (face_camera && normal.z() < 0.0) normal = -normal;
    const double d0 = -v(f[0], 2), d1 = -v(f[1], 2), d2 = -v(f[2], 2);
    scan_triangle(screen[f[0]], screen[f[1]], screen[f[2]], cam.width, cam.height,
                  [&](int x, int y, double w0, double w1, double w2) {
                    size_t idx = static_cast<size_t>(y) * cam.width + x;
                    double d = w0 * d0 + w1 * d1 + w2 * d2;
                    if (d < map.depth[idx]) {
                      map.depth[idx] = d;
                      map.normals[idx] = normal;
                      map.mask[idx] = 1;
                    }
                  });
  }
  return map;
}

long mask_abs_difference_area(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeError("mask resolution mismatch: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
  long n = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) n += (a.pixels[i] != b.pixels[i]);
  return n;
}

} // namespace munet
