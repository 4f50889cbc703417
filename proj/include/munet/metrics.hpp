#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "munet/losses.hpp"
#include "munet/mesh.hpp"
#include "munet/raster.hpp"

namespace munet {

struct SimilarityTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();

  /// x -> scale * R x + t, row-wise.
  Positions apply(const Positions& points) const;
};

/// Mean Euclidean distance between corresponding joints.
double mpjpe(const Positions& pred, const Positions& gt);

/// Least-squares similarity transform taking `source` onto `target`.
/// Throws DegenerateGeometryError for fewer than 3 points or collinear sources.
SimilarityTransform procrustes_align(const Positions& source, const Positions& target);

double pa_mpjpe(const Positions& pred, const Positions& gt);

/// Mean per-vertex Euclidean distance (shared topology).
double mvpe(const Positions& pred, const Positions& gt);

/// Area-uniform surface samples, deterministic per seed.
Positions sample_surface(const MeshGraph& mesh, int n_samples, std::uint64_t seed);

/// Exact distance from `p` to triangle (a, b, c).
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Mean exact distance from each point to the nearest triangle of `mesh`.
double mean_point_to_surface(const Positions& points, const MeshGraph& mesh);

struct SurfaceDistances {
  double chamfer = 0.0;          // (p2s + s2p) / 2
  double point_to_surface = 0.0; // samples of gt -> recon surface
  double surface_to_point = 0.0; // samples of recon -> gt surface
};

/// Each mesh is sampled with the same seed, so swapping arguments swaps the directed terms exactly.
SurfaceDistances surface_distances(const MeshGraph& recon, const MeshGraph& gt, int n_samples,
                                   std::uint64_t seed = 0);

struct NormalMapMetrics {
  double cosine = 0.0; // mean (1 - n_recon . n_gt)
  double l2 = 0.0;     // mean |n_recon - n_gt|
  std::vector<double> cosine_per_view;
  std::vector<double> l2_per_view;
};

/// One view: pixel domain is the union of both foregrounds, background normals are zero.
NormalMapMetrics normal_map_view_metrics(const NormalMap& recon, const NormalMap& gt);

/// Renders both meshes at the four canonical yaws about the gt centroid and averages the views.
NormalMapMetrics normal_map_metrics(const MeshGraph& recon, const MeshGraph& gt, const CameraWP& cam,
                                    int resolution, bool face_camera = true);

struct MetricConfig {
  int n_samples = 10000;
  std::uint64_t seed = 0;
  int resolution = 512;
  CameraWP camera{};
  bool face_camera = true;
  /// Reporting multipliers from model units to mm (joints, vertices) and cm (surfaces).
  double mm_per_unit = 1.0;
  double cm_per_unit = 1.0;
};

struct JointPair {
  Positions pred;
  Positions gt;
};

struct MetricReport {
  static constexpr int kSchemaVersion = 1;

  std::optional<double> mpjpe, pa_mpjpe, mvpe;
  double chamfer = 0.0, p2s = 0.0, s2p = 0.0;
  double normal_cos = 0.0, normal_l2 = 0.0;
  bool joint_metrics_omitted = false;
  bool vertex_metric_omitted = false;
  MetricConfig config;

  std::string to_json() const;
  std::string to_table() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

/// Joint metrics come from `joints` when given, else from `regressor` applied to both meshes;
/// with neither they are omitted and flagged. MVPE needs equal vertex counts.
MetricReport evaluate_pair(const MeshGraph& recon, const MeshGraph& gt, const JointRegressor* regressor,
                           const MetricConfig& cfg, const JointPair* joints = nullptr);

} // namespace munet
