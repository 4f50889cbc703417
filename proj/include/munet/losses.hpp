#pragma once

#include <optional>
#include <string>

#include "munet/mesh.hpp"
#include "munet/raster.hpp"

namespace munet {

/// K x N non-negative, row-stochastic map from mesh vertices to joints.
struct JointRegressor {
  SparseRowMatrix weights;

  int joint_count() const { return static_cast<int>(weights.rows()); }
  int vertex_count() const { return static_cast<int>(weights.cols()); }
  Positions apply(const Positions& vertices) const;
  /// Throws StructuralError on negative entries or rows that do not sum to 1.
  void validate() const;

  static JointRegressor from_json(const std::string& text);
  std::string to_json() const;
};

struct LossConfig {
  double lambda_trace = 1.0; // lambda_1
  double lambda_cloth = 1.0; // lambda_2
  bool clamp_trace = false;
  int silhouette_resolution = 128;
  double w_vertex = 1.0;
  double w_joint = 1.0;
  double w_chamfer_body = 1.0;
  double w_chamfer_surface = 1.0;
  double w_normal = 1.0;

  void validate() const;
};

/// Named loss terms. Totals:
///   mesh    = w_v lv + w_j lj + w_cd1 lcd1
///   surface = w_cd2 lcd2 + w_n ln
///   collab  = lambda_1 ltrace + lambda_2 lcloth
///   total   = mesh + surface + collab
struct LossReport {
  double lv = 0, lj = 0, lcd1 = 0;
  double lcd2 = 0, ln = 0;
  double ltrace = 0, lcloth = 0;
  double mesh_total = 0, surface_total = 0, collab_total = 0, total = 0;

  void finalize(const LossConfig& cfg);
  /// Name of the first non-finite term, or empty.
  std::string first_non_finite() const;
  std::string to_json() const;
};

struct PointLoss {
  double value = 0.0;
  Positions grad;
};

struct PairLoss {
  double value = 0.0;
  Positions grad_a;
  Positions grad_b;
};

/// 0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), unsquared distances.
/// Nearest-neighbour ties resolve to the lowest index; zero distances carry zero gradient.
PairLoss chamfer(const Positions& a, const Positions& b);

/// mean over vertices of the L1 norm of the offset.
PointLoss vertex_loss(const Positions& pred, const Positions& target);
/// mean over joints of the Euclidean distance between J * pred and the targets.
PointLoss joint_loss(const Positions& pred, const JointRegressor& regressor, const Positions& joints_gt);
/// mean (1 - n_pred . n_target(nearest vertex)); correspondence is held fixed.
PointLoss normal_loss(const MeshGraph& pred, const MeshGraph& target);

struct MeshLoss {
  LossReport report; // lv, lj, lcd1, mesh_total
  Positions grad;    // d mesh_total / d pred vertices
};

MeshLoss loss_mesh(const MeshGraph& pred, const MeshGraph& target, const JointRegressor* regressor,
                   const Positions* joints_gt, const LossConfig& cfg);

struct SurfaceLoss {
  double lcd2 = 0.0, ln = 0.0, total = 0.0;
  Positions grad;
};

SurfaceLoss loss_surface(const MeshGraph& pred, const MeshGraph& target, const LossConfig& cfg);

struct TraceLoss {
  double value = 0.0;
  Positions grad_pred;    // w.r.t. the surface driven by the predicted body
  Positions grad_from_gt; // w.r.t. the surface driven by the ground-truth body
};

/// L(pred, target) - L(from_gt_body, target), optionally clamped below at 0.
TraceLoss loss_trace(const MeshGraph& pred, const MeshGraph& from_gt_body, const MeshGraph& target,
                     const LossConfig& cfg);

/// |sum_k area(S_k xor M_k) - sum_k area(S~_k xor M~_k)| / (W H) over the four canonical yaws.
/// Predicted meshes render with `cam_pred` about the predicted body centroid,
/// ground-truth meshes with `cam_gt` about the ground-truth body centroid.
double loss_cloth(const MeshGraph& surface_pred, const MeshGraph& body_pred, const MeshGraph& surface_gt,
                  const MeshGraph& body_gt, const CameraWP& cam_pred, const CameraWP& cam_gt,
                  const LossConfig& cfg);
inline double loss_cloth(const MeshGraph& surface_pred, const MeshGraph& body_pred, const MeshGraph& surface_gt,
                         const MeshGraph& body_gt, const CameraWP& cam, const LossConfig& cfg) {
  return loss_cloth(surface_pred, body_pred, surface_gt, body_gt, cam, cam, cfg);
}

/// Clothing area of one (surface, body) pair: sum over views of the symmetric-difference pixel count.
long clothing_area(const MeshGraph& surface, const MeshGraph& body, const CameraWP& cam);

double loss_collab(double trace, double cloth, const LossConfig& cfg);

} // namespace munet
