#include "munet/losses.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"

#include "munet/error.hpp"

namespace munet {

// ---------------------------------------------------------------------------
// JointRegressor

Positions JointRegressor::apply(const Positions& vertices) const {
  if (vertices.rows() != weights.cols())
    throw ShapeError("regressor expects " + std::to_string(weights.cols()) + " vertices, got " +
                     std::to_string(vertices.rows()));
  return weights * vertices;
}

void JointRegressor::validate() const {
  if (weights.rows() < 1) throw StructuralError("joint regressor needs at least one joint");
  for (int k = 0; k < weights.outerSize(); ++k) {
    double sum = 0.0;
    for (SparseRowMatrix::InnerIterator it(weights, k); it; ++it) {
      if (it.value() < 0.0) throw StructuralError("joint regressor has a negative weight in row " + std::to_string(k));
      sum += it.value();
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw StructuralError("joint regressor row " + std::to_string(k) + " sums to " + std::to_string(sum));
  }
}

JointRegressor JointRegressor::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("regressor JSON: ") + e.what());
  }
  try {
    const int vertices = j.at("vertices").get<int>();
    const auto& rows = j.at("rows");
    std::vector<Eigen::Triplet<double>> trip;
    int k = 0;
    for (const auto& r : rows) {
      for (const auto& entry : r) trip.emplace_back(k, entry.at(0).get<int>(), entry.at(1).get<double>());
      ++k;
    }
    JointRegressor reg;
    reg.weights.resize(k, vertices);
    for (const auto& t : trip)
      if (t.col() < 0 || t.col() >= vertices) throw StructuralError("regressor vertex index out of range");
    reg.weights.setFromTriplets(trip.begin(), trip.end());
    reg.validate();
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("regressor JSON: ") + e.what());
  }
}

std::string JointRegressor::to_json() const {
  nlohmann::json j;
  j["vertices"] = vertex_count();
  j["rows"] = nlohmann::json::array();
  for (int k = 0; k < weights.outerSize(); ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (SparseRowMatrix::InnerIterator it(weights, k); it; ++it) row.push_back({it.col(), it.value()});
    j["rows"].push_back(row);
  }
  return j.dump();
}

// ---------------------------------------------------------------------------
// Config / report

void LossConfig::validate() const {
  auto nonneg = [](double v, const char* key) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(key, "must be a finite non-negative number");
  };
  nonneg(lambda_trace, "lambda_trace");
  nonneg(lambda_cloth, "lambda_cloth");
  nonneg(w_vertex, "w_vertex");
  nonneg(w_joint, "w_joint");
  nonneg(w_chamfer_body, "w_chamfer_body");
  nonneg(w_chamfer_surface, "w_chamfer_surface");
  nonneg(w_normal, "w_normal");
  if (silhouette_resolution < 8) throw ConfigError("silhouette_resolution", "must be at least 8");
}

void LossReport::finalize(const LossConfig& cfg) {
  mesh_total = cfg.w_vertex * lv + cfg.w_joint * lj + cfg.w_chamfer_body * lcd1;
  surface_total = cfg.w_chamfer_surface * lcd2 + cfg.w_normal * ln;
  collab_total = cfg.lambda_trace * ltrace + cfg.lambda_cloth * lcloth;
  total = mesh_total + surface_total + collab_total;
}

std::string LossReport::first_non_finite() const {
  const std::pair<const char*, double> terms[] = {{"lv", lv},     {"lj", lj},         {"lcd1", lcd1},
                                                  {"lcd2", lcd2}, {"ln", ln},         {"ltrace", ltrace},
                                                  {"lcloth", lcloth}, {"total", total}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) return name;
  return {};
}

std::string LossReport::to_json() const {
  nlohmann::json j = {{"lv", lv},
                      {"lj", lj},
                      {"lcd1", lcd1},
                      {"lcd2", lcd2},
                      {"ln", ln},
                      {"ltrace", ltrace},
                      {"lcloth", lcloth},
                      {"mesh_total", mesh_total},
                      {"surface_total", surface_total},
                      {"collab_total", collab_total},
                      {"total", total}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Point losses

namespace {

// Index of the nearest row of `b` to `p` (lowest index on ties) and its distance.
std::pair<int, double> nearest(const Eigen::RowVector3d& p, const Positions& b) {
  int best = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (int j = 0; j < b.rows(); ++j) {
    double d2 = (b.row(j) - p).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = j;
    }
  }
  return {best, std::sqrt(best_d2)};
}

// Adds d/d(a, b) of 0.5 * mean_a min_b |a - b| and returns the directed term.
double directed_chamfer(const Positions& a, const Positions& b, Positions& grad_a, Positions& grad_b) {
  const double w = 0.5 / a.rows();
  double sum = 0.0;
  for (int i = 0; i < a.rows(); ++i) {
    auto [j, d] = nearest(a.row(i), b);
    sum += d;
    if (d > 0.0) {
      Eigen::RowVector3d dir = (a.row(i) - b.row(j)) / d;
      grad_a.row(i) += w * dir;
      grad_b.row(j) -= w * dir;
    }
  }
  return sum / a.rows();
}

} // namespace

PairLoss chamfer(const Positions& a, const Positions& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ShapeError("chamfer distance of an empty point set");
  PairLoss out;
  out.grad_a = Positions::Zero(a.rows(), 3);
  out.grad_b = Positions::Zero(b.rows(), 3);
  double ab = directed_chamfer(a, b, out.grad_a, out.grad_b);
  double ba = directed_chamfer(b, a, out.grad_b, out.grad_a);
  out.value = 0.5 * (ab + ba);
  return out;
}

PointLoss vertex_loss(const Positions& pred, const Positions& target) {
  if (pred.rows() != target.rows())
    throw ShapeError("vertex loss: " + std::to_string(pred.rows()) + " vs " + std::to_string(target.rows()) +
                     " vertices");
  if (pred.rows() == 0) throw ShapeError("vertex loss of an empty mesh");
  const Positions diff = pred - target;
  PointLoss out;
  out.value = diff.cwiseAbs().sum() / pred.rows();
  out.grad = diff.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }) / pred.rows();
  return out;
}

PointLoss joint_loss(const Positions& pred, const JointRegressor& regressor, const Positions& joints_gt) {
  const Positions joints = regressor.apply(pred);
  if (joints.rows() != joints_gt.rows())
    throw ShapeError("joint loss: " + std::to_string(joints.rows()) + " regressed vs " +
                     std::to_string(joints_gt.rows()) + " target joints");
  const int k = static_cast<int>(joints.rows());
  Positions d_joints = Positions::Zero(k, 3);
  PointLoss out;
  for (int i = 0; i < k; ++i) {
    Eigen::RowVector3d diff = joints.row(i) - joints_gt.row(i);
    double d = diff.norm();
    out.value += d;
    if (d > 0.0) d_joints.row(i) = diff / (d * k);
  }
  out.value /= k;
  out.grad = regressor.weights.transpose() * d_joints;
  return out;
}

PointLoss normal_loss(const MeshGraph& pred, const MeshGraph& target) {
  if (pred.empty() || target.empty()) throw ShapeError("normal loss of an empty mesh");
  const Positions np = vertex_normals(pred);
  const Positions nt = vertex_normals(target);
  const int n = pred.vertex_count();
  Positions d_normals(n, 3);
  PointLoss out;
  for (int i = 0; i < n; ++i) {
    int j = nearest(pred.vertices().row(i), target.vertices()).first;
    // 1 - cos written as half the squared distance of unit vectors; exact zero for equal normals.
    const Eigen::RowVector3d diff = np.row(i) - nt.row(j);
    out.value += 0.5 * diff.squaredNorm();
    d_normals.row(i) = diff / n;
  }
  out.value /= n;
  out.grad = vertex_normals_backward(pred, d_normals);
  return out;
}

// ---------------------------------------------------------------------------
// Composite losses

MeshLoss loss_mesh(const MeshGraph& pred, const MeshGraph& target, const JointRegressor* regressor,
                   const Positions* joints_gt, const LossConfig& cfg) {
  MeshLoss out;
  PointLoss lv = vertex_loss(pred.vertices(), target.vertices());
  PairLoss cd = chamfer(pred.vertices(), target.vertices());
  out.report.lv = lv.value;
  out.report.lcd1 = cd.value;
  out.grad = cfg.w_vertex * lv.grad + cfg.w_chamfer_body * cd.grad_a;
  if (regressor) {
    Positions gt_joints = joints_gt ? *joints_gt : regressor->apply(target.vertices());
    PointLoss lj = joint_loss(pred.vertices(), *regressor, gt_joints);
    out.report.lj = lj.value;
    out.grad += cfg.w_joint * lj.grad;
  }
  out.report.finalize(cfg);
  return out;
}

SurfaceLoss loss_surface(const MeshGraph& pred, const MeshGraph& target, const LossConfig& cfg) {
  SurfaceLoss out;
  PairLoss cd = chamfer(pred.vertices(), target.vertices());
  PointLoss ln = normal_loss(pred, target);
  out.lcd2 = cd.value;
  out.ln = ln.value;
  out.total = cfg.w_chamfer_surface * out.lcd2 + cfg.w_normal * out.ln;
  out.grad = cfg.w_chamfer_surface * cd.grad_a + cfg.w_normal * ln.grad;
  return out;
}

TraceLoss loss_trace(const MeshGraph& pred, const MeshGraph& from_gt_body, const MeshGraph& target,
                     const LossConfig& cfg) {
  SurfaceLoss a = loss_surface(pred, target, cfg);
  SurfaceLoss b = loss_surface(from_gt_body, target, cfg);
  TraceLoss out;
  out.value = a.total - b.total;
  out.grad_pred = std::move(a.grad);
  out.grad_from_gt = -b.grad;
  if (cfg.clamp_trace && out.value < 0.0) {
    out.value = 0.0;
    out.grad_pred.setZero();
    out.grad_from_gt.setZero();
  }
  return out;
}

long clothing_area(const MeshGraph& surface, const MeshGraph& body, const CameraWP& cam) {
  const Vec3 pivot = centroid(body);
  long area = 0;
  for (double angle : kCanonicalViews) {
    BinaryMask s = rasterize_silhouette(rotate_view(surface, angle, pivot), cam);
    BinaryMask m = rasterize_silhouette(rotate_view(body, angle, pivot), cam);
    area += mask_abs_difference_area(s, m);
  }
  return area;
}

double loss_cloth(const MeshGraph& surface_pred, const MeshGraph& body_pred, const MeshGraph& surface_gt,
                  const MeshGraph& body_gt, const CameraWP& cam_pred, const CameraWP& cam_gt,
                  const LossConfig& cfg) {
  auto at_res = [&](CameraWP c) {
    c.width = c.height = cfg.silhouette_resolution;
    return c;
  };
  const CameraWP cp = at_res(cam_pred), cg = at_res(cam_gt);
  const double pixels = static_cast<double>(cfg.silhouette_resolution) * cfg.silhouette_resolution;
  const long pred = clothing_area(surface_pred, body_pred, cp);
  const long gt = clothing_area(surface_gt, body_gt, cg);
  return std::abs(static_cast<double>(pred - gt)) / pixels;
}

double loss_collab(double trace, double cloth, const LossConfig& cfg) {
  return cfg.lambda_trace * trace + cfg.lambda_cloth * cloth;
}

} // namespace munet
