#include "munet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include <Eigen/SVD>

#include "json.hpp"

#include "munet/error.hpp"

namespace munet {

Positions SimilarityTransform::apply(const Positions& points) const {
  Positions out = (scale * (points * rotation.transpose()));
  out.rowwise() += translation.transpose();
  return out;
}

namespace {

void require_same_count(const Positions& a, const Positions& b, const char* what) {
  if (a.rows() != b.rows())
    throw ShapeError(std::string(what) + ": " + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()) +
                     " points");
  if (a.rows() == 0) throw ShapeError(std::string(what) + " of an empty set");
}

} // namespace

double mpjpe(const Positions& pred, const Positions& gt) {
  require_same_count(pred, gt, "mpjpe");
  return (pred - gt).rowwise().norm().mean();
}

double mvpe(const Positions& pred, const Positions& gt) {
  require_same_count(pred, gt, "mvpe");
  return (pred - gt).rowwise().norm().mean();
}

SimilarityTransform procrustes_align(const Positions& source, const Positions& target) {
  require_same_count(source, target, "procrustes");
  if (source.rows() < 3) throw DegenerateGeometryError("procrustes alignment needs at least 3 points");

  const Eigen::RowVector3d mu_s = source.colwise().mean();
  const Eigen::RowVector3d mu_t = target.colwise().mean();
  const Positions xs = source.rowwise() - mu_s;
  const Positions xt = target.rowwise() - mu_t;

  Eigen::JacobiSVD<Eigen::MatrixXd> rank_check(xs);
  const auto sv = rank_check.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
    throw DegenerateGeometryError("procrustes alignment source points are collinear (rank-deficient)");

  const double n = static_cast<double>(source.rows());
  const Eigen::Matrix3d cov = xt.transpose() * xs / n;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;

  SimilarityTransform t;
  t.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  const double var_s = xs.squaredNorm() / n;
  t.scale = (svd.singularValues().asDiagonal() * d).trace() / var_s;
  t.translation = (mu_t.transpose() - t.scale * t.rotation * mu_s.transpose());
  return t;
}

double pa_mpjpe(const Positions& pred, const Positions& gt) {
  return mpjpe(procrustes_align(pred, gt).apply(pred), gt);
}

// ---------------------------------------------------------------------------
// Surface distances

Positions sample_surface(const MeshGraph& mesh, int n_samples, std::uint64_t seed) {
  if (mesh.empty()) throw StructuralError("cannot sample an empty mesh");
  if (n_samples <= 0) throw ShapeError("sample count must be positive");
  const Positions& v = mesh.vertices();
  // Canonical face order (smallest index first, winding kept, then sorted) so the
  // samples do not depend on how the faces happen to be listed.
  std::vector<Face> faces = mesh.faces();
  for (Face& f : faces)
    std::rotate(f.begin(), std::min_element(f.begin(), f.end()), f.end());
  std::sort(faces.begin(), faces.end());
  std::vector<double> cumulative;
  cumulative.reserve(faces.size());
  double total = 0.0;
  for (const Face& f : faces) {
    Vec3 a = v.row(f[0]), b = v.row(f[1]), c = v.row(f[2]);
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw DegenerateGeometryError("mesh has zero surface area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Positions out(n_samples, 3);
  for (int i = 0; i < n_samples; ++i) {
    double r = uni(rng) * total;
    size_t fi = std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin();
    fi = std::min(fi, cumulative.size() - 1);
    const Face& f = faces[fi];
    double s = std::sqrt(uni(rng)), t = uni(rng);
    Vec3 a = v.row(f[0]), b = v.row(f[1]), c = v.row(f[2]);
    out.row(i) = ((1.0 - s) * a + s * (1.0 - t) * b + s * t * c).transpose();
  }
  return out;
}

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Closest point by Voronoi-region classification.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return ap.norm();

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return bp.norm();

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double w = d1 / (d1 - d3);
    return (p - (a + w * ab)).norm();
  }

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return cp.norm();

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return (p - (a + w * ac)).norm();
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return (p - (b + w * (c - b))).norm();
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return (p - (a + ab * v + ac * w)).norm();
}

double mean_point_to_surface(const Positions& points, const MeshGraph& mesh) {
  if (mesh.empty()) throw StructuralError("distance to an empty mesh");
  const Positions& v = mesh.vertices();
  const size_t nf = mesh.faces().size();
  // Bounding sphere per face for pruning.
  std::vector<Vec3> center(nf);
  std::vector<double> radius(nf);
  for (size_t fi = 0; fi < nf; ++fi) {
    const Face& f = mesh.faces()[fi];
    Vec3 a = v.row(f[0]), b = v.row(f[1]), c = v.row(f[2]);
    center[fi] = (a + b + c) / 3.0;
    radius[fi] = std::max({(a - center[fi]).norm(), (b - center[fi]).norm(), (c - center[fi]).norm()});
  }

  double sum = 0.0;
  size_t hint = 0;
  for (int i = 0; i < points.rows(); ++i) {
    const Vec3 p = points.row(i).transpose();
    auto exact = [&](size_t fi) {
      const Face& f = mesh.faces()[fi];
      return point_triangle_distance(p, v.row(f[0]), v.row(f[1]), v.row(f[2]));
    };
    double best = exact(hint);
    size_t best_face = hint;
    for (size_t fi = 0; fi < nf; ++fi) {
      if ((p - center[fi]).norm() - radius[fi] >= best) continue;
      double d = exact(fi);
      if (d < best) {
        best = d;
        best_face = fi;
      }
    }
    hint = best_face;
    sum += best;
  }
  return sum / points.rows();
}

SurfaceDistances surface_distances(const MeshGraph& recon, const MeshGraph& gt, int n_samples,
                                   std::uint64_t seed) {
  if (recon.empty() || gt.empty()) throw StructuralError("surface distances of an empty mesh");
  SurfaceDistances out;
  out.point_to_surface = mean_point_to_surface(sample_surface(gt, n_samples, seed), recon);
  out.surface_to_point = mean_point_to_surface(sample_surface(recon, n_samples, seed), gt);
  out.chamfer = 0.5 * (out.point_to_surface + out.surface_to_point);
  return out;
}

// ---------------------------------------------------------------------------
// Normal maps

NormalMapMetrics normal_map_view_metrics(const NormalMap& recon, const NormalMap& gt) {
  if (recon.width != gt.width || recon.height != gt.height) throw ShapeError("normal map resolution mismatch");
  double cos_sum = 0.0, l2_sum = 0.0;
  long count = 0;
  for (size_t i = 0; i < recon.normals.size(); ++i) {
    if (!recon.mask[i] && !gt.mask[i]) continue;
    const Vec3 diff = recon.normals[i] - gt.normals[i];
    // Where both maps are foreground the normals are unit and 1 - cos = |diff|^2 / 2.
    cos_sum += recon.mask[i] && gt.mask[i] ? 0.5 * diff.squaredNorm() : 1.0 - recon.normals[i].dot(gt.normals[i]);
    l2_sum += diff.norm();
    ++count;
  }
  NormalMapMetrics m;
  if (count > 0) {
    m.cosine = cos_sum / count;
    m.l2 = l2_sum / count;
  }
  m.cosine_per_view = {m.cosine};
  m.l2_per_view = {m.l2};
  return m;
}

NormalMapMetrics normal_map_metrics(const MeshGraph& recon, const MeshGraph& gt, const CameraWP& cam,
                                    int resolution, bool face_camera) {
  CameraWP c = cam;
  c.width = c.height = resolution;
  const Vec3 pivot = centroid(gt);
  NormalMapMetrics out;
  for (double angle : kCanonicalViews) {
    NormalMap a = rasterize_normal_map(recon, angle, c, face_camera, pivot);
    NormalMap b = rasterize_normal_map(gt, angle, c, face_camera, pivot);
    NormalMapMetrics view = normal_map_view_metrics(a, b);
    out.cosine_per_view.push_back(view.cosine);
    out.l2_per_view.push_back(view.l2);
    out.cosine += view.cosine / kCanonicalViews.size();
    out.l2 += view.l2 / kCanonicalViews.size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

MetricReport evaluate_pair(const MeshGraph& recon, const MeshGraph& gt, const JointRegressor* regressor,
                           const MetricConfig& cfg, const JointPair* joints) {
  MetricReport r;
  r.config = cfg;

  if (joints) {
    r.mpjpe = mpjpe(joints->pred, joints->gt) * cfg.mm_per_unit;
    r.pa_mpjpe = pa_mpjpe(joints->pred, joints->gt) * cfg.mm_per_unit;
  } else if (regressor) {
    Positions jp = regressor->apply(recon.vertices());
    Positions jg = regressor->apply(gt.vertices());
    r.mpjpe = mpjpe(jp, jg) * cfg.mm_per_unit;
    r.pa_mpjpe = pa_mpjpe(jp, jg) * cfg.mm_per_unit;
  } else {
    r.joint_metrics_omitted = true;
  }

  if (recon.vertex_count() == gt.vertex_count())
    r.mvpe = mvpe(recon.vertices(), gt.vertices()) * cfg.mm_per_unit;
  else
    r.vertex_metric_omitted = true;

  SurfaceDistances sd = surface_distances(recon, gt, cfg.n_samples, cfg.seed);
  r.chamfer = sd.chamfer * cfg.cm_per_unit;
  r.p2s = sd.point_to_surface * cfg.cm_per_unit;
  r.s2p = sd.surface_to_point * cfg.cm_per_unit;

  NormalMapMetrics nm = normal_map_metrics(recon, gt, cfg.camera, cfg.resolution, cfg.face_camera);
  r.normal_cos = nm.cosine;
  r.normal_l2 = nm.l2;
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::json m;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  m["mpjpe"] = opt(mpjpe);
  m["pa_mpjpe"] = opt(pa_mpjpe);
  m["mvpe"] = opt(mvpe);
  m["chamfer"] = chamfer;
  m["p2s"] = p2s;
  m["s2p"] = s2p;
  m["normal_cos"] = normal_cos;
  m["normal_l2"] = normal_l2;
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["metrics"] = m;
  j["flags"] = {{"joint_metrics_omitted", joint_metrics_omitted},
                {"vertex_metric_omitted", vertex_metric_omitted}};
  j["config"] = {{"n_samples", config.n_samples},
                 {"seed", config.seed},
                 {"resolution", config.resolution},
                 {"camera", {{"scale", config.camera.scale}, {"tx", config.camera.tx}, {"ty", config.camera.ty}}},
                 {"face_camera", config.face_camera},
                 {"mm_per_unit", config.mm_per_unit},
                 {"cm_per_unit", config.cm_per_unit}};
  return j.dump(2);
}

std::string MetricReport::to_table() const {
  std::string out;
  char buf[96];
  auto line = [&](const char* name, const char* unit, std::optional<double> v) {
    if (v)
      std::snprintf(buf, sizeof buf, "%-12s %-6s %14.6f\n", name, unit, *v);
    else
      std::snprintf(buf, sizeof buf, "%-12s %-6s %14s\n", name, unit, "n/a");
    out += buf;
  };
  std::snprintf(buf, sizeof buf, "%-12s %-6s %14s\n", "metric", "unit", "value");
  out += buf;
  line("MPJPE", "mm", mpjpe);
  line("PA-MPJPE", "mm", pa_mpjpe);
  line("MVPE", "mm", mvpe);
  line("Chamfer", "cm", chamfer);
  line("P2S", "cm", p2s);
  line("S2P", "cm", s2p);
  line("Normal-cos", "-", normal_cos);
  line("Normal-L2", "-", normal_l2);
  return out;
}

std::string MetricReport::csv_header() { return "label,mpjpe,pa_mpjpe,mvpe,chamfer,p2s,s2p,normal_cos,normal_l2"; }

std::string MetricReport::csv_row(const std::string& label) const {
  auto f = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return std::string(buf);
  };
  return label + "," + f(mpjpe) + "," + f(pa_mpjpe) + "," + f(mvpe) + "," + f(chamfer) + "," + f(p2s) + "," +
         f(s2p) + "," + f(normal_cos) + "," + f(normal_l2);
}

} // namespace munet
