#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "munet/error.hpp"
#include "munet/gradsuite.hpp"
#include "munet/image_io.hpp"
#include "munet/metrics.hpp"
#include "munet/pipeline.hpp"

namespace munet::cli {

namespace fs = std::filesystem;

namespace {

// Maps library errors onto exit codes.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return kIo;
  } catch (const StructuralError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const DegenerateGeometryError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  }
}

struct CameraFlags {
  double scale = 1.0, tx = 0.0, ty = 0.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--scale", scale, "Weak-perspective scale")->capture_default_str();
    cmd->add_option("--tx", tx, "Horizontal shift in normalized image units")->capture_default_str();
    cmd->add_option("--ty", ty, "Vertical shift in normalized image units")->capture_default_str();
  }
  CameraWP camera(int res) const {
    CameraWP c;
    c.scale = scale;
    c.tx = tx;
    c.ty = ty;
    c.width = c.height = res;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::string mesh;
  bool json = false;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out) {
  const MeshGraph mesh = read_obj_file(a.mesh);
  const ValidationReport report = validate_manifold(mesh);
  if (a.json) {
    out << report.to_json() << "\n";
  } else {
    out << a.mesh << ": V=" << mesh.vertex_count() << " E=" << mesh.edge_count() << " F=" << mesh.face_count()
        << "\n";
    for (const auto& v : report.violations) {
      out << "  " << to_string(v.kind);
      for (int i : v.indices) out << " " << i;
      out << "\n";
    }
    out << (report.pass() ? "manifold: pass" : "manifold: FAIL (" + std::to_string(report.violations.size()) +
                                                   " violations)")
        << "\n";
  }
  return report.pass() ? kOk : kValidationFailure;
}

// ---------------------------------------------------------------------------

struct MetricsArgs {
  std::vector<std::string> meshes;
  std::string joints, regressor, json;
  int samples = 10000;
  int res = 512;
  std::uint64_t seed = 0;
  double mm_per_unit = 1.0, cm_per_unit = 1.0;
  CameraFlags cam;
};

Positions points_from_json(const nlohmann::json& j, const char* key) {
  const auto& arr = j.at(key);
  Positions p(static_cast<long>(arr.size()), 3);
  for (size_t i = 0; i < arr.size(); ++i)
    for (int c = 0; c < 3; ++c) p(static_cast<long>(i), c) = arr.at(i).at(c).get<double>();
  return p;
}

JointPair read_joints(const std::string& path) {
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    return {points_from_json(j, "pred"), points_from_json(j, "gt")};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

int cmd_metrics(const MetricsArgs& a, std::ostream& out) {
  if (a.meshes.size() % 2 != 0) throw ConfigError("meshes", "expected recon/gt path pairs");
  MetricConfig cfg;
  cfg.n_samples = a.samples;
  cfg.seed = a.seed;
  cfg.resolution = a.res;
  cfg.camera = a.cam.camera(a.res);
  cfg.mm_per_unit = a.mm_per_unit;
  cfg.cm_per_unit = a.cm_per_unit;
  std::optional<JointRegressor> reg;
  if (!a.regressor.empty()) reg = JointRegressor::from_json(read_file(a.regressor));
  std::optional<JointPair> joints;
  if (!a.joints.empty()) joints = read_joints(a.joints);

  std::vector<MetricReport> reports;
  for (size_t i = 0; i < a.meshes.size(); i += 2) {
    const MeshGraph recon = read_obj_file(a.meshes[i]);
    const MeshGraph gt = read_obj_file(a.meshes[i + 1]);
    reports.push_back(evaluate_pair(recon, gt, reg ? &*reg : nullptr, cfg, joints ? &*joints : nullptr));
  }
  if (reports.size() == 1) {
    out << reports[0].to_table();
  } else {
    out << MetricReport::csv_header() << "\n";
    for (size_t i = 0; i < reports.size(); ++i) out << reports[i].csv_row(a.meshes[2 * i]) << "\n";
  }
  if (!a.json.empty()) {
    std::string doc;
    if (reports.size() == 1) {
      doc = reports[0].to_json();
    } else {
      nlohmann::json j;
      j["schema_version"] = MetricReport::kSchemaVersion;
      j["pairs"] = nlohmann::json::array();
      for (size_t i = 0; i < reports.size(); ++i)
        j["pairs"].push_back({{"recon", a.meshes[2 * i]},
                              {"gt", a.meshes[2 * i + 1]},
                              {"report", nlohmann::json::parse(reports[i].to_json())}});
      doc = j.dump(2);
    }
    write_file(a.json, doc + "\n");
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string mesh, mode = "silhouette", angle = "0", out;
  int res = 256;
  CameraFlags cam;
};

std::string angle_path(const std::string& out, double angle) {
  fs::path p(out);
  char tag[16];
  std::snprintf(tag, sizeof tag, "_%03d", static_cast<int>(angle));
  return (p.parent_path() / (p.stem().string() + tag + p.extension().string())).string();
}

int cmd_render(const RenderArgs& a, std::ostream& out) {
  const MeshGraph mesh = read_obj_file(a.mesh);
  const CameraWP cam = a.cam.camera(a.res);
  std::vector<double> angles;
  if (a.angle == "all") {
    angles.assign(kCanonicalViews.begin(), kCanonicalViews.end());
  } else {
    try {
      size_t used = 0;
      angles.push_back(std::stod(a.angle, &used));
      if (used != a.angle.size()) throw std::invalid_argument(a.angle);
    } catch (const std::logic_error&) {
      throw ConfigError("--angle", "expected a number of degrees or 'all'");
    }
  }
  for (double angle : angles) {
    const std::string path = angles.size() > 1 ? angle_path(a.out, angle) : a.out;
    if (a.mode == "silhouette") {
      BinaryMask m = rasterize_silhouette(rotate_view(mesh, angle), cam);
      write_file(path, encode_pgm(m));
      out << path << ": " << m.count() << " foreground pixels\n";
    } else {
      NormalMap n = rasterize_normal_map(mesh, angle, cam);
      write_file(path, encode_pfm(normal_map_image(n)));
      const fs::path p(path);
      const std::string mask_path = (p.parent_path() / (p.stem().string() + "_mask.pgm")).string();
      write_file(mask_path, encode_pgm(n.foreground()));
      out << path << ": " << n.foreground().count() << " foreground pixels (mask " << mask_path << ")\n";
    }
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  GradSuiteOptions opt;
  opt.seed = a.seed;
  opt.tolerance = a.tolerance;
  opt.inject_fault = a.inject_fault;
  bool ok = true;
  char buf[160];
  for (const auto& e : run_gradient_suite(opt)) {
    const bool pass = e.report.pass();
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "%-4s %-18s worst rel err %.3e\n", pass ? "ok" : "FAIL", e.name.c_str(),
                  e.report.worst());
    out << buf;
    if (!pass)
      for (const auto& b : e.report.blocks)
        if (b.max_rel_error > e.report.tolerance) {
          std::snprintf(buf, sizeof buf, "       %s: rel %.3e abs %.3e over %d entries\n", b.name.c_str(),
                        b.max_rel_error, b.max_abs_error, b.checked);
          out << buf;
        }
  }
  out << (ok ? "gradient suite: pass" : "gradient suite: FAIL") << " (tolerance " << a.tolerance << ")\n";
  return ok ? kOk : kNumerical;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out_dir;
};

int cmd_train_toy(const TrainArgs& a, std::ostream& out) {
  const ToyConfig cfg = a.config.empty() ? ToyConfig{} : ToyConfig::from_json(read_file(a.config));
  cfg.validate();
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create " + a.out_dir + ": " + ec.message());

  ToyResult r = train_toy(cfg);
  const fs::path dir(a.out_dir);
  write_file((dir / "history.csv").string(), r.history.to_csv());
  write_file((dir / "checkpoint.munet").string(), save_checkpoint(r.net));
  write_file((dir / "manifest.json").string(), checkpoint_manifest(r.net) + "\n");
  write_file((dir / "config.json").string(), cfg.to_json() + "\n");
  const ForwardResult f = forward(r.net, r.data.heldout);
  write_obj_file(f.body, (dir / "heldout_body.obj").string());
  write_obj_file(f.surface, (dir / "heldout_surface.obj").string());

  const HistoryRow& first = r.history.rows.front();
  const HistoryRow& last = r.history.rows.back();
  char buf[200];
  std::snprintf(buf, sizeof buf, "steps %d: total %.6g -> %.6g, held-out MVPE %.6g -> %.6g, Chamfer %.6g -> %.6g\n",
                last.step, first.losses.total, last.losses.total, first.heldout_mvpe.value_or(0.0),
                last.heldout_mvpe.value_or(0.0), first.heldout_cd.value_or(0.0), last.heldout_cd.value_or(0.0));
  out << buf << "wrote " << a.out_dir << "\n";
  return kOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mesh recovery and clothed reconstruction toolkit", "munet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "munet 0.1.0");

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Check that an OBJ mesh is a closed, consistently wound 2-manifold");
  validate->add_option("mesh", va.mesh, "OBJ file")->required();
  validate->add_flag("--json", va.json, "Print the report as JSON");

  MetricsArgs ma;
  auto* metrics = app.add_subcommand("metrics", "Evaluate reconstruction/ground-truth OBJ pairs");
  metrics->add_option("meshes", ma.meshes, "recon.obj gt.obj [recon2.obj gt2.obj ...]")->required();
  metrics->add_option("--joints", ma.joints, "JSON file with \"pred\" and \"gt\" joint arrays");
  metrics->add_option("--regressor", ma.regressor, "JSON joint regressor applied to both meshes");
  metrics->add_option("--samples", ma.samples, "Surface samples per mesh")->capture_default_str()->check(CLI::PositiveNumber);
  metrics->add_option("--res", ma.res, "Normal-map resolution")->capture_default_str()->check(CLI::Range(8, 8192));
  metrics->add_option("--seed", ma.seed, "Surface sampling seed")->capture_default_str();
  metrics->add_option("--mm-per-unit", ma.mm_per_unit, "Joint/vertex metric multiplier")->capture_default_str();
  metrics->add_option("--cm-per-unit", ma.cm_per_unit, "Surface metric multiplier")->capture_default_str();
  metrics->add_option("--json", ma.json, "Also write the report as JSON to this path");
  ma.cam.add(metrics);

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "Render a silhouette (PGM) or normal map (PFM)");
  render->add_option("mesh", ra.mesh, "OBJ file")->required();
  render->add_option("--mode", ra.mode, "silhouette or normals")
      ->capture_default_str()
      ->check(CLI::IsMember({"silhouette", "normals"}));
  render->add_option("--angle", ra.angle, "Yaw in degrees, or 'all' for the four canonical views")
      ->capture_default_str();
  render->add_option("--res", ra.res, "Output width and height")->capture_default_str()->check(CLI::Range(8, 8192));
  render->add_option("--out", ra.out, "Output path; with --angle all, _000/_090/_180/_270 is appended. Normal maps also get a _mask.pgm sidecar")->required();
  ra.cam.add(render);

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
  gradcheck->add_option("--seed", ga.seed, "Instance seed")->capture_default_str();
  gradcheck->add_option("--tolerance", ga.tolerance, "Maximum relative error")->capture_default_str();
  gradcheck->add_flag("--inject-fault", ga.inject_fault, "Double one analytic gradient to exercise the detector (exits 4)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "Train on a synthetic dataset; writes checkpoint, CSV and OBJs");
  train->add_option("--config", ta.config, "JSON config with sections network, losses, training, data; omitted keys keep their defaults");
  train->add_option("--out-dir", ta.out_dir, "Output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  return guarded(err, [&] {
    if (*validate) return cmd_validate(va, out);
    if (*metrics) return cmd_metrics(ma, out);
    if (*render) return cmd_render(ra, out);
    if (*gradcheck) return cmd_gradcheck(ga, out);
    return cmd_train_toy(ta, out);
  });
}

} // namespace munet::cli
