#include "munet/gradsuite.hpp"

#include <random>

#include "munet/encode.hpp"
#include "munet/error.hpp"
#include "munet/losses.hpp"
#include "munet/pipeline.hpp"

namespace munet {

using nn::Activation;
using nn::GradBlock;
using nn::Matrix;

namespace {

struct Suite {
  GradSuiteOptions opt;
  std::mt19937_64 rng;
  std::vector<GradSuiteEntry> entries;

  explicit Suite(const GradSuiteOptions& o) : opt(o), rng(o.seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) {
    return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }
  Matrix random(long rows, long cols, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (long j = 0; j < cols; ++j)
      for (long i = 0; i < rows; ++i) m(i, j) = uniform(lo, hi);
    return m;
  }
  // Instances are redrawn until every activation input and every |.| argument
  // sits at least this far from its kink, so central differences never straddle one.
  static constexpr double kKinkMargin = 2e-4;
  int attempts = 0;
  bool clear(std::initializer_list<const Matrix*> pre) {
    bool ok = true;
    // Exact zeros come from identical inputs (flat background) that move together.
    for (const Matrix* m : pre)
      for (double v : m->reshaped())
        if (v != 0.0 && std::abs(v) < kKinkMargin) ok = false;
    if (!ok && ++attempts > 200) throw NumericalError("no kink-free instance found");
    return ok;
  }

  Positions jitter(const Positions& p, double amount) {
    Positions out = p;
    for (long i = 0; i < out.rows(); ++i)
      for (int c = 0; c < 3; ++c) out(i, c) += uniform(-amount, amount);
    return out;
  }

  // The first block's analytic gradient is doubled under inject_fault.
  void run(const std::string& name, const std::function<double()>& closure, std::vector<GradBlock> blocks,
           int max_entries = 0, std::function<bool(size_t, size_t)> accept = {}) {
    std::vector<double> doubled;
    if (opt.inject_fault && entries.empty() && !blocks.empty()) {
      doubled.assign(blocks[0].analytic.begin(), blocks[0].analytic.end());
      for (double& v : doubled) v *= 2.0;
      blocks[0].analytic = doubled;
    }
    nn::GradCheckOptions go;
    go.step = opt.step;
    go.tolerance = opt.tolerance;
    go.max_entries = max_entries;
    go.seed = opt.seed;
    go.accept = std::move(accept);
    entries.push_back({name, nn::grad_check(closure, blocks, go)});
    attempts = 0;
  }
};

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<size_t>(m.size())}; }
std::span<const double> cspan(const Matrix& m) { return {m.data(), static_cast<size_t>(m.size())}; }
std::span<double> span_of(Positions& m) { return {m.data(), static_cast<size_t>(m.size())}; }
std::span<const double> cspan(const Positions& m) { return {m.data(), static_cast<size_t>(m.size())}; }

double dot(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

void check_dense(Suite& s) {
  Matrix h, w, b, r;
  nn::DenseTape tape;
  do {
    h = s.random(6, 4), w = s.random(4, 5), b = s.random(1, 5), r = s.random(6, 5);
    nn::dense_forward(h, w, b, Activation::LeakyRelu, &tape);
  } while (!s.clear({&tape.pre}));
  nn::DenseGrads g = nn::dense_backward(tape, w, r);
  s.run("dense", [&] { return dot(nn::dense_forward(h, w, b, Activation::LeakyRelu), r); },
        {{"weight", span_of(w), cspan(g.d_weight)},
         {"input", span_of(h), cspan(g.d_input)},
         {"bias", span_of(b), cspan(g.d_bias)}});
}

void check_graph_conv(Suite& s) {
  const MeshGraph mesh = make_icosphere(0);
  const nn::SparseRowMatrix a = build_vertex_adjacency(mesh);
  Matrix h, w, r;
  nn::GraphConvTape tape;
  do {
    h = s.random(mesh.vertex_count(), 4), w = s.random(4, 3), r = s.random(mesh.vertex_count(), 3);
    nn::graph_conv_forward(h, a, w, Activation::LeakyRelu, &tape);
  } while (!s.clear({&tape.pre}));
  nn::GraphConvGrads g = nn::graph_conv_backward(tape, w, r);
  s.run("graph_conv", [&] { return dot(nn::graph_conv_forward(h, a, w, Activation::LeakyRelu), r); },
        {{"weight", span_of(w), cspan(g.d_weight)}, {"input", span_of(h), cspan(g.d_input)}});
}

void check_mesh_conv(Suite& s, nn::MeshConvMode mode, const std::string& name) {
  const MeshGraph mesh = make_icosphere(0);
  const EdgeAdjacency adj = build_edge_adjacency(mesh);
  Matrix x, r;
  nn::MeshConvKernel k;
  nn::MeshConvTape tape;
  do {
    x = s.random(mesh.edge_count(), 3), r = s.random(mesh.edge_count(), 2);
    for (auto& slot : k) slot = s.random(3, 2);
    nn::mesh_conv_forward(x, adj, k, Activation::LeakyRelu, mode, &tape);
  } while (!s.clear({&tape.pre, &tape.diff13, &tape.diff24}));
  nn::MeshConvGrads g = nn::mesh_conv_backward(tape, k, r);
  std::vector<GradBlock> blocks = {{"input", span_of(x), cspan(g.d_input)}};
  for (int i = 0; i < 5; ++i) blocks.push_back({"k" + std::to_string(i), span_of(k[i]), cspan(g.d_kernel[i])});
  s.run(name, [&] { return dot(nn::mesh_conv_forward(x, adj, k, Activation::LeakyRelu, mode), r); }, blocks);
}

void check_edge_to_vertex(Suite& s) {
  const MeshGraph mesh = make_icosphere(0);
  const nn::SparseRowMatrix pool = nn::build_edge_to_vertex(mesh);
  Matrix x = s.random(mesh.edge_count(), 3), r = s.random(mesh.vertex_count(), 3);
  const Matrix g = nn::edge_to_vertex_backward(r, pool);
  s.run("edge_to_vertex", [&] { return dot(nn::edge_to_vertex(x, pool), r); }, {{"input", span_of(x), cspan(g)}});
}

void check_conv2d(Suite& s) {
  const int out_px = nn::conv2d_output_size(7, 2) * nn::conv2d_output_size(6, 2);
  nn::Grid in{7, 6, {}};
  Matrix w, b, r;
  nn::Conv2dTape tape;
  do {
    in.data = s.random(42, 3), w = s.random(27, 4), b = s.random(1, 4), r = s.random(out_px, 4);
    nn::conv2d_forward(in, w, b, 2, Activation::LeakyRelu, &tape);
  } while (!s.clear({&tape.pre}));
  nn::Conv2dGrads g = nn::conv2d_backward(tape, w, r);
  s.run("conv2d", [&] { return dot(nn::conv2d_forward(in, w, b, 2, Activation::LeakyRelu).data, r); },
        {{"weight", span_of(w), cspan(g.d_weight)},
         {"input", span_of(in.data), cspan(g.d_input.data)},
         {"bias", span_of(b), cspan(g.d_bias)}});
}

ImageStack random_stack(Suite& s, int size, const std::vector<std::string>& channels) {
  ImageStack st;
  st.width = st.height = size;
  st.channels = channels;
  st.data = s.random(static_cast<long>(size) * size, static_cast<long>(channels.size()));
  return st;
}

void randomize_biases(Suite& s, EncoderParams& p) {
  for (auto& b : p.bias) b = s.random(1, b.cols(), -0.1, 0.1);
}

void check_encode_global(Suite& s) {
  std::mt19937_64 init(s.opt.seed);
  EncoderParams p;
  ImageStack st;
  RowVector r;
  EncoderTape tape;
  do {
    p = init_global_encoder(5, init);
    randomize_biases(s, p);
    st = random_stack(s, 16, kGlobalChannels);
    r = s.random(1, 5);
    encode_global(st, p, &tape);
  } while (!s.clear({&tape.conv[0].pre, &tape.conv[1].pre, &tape.conv[2].pre}));
  EncoderGrads g = encode_global_backward(tape, p, r);
  s.run("encode_global", [&] { return encode_global(st, p).dot(r); },
        {{"conv0.weight", span_of(p.weight[0]), cspan(g.d_weight[0])},
         {"conv1.weight", span_of(p.weight[1]), cspan(g.d_weight[1])},
         {"conv2.weight", span_of(p.weight[2]), cspan(g.d_weight[2])},
         {"conv2.bias", span_of(p.bias[2]), cspan(g.d_bias[2])},
         {"input", span_of(st.data), cspan(g.d_input)}},
        40);
}

void check_encode_local(Suite& s) {
  std::mt19937_64 init(s.opt.seed + 1);
  EncoderParams p;
  ImageStack st;
  EncoderTape tape;
  FeatureMap f;
  do {
    p = init_local_encoder(4, init);
    randomize_biases(s, p);
    st = random_stack(s, 16, kLocalChannels);
    f = encode_local(st, p, &tape);
  } while (!s.clear({&tape.conv[0].pre, &tape.conv[1].pre, &tape.conv[2].pre}));
  Matrix r = s.random(f.data.rows(), f.data.cols());
  EncoderGrads g = encode_local_backward(tape, p, r);
  s.run("encode_local", [&] { return dot(encode_local(st, p).data, r); },
        {{"conv0.weight", span_of(p.weight[0]), cspan(g.d_weight[0])},
         {"conv1.weight", span_of(p.weight[1]), cspan(g.d_weight[1])},
         {"conv2.weight", span_of(p.weight[2]), cspan(g.d_weight[2])},
         {"conv0.bias", span_of(p.bias[0]), cspan(g.d_bias[0])},
         {"input", span_of(st.data), cspan(g.d_input)}},
        40);
}

CameraWP camera_from(const Eigen::Vector3d& c, int res) {
  CameraWP cam;
  cam.scale = c[0];
  cam.tx = c[1];
  cam.ty = c[2];
  cam.width = cam.height = res;
  return cam;
}

void check_projection(Suite& s) {
  Matrix point = s.random(3, 1);
  Matrix cam = Matrix(3, 1);
  cam << s.uniform(0.5, 1.5), s.uniform(-0.3, 0.3), s.uniform(-0.3, 0.3);
  const Eigen::Vector2d r(s.uniform(), s.uniform());
  const Projection p = project_weak_perspective_with_jacobian(Vec3(point.col(0)), camera_from(cam.col(0), 64));
  Matrix dp = (r.transpose() * p.d_point).transpose();
  Matrix dc = (r.transpose() * p.d_camera).transpose();
  s.run("projection",
        [&] { return r.dot(project_weak_perspective(Vec3(point.col(0)), camera_from(cam.col(0), 64))); },
        {{"point", span_of(point), cspan(dp)}, {"camera", span_of(cam), cspan(dc)}});
}

void check_vertex_features(Suite& s) {
  const MeshGraph base = make_icosphere(1);
  Positions v = s.jitter(0.8 * base.vertices(), 0.05);
  FeatureMap map;
  map.width = map.height = 8;
  map.downsample = 4;
  map.data = s.random(64, 4);
  Matrix cam(3, 1);
  cam << s.uniform(0.7, 0.9), s.uniform(-0.05, 0.05), s.uniform(-0.05, 0.05);
  const NeighborhoodPattern pattern{3, 1.0};
  Matrix r = s.random(v.rows(), map.depth() + 6);
  const MeshGraph mesh = base.with_vertices(v);
  const VertexFeatureGrads g =
      assemble_vertex_features_backward(mesh, map, camera_from(cam.col(0), 32), pattern, r);
  Matrix d_cam = g.d_camera;
  s.run("vertex_features",
        [&] {
          return dot(assemble_vertex_features(base.with_vertices(v), map, camera_from(cam.col(0), 32), pattern).psi, r);
        },
        {{"vertices", span_of(v), cspan(g.d_vertices)},
         {"camera", span_of(cam), cspan(d_cam)},
         {"features", span_of(map.data), cspan(g.d_features)}});
}

void check_edge_features(Suite& s) {
  const MeshGraph mesh = make_icosphere(0);
  Matrix vf = s.random(mesh.vertex_count(), 4), r = s.random(mesh.edge_count(), 8);
  const Matrix g = assemble_edge_features_backward(r, mesh.edges(), mesh.vertex_count());
  s.run("edge_features", [&] { return dot(assemble_edge_features(vf, mesh.edges()), r); },
        {{"vertex_features", span_of(vf), cspan(g)}});
}

void check_vertex_normals(Suite& s) {
  const MeshGraph base = make_icosphere(1);
  Positions v = s.jitter(base.vertices(), 0.1);
  Positions r = s.jitter(Positions::Zero(v.rows(), 3), 1.0);
  const Positions g = vertex_normals_backward(base.with_vertices(v), r);
  s.run("vertex_normals", [&] { return vertex_normals(base.with_vertices(v)).cwiseProduct(r).sum(); },
        {{"vertices", span_of(v), cspan(g)}});
}

void check_point_losses(Suite& s) {
  Positions a = s.jitter(Positions::Zero(16, 3), 1.0), b = s.jitter(Positions::Zero(12, 3), 1.0);
  const PairLoss cd = chamfer(a, b);
  s.run("chamfer", [&] { return chamfer(a, b).value; },
        {{"a", span_of(a), cspan(cd.grad_a)}, {"b", span_of(b), cspan(cd.grad_b)}});

  Positions p = s.jitter(Positions::Zero(10, 3), 1.0);
  const Positions t = s.jitter(Positions::Zero(10, 3), 1.0);
  const PointLoss lv = vertex_loss(p, t);
  s.run("vertex_loss", [&] { return vertex_loss(p, t).value; }, {{"pred", span_of(p), cspan(lv.grad)}});

  const MeshGraph sphere = make_icosphere(1);
  const JointRegressor reg = synthetic_joint_regressor(sphere);
  Positions v = s.jitter(sphere.vertices(), 0.1);
  const Positions joints = s.jitter(reg.apply(sphere.vertices()), 0.2);
  const PointLoss lj = joint_loss(v, reg, joints);
  s.run("joint_loss", [&] { return joint_loss(v, reg, joints).value; }, {{"pred", span_of(v), cspan(lj.grad)}});

  Positions q = s.jitter(sphere.vertices(), 0.05);
  const MeshGraph target = sphere.with_vertices(s.jitter(1.1 * sphere.vertices(), 0.05));
  const PointLoss ln = normal_loss(sphere.with_vertices(q), target);
  s.run("normal_loss", [&] { return normal_loss(sphere.with_vertices(q), target).value; },
        {{"pred", span_of(q), cspan(ln.grad)}});
}

void check_composite_losses(Suite& s) {
  const MeshGraph sphere = make_icosphere(1);
  const JointRegressor reg = synthetic_joint_regressor(sphere);
  LossConfig cfg;
  cfg.w_vertex = s.uniform(0.5, 1.5);
  cfg.w_joint = s.uniform(0.5, 1.5);
  cfg.w_chamfer_body = s.uniform(0.5, 1.5);
  cfg.w_chamfer_surface = s.uniform(0.5, 1.5);
  cfg.w_normal = s.uniform(0.5, 1.5);
  const MeshGraph target = sphere.with_vertices(s.jitter(sphere.vertices(), 0.1));

  Positions m = s.jitter(sphere.vertices(), 0.1);
  const MeshLoss lm = loss_mesh(sphere.with_vertices(m), target, &reg, nullptr, cfg);
  s.run("loss_mesh", [&] { return loss_mesh(sphere.with_vertices(m), target, &reg, nullptr, cfg).report.mesh_total; },
        {{"pred", span_of(m), cspan(lm.grad)}});

  Positions sp = s.jitter(sphere.vertices(), 0.1);
  const SurfaceLoss ls = loss_surface(sphere.with_vertices(sp), target, cfg);
  s.run("loss_surface", [&] { return loss_surface(sphere.with_vertices(sp), target, cfg).total; },
        {{"pred", span_of(sp), cspan(ls.grad)}});

  Positions from_gt = s.jitter(sphere.vertices(), 0.1);
  const TraceLoss lt = loss_trace(sphere.with_vertices(sp), sphere.with_vertices(from_gt), target, cfg);
  s.run("loss_trace",
        [&] { return loss_trace(sphere.with_vertices(sp), sphere.with_vertices(from_gt), target, cfg).value; },
        {{"pred", span_of(sp), cspan(lt.grad_pred)}, {"from_gt", span_of(from_gt), cspan(lt.grad_from_gt)}});
}

// End-to-end routed gradients on a tiny network. Each closure is the loss whose
// gradient the router claims for the listed blocks.
void check_pipeline(Suite& s) {
  NetworkConfig nc;
  nc.template_subdivisions = 1;
  nc.image_resolution = 16;
  nc.global_dim = 4;
  nc.local_dim = 4;
  nc.l1_width = 6;
  nc.graph_widths = {6, 6};
  nc.mesh_widths = {5, 5};
  nc.output_init_scale = 0.5;
  SyntheticOptions so;
  so.subdivisions = 1;
  so.resolution = 16;
  const Sample sample = make_synthetic_dataset(s.opt.seed, 1, so).front();
  nc.seed = s.opt.seed;
  Network net = build_network(nc);
  // Zero biases over a zero background would sit on the activation kink.
  randomize_biases(s, net.params.global);
  randomize_biases(s, net.params.local);
  const JointRegressor reg = synthetic_joint_regressor(net.templ);

  auto select = [&](NetworkParams& grad, const std::vector<std::string>& prefixes) {
    std::vector<GradBlock> blocks;
    auto values = net.params.blocks();
    auto grads = grad.blocks();
    for (size_t i = 0; i < values.size(); ++i)
      for (const auto& pre : prefixes)
        if (values[i].first.rfind(pre, 0) == 0)
          blocks.push_back({values[i].first, span_of(*values[i].second), cspan(*grads[i].second)});
    return blocks;
  };
  // Sign pattern of every activation input and |.| argument along the forward pass.
  auto signature = [&] {
    ForwardTape tape;
    forward(net, sample, &tape);
    std::vector<const Matrix*> pre = {&tape.l1.pre};
    for (const auto* enc : {&tape.global, &tape.local})
      for (const auto& c : enc->conv) pre.push_back(&c.pre);
    for (const auto& g : tape.graph) pre.push_back(&g.pre);
    for (const auto& c : tape.clothed.conv) {
      pre.push_back(&c.pre);
      pre.push_back(&c.diff13);
      pre.push_back(&c.diff24);
    }
    std::vector<signed char> sig;
    for (const Matrix* m : pre)
      for (double v : m->reshaped()) sig.push_back(static_cast<signed char>((v > 0.0) - (v < 0.0)));
    return sig;
  };
  const auto base_signature = signature();
  // Probes only entries whose +-h perturbation keeps the pattern fixed.
  auto away_from_kinks = [&](const std::vector<GradBlock>& blocks) {
    return [&, blocks](size_t b, size_t i) {
      double& v = blocks[b].values[i];
      const double orig = v;
      bool same = true;
      for (double delta : {s.opt.step, -s.opt.step}) {
        v = orig + delta;
        same = same && signature() == base_signature;
      }
      v = orig;
      return same;
    };
  };

  const std::vector<std::string> body = {"global.", "L1.", "L2.", "L3.", "L4."};
  const std::vector<std::string> clothed = {"local.", "L5.", "L6.", "L7."};

  LossConfig mesh_only;
  mesh_only.lambda_trace = mesh_only.lambda_cloth = 0.0;
  StepResult m = loss_and_gradient(net, sample, reg, mesh_only, true);
  auto mb = select(m.grad, body);
  s.run("pipeline_body", [&] { return evaluate_losses(net, sample, reg, mesh_only).mesh_total; }, mb, 12,
        away_from_kinks(mb));

  LossConfig surface_only = mesh_only;
  surface_only.w_vertex = surface_only.w_joint = surface_only.w_chamfer_body = 0.0;
  StepResult c = loss_and_gradient(net, sample, reg, surface_only, false);
  auto cb = select(c.grad, clothed);
  s.run("pipeline_clothed", [&] { return evaluate_losses(net, sample, reg, surface_only).surface_total; }, cb,
        12, away_from_kinks(cb));

  LossConfig trace_only = surface_only;
  trace_only.lambda_trace = 1.0;
  StepResult t = loss_and_gradient(net, sample, reg, trace_only, false);
  auto tb = select(t.grad, body);
  s.run("pipeline_trace", [&] { return evaluate_losses(net, sample, reg, trace_only).ltrace; }, tb, 12,
        away_from_kinks(tb));
}

} // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options) {
  Suite s(options);
  check_dense(s);
  check_graph_conv(s);
  check_mesh_conv(s, nn::MeshConvMode::Symmetric, "mesh_conv");
  check_mesh_conv(s, nn::MeshConvMode::RawOrdered, "mesh_conv_raw");
  check_edge_to_vertex(s);
  check_conv2d(s);
  check_encode_global(s);
  check_encode_local(s);
  check_projection(s);
  check_vertex_features(s);
  check_edge_features(s);
  check_vertex_normals(s);
  check_point_losses(s);
  check_composite_losses(s);
  check_pipeline(s);
  return std::move(s.entries);
}

} // namespace munet
