#include "munet/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>

#include "json.hpp"

#include "munet/error.hpp"
#include "munet/metrics.hpp"

namespace munet {

using nlohmann::json;
using nn::Activation;
using nn::Matrix;

// ---------------------------------------------------------------------------
// Configuration

void NetworkConfig::validate() const {
  if (template_subdivisions < 0 || template_subdivisions > 4)
    throw ConfigError("network.template_subdivisions", "must be in [0, 4]");
  if (image_resolution < 16 || image_resolution % 8 != 0)
    throw ConfigError("network.image_resolution", "must be a multiple of 8, at least 16");
  if (global_dim < 1) throw ConfigError("network.global_dim", "must be positive");
  if (local_dim < 1) throw ConfigError("network.local_dim", "must be positive");
  if (l1_width < 1) throw ConfigError("network.l1_width", "must be positive");
  if (graph_widths.empty()) throw ConfigError("network.graph_widths", "needs at least one layer");
  for (int w : graph_widths)
    if (w < 1) throw ConfigError("network.graph_widths", "widths must be positive");
  if (mesh_widths.empty()) throw ConfigError("network.mesh_widths", "needs at least one layer");
  for (int w : mesh_widths)
    if (w < 1) throw ConfigError("network.mesh_widths", "widths must be positive");
  if (pattern_size != 1 && pattern_size != 3 && pattern_size != 5)
    throw ConfigError("network.pattern_size", "must be 1, 3 or 5");
  if (!(pattern_spacing > 0.0)) throw ConfigError("network.pattern_spacing", "must be positive");
  if (!(camera_scale > 0.0)) throw ConfigError("network.camera_scale", "must be positive");
  if (!(output_init_scale >= 0.0)) throw ConfigError("network.output_init_scale", "must be non-negative");
}

void TrainingConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("training.learning_rate", "must be a finite non-negative number");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("training.momentum", "must be in [0, 1)");
  if (steps < 0) throw ConfigError("training.steps", "must be non-negative");
  if (warmup_steps < 0) throw ConfigError("training.warmup_steps", "must be non-negative");
  if (eval_every < 1) throw ConfigError("training.eval_every", "must be positive");
  if (eval_samples < 1) throw ConfigError("training.eval_samples", "must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("training.clip_norm", "must be non-negative");
  if (batch_size < 0) throw ConfigError("training.batch_size", "must be non-negative");
  if (!(decay_at >= 0.0 && decay_at <= 1.0)) throw ConfigError("training.decay_at", "must be in [0, 1]");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("training.decay_factor", "must be in (0, 1]");
}

void DataConfig::validate() const {
  if (train_samples < 1) throw ConfigError("data.train_samples", "must be positive");
  if (!(offset_min > 0.0)) throw ConfigError("data.offset_min", "must be positive");
  if (!(offset_max >= offset_min)) throw ConfigError("data.offset_max", "must be at least offset_min");
}

void ToyConfig::validate() const {
  network.validate();
  try {
    losses.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("losses." + e.key(), "must be a finite non-negative number");
  }
  training.validate();
  data.validate();
}

namespace {

using Setter = std::function<void(const json&, const std::string&)>;

void apply_section(const json& section, const std::string& name, const std::map<std::string, Setter>& setters) {
  if (!section.is_object()) throw ConfigError(name, "section must be an object");
  for (const auto& [key, value] : section.items()) {
    const std::string full = name.empty() ? key : name + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(full, "unknown key");
    it->second(value, full);
  }
}

Setter set_int(int& target) {
  return [&target](const json& v, const std::string& key) {
    if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
    target = v.get<int>();
  };
}

Setter set_seed(std::uint64_t& target) {
  return [&target](const json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
      throw ConfigError(key, "expected a non-negative integer");
    target = v.get<std::uint64_t>();
  };
}

Setter set_double(double& target) {
  return [&target](const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key, "expected a number");
    target = v.get<double>();
  };
}

Setter set_bool(bool& target) {
  return [&target](const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
    target = v.get<bool>();
  };
}

Setter set_widths(std::vector<int>& target) {
  return [&target](const json& v, const std::string& key) {
    if (!v.is_array()) throw ConfigError(key, "expected an array of integers");
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError(key, "expected an array of integers");
      out.push_back(e.get<int>());
    }
    target = std::move(out);
  };
}

const char* mode_name(nn::MeshConvMode m) { return m == nn::MeshConvMode::Symmetric ? "symmetric" : "raw_ordered"; }

std::map<std::string, Setter> network_setters(NetworkConfig& c) {
  return {{"template_subdivisions", set_int(c.template_subdivisions)},
          {"image_resolution", set_int(c.image_resolution)},
          {"global_dim", set_int(c.global_dim)},
          {"local_dim", set_int(c.local_dim)},
          {"l1_width", set_int(c.l1_width)},
          {"graph_widths", set_widths(c.graph_widths)},
          {"mesh_widths", set_widths(c.mesh_widths)},
          {"pattern_size", set_int(c.pattern_size)},
          {"pattern_spacing", set_double(c.pattern_spacing)},
          {"mesh_conv_mode",
           [&c](const json& v, const std::string& key) {
             if (v == "symmetric")
               c.mesh_conv_mode = nn::MeshConvMode::Symmetric;
             else if (v == "raw_ordered")
               c.mesh_conv_mode = nn::MeshConvMode::RawOrdered;
             else
               throw ConfigError(key, "expected \"symmetric\" or \"raw_ordered\"");
           }},
          {"camera_scale", set_double(c.camera_scale)},
          {"output_init_scale", set_double(c.output_init_scale)},
          {"seed", set_seed(c.seed)}};
}

json network_json(const NetworkConfig& c) {
  return {{"template_subdivisions", c.template_subdivisions},
          {"image_resolution", c.image_resolution},
          {"global_dim", c.global_dim},
          {"local_dim", c.local_dim},
          {"l1_width", c.l1_width},
          {"graph_widths", c.graph_widths},
          {"mesh_widths", c.mesh_widths},
          {"pattern_size", c.pattern_size},
          {"pattern_spacing", c.pattern_spacing},
          {"mesh_conv_mode", mode_name(c.mesh_conv_mode)},
          {"camera_scale", c.camera_scale},
          {"output_init_scale", c.output_init_scale},
          {"seed", c.seed}};
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("malformed JSON: ") + e.what());
  }
}

} // namespace

std::string network_config_to_json(const NetworkConfig& cfg) { return network_json(cfg).dump(); }

NetworkConfig network_config_from_json(const std::string& text) {
  NetworkConfig cfg;
  apply_section(parse_json(text), "network", network_setters(cfg));
  cfg.validate();
  return cfg;
}

ToyConfig ToyConfig::from_json(const std::string& text) {
  ToyConfig cfg;
  LossConfig& l = cfg.losses;
  TrainingConfig& t = cfg.training;
  DataConfig& d = cfg.data;
  const std::map<std::string, Setter> sections = {
      {"network", [&](const json& v, const std::string&) { apply_section(v, "network", network_setters(cfg.network)); }},
      {"losses",
       [&](const json& v, const std::string&) {
         apply_section(v, "losses",
                       {{"lambda_trace", set_double(l.lambda_trace)},
                        {"lambda_cloth", set_double(l.lambda_cloth)},
                        {"clamp_trace", set_bool(l.clamp_trace)},
                        {"silhouette_resolution", set_int(l.silhouette_resolution)},
                        {"w_vertex", set_double(l.w_vertex)},
                        {"w_joint", set_double(l.w_joint)},
                        {"w_chamfer_body", set_double(l.w_chamfer_body)},
                        {"w_chamfer_surface", set_double(l.w_chamfer_surface)},
                        {"w_normal", set_double(l.w_normal)}});
       }},
      {"training",
       [&](const json& v, const std::string&) {
         apply_section(v, "training",
                       {{"learning_rate", set_double(t.learning_rate)},
                        {"momentum", set_double(t.momentum)},
                        {"steps", set_int(t.steps)},
                        {"warmup_steps", set_int(t.warmup_steps)},
                        {"eval_every", set_int(t.eval_every)},
                        {"eval_samples", set_int(t.eval_samples)},
                        {"clip_norm", set_double(t.clip_norm)},
                        {"batch_size", set_int(t.batch_size)},
                        {"decay_at", set_double(t.decay_at)},
                        {"decay_factor", set_double(t.decay_factor)}});
       }},
      {"data",
       [&](const json& v, const std::string&) {
         apply_section(v, "data",
                       {{"seed", set_seed(d.seed)},
                        {"train_samples", set_int(d.train_samples)},
                        {"offset_min", set_double(d.offset_min)},
                        {"offset_max", set_double(d.offset_max)}});
       }},
  };
  apply_section(parse_json(text), "", sections);
  cfg.validate();
  return cfg;
}

std::string ToyConfig::to_json() const {
  json j;
  j["network"] = network_json(network);
  j["losses"] = {{"lambda_trace", losses.lambda_trace},
                 {"lambda_cloth", losses.lambda_cloth},
                 {"clamp_trace", losses.clamp_trace},
                 {"silhouette_resolution", losses.silhouette_resolution},
                 {"w_vertex", losses.w_vertex},
                 {"w_joint", losses.w_joint},
                 {"w_chamfer_body", losses.w_chamfer_body},
                 {"w_chamfer_surface", losses.w_chamfer_surface},
                 {"w_normal", losses.w_normal}};
  j["training"] = {{"learning_rate", training.learning_rate}, {"momentum", training.momentum},
                   {"steps", training.steps},                 {"warmup_steps", training.warmup_steps},
                   {"eval_every", training.eval_every},       {"eval_samples", training.eval_samples},
                   {"clip_norm", training.clip_norm},         {"batch_size", training.batch_size},
                   {"decay_at", training.decay_at},           {"decay_factor", training.decay_factor}};
  j["data"] = {{"seed", data.seed},
               {"train_samples", data.train_samples},
               {"offset_min", data.offset_min},
               {"offset_max", data.offset_max}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<std::pair<std::string, Matrix*>> NetworkParams::blocks() {
  std::vector<std::pair<std::string, Matrix*>> out;
  auto encoder = [&](const std::string& prefix, EncoderParams& e) {
    for (int l = 0; l < 3; ++l) {
      out.emplace_back(prefix + ".conv" + std::to_string(l) + ".weight", &e.weight[l]);
      out.emplace_back(prefix + ".conv" + std::to_string(l) + ".bias", &e.bias[l]);
    }
  };
  encoder("global", global);
  encoder("local", local);
  out.emplace_back("L1.weight", &l1_weight);
  out.emplace_back("L1.bias", &l1_bias);
  for (size_t k = 0; k < graph.size(); ++k) out.emplace_back("L" + std::to_string(2 + k) + ".weight", &graph[k]);
  const int l10 = 2 + static_cast<int>(graph.size());
  out.emplace_back("L" + std::to_string(l10) + ".weight", &l10_weight);
  out.emplace_back("L" + std::to_string(l10) + ".bias", &l10_bias);
  for (size_t k = 0; k < mesh.size(); ++k)
    for (int s = 0; s < 5; ++s)
      out.emplace_back("L" + std::to_string(l10 + 1 + k) + ".k" + std::to_string(s), &mesh[k][s]);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> NetworkParams::blocks() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<NetworkParams*>(this)->blocks()) out.emplace_back(name, m);
  return out;
}

long NetworkParams::scalar_count() const {
  long n = 0;
  for (const auto& b : blocks()) n += b.second->size();
  return n;
}

NetworkParams NetworkParams::zeros_like() const {
  NetworkParams z = *this;
  for (auto& b : z.blocks()) b.second->setZero();
  return z;
}

void NetworkParams::axpy(double alpha, const NetworkParams& other) {
  auto mine = blocks();
  auto theirs = other.blocks();
  if (mine.size() != theirs.size()) throw ShapeError("parameter sets differ in block count");
  for (size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].second->rows() != theirs[i].second->rows() || mine[i].second->cols() != theirs[i].second->cols())
      throw ShapeError("parameter block " + mine[i].first + " differs in shape");
    *mine[i].second += alpha * *theirs[i].second;
  }
}

void NetworkParams::scale(double factor) {
  for (auto& b : blocks()) *b.second *= factor;
}

double NetworkParams::squared_norm() const {
  double s = 0.0;
  for (const auto& b : blocks()) s += b.second->squaredNorm();
  return s;
}

bool NetworkParams::all_finite() const {
  for (const auto& b : blocks())
    if (!b.second->allFinite()) return false;
  return true;
}

long expected_parameter_count(const NetworkConfig& cfg) {
  auto encoder = [](long in, long out) {
    const long w[4] = {in, 16, 32, out};
    long n = 0;
    for (int l = 0; l < 3; ++l) n += 9 * w[l] * w[l + 1] + w[l + 1];
    return n;
  };
  long n = encoder(static_cast<long>(kGlobalChannels.size()), cfg.global_dim) +
           encoder(static_cast<long>(kLocalChannels.size()), cfg.local_dim);
  n += (3L + cfg.global_dim) * cfg.l1_width + cfg.l1_width;
  long prev = cfg.l1_width;
  for (int w : cfg.graph_widths) {
    n += prev * w;
    prev = w;
  }
  n += prev * 6 + 6;
  prev = 2L * (cfg.local_dim + 6);
  for (int w : cfg.mesh_widths) {
    n += 5 * prev * w;
    prev = w;
  }
  n += 5 * prev * 3;
  return n;
}

Network build_network(const NetworkConfig& cfg) {
  cfg.validate();
  Network net;
  net.config = cfg;
  net.templ = make_icosphere(cfg.template_subdivisions);
  net.adjacency = build_edge_adjacency(net.templ);
  net.vertex_adjacency = build_vertex_adjacency(net.templ);
  net.edge_pooling = nn::build_edge_to_vertex(net.templ);

  std::mt19937_64 rng(cfg.seed);
  NetworkParams& p = net.params;
  p.global = init_global_encoder(cfg.global_dim, rng);
  p.local = init_local_encoder(cfg.local_dim, rng);

  const auto fan_in = nn::InitScheme::UniformFanIn;
  const int in1 = 3 + cfg.global_dim;
  p.l1_weight = nn::init_matrix(in1, cfg.l1_width, in1, fan_in, rng);
  p.l1_bias = Matrix::Zero(1, cfg.l1_width);
  int prev = cfg.l1_width;
  for (int w : cfg.graph_widths) {
    p.graph.push_back(nn::init_matrix(prev, w, prev, fan_in, rng));
    prev = w;
  }
  p.l10_weight = cfg.output_init_scale * nn::init_matrix(prev, 6, prev, fan_in, rng);
  p.l10_bias = Matrix::Zero(1, 6);

  std::vector<int> widths = cfg.mesh_widths;
  widths.push_back(3);
  prev = 2 * (cfg.local_dim + 6);
  // Symmetric slots 1-4 each combine two neighbours, doubling their input variance.
  const int fan_per_input = cfg.mesh_conv_mode == nn::MeshConvMode::Symmetric ? 9 : 5;
  for (size_t k = 0; k < widths.size(); ++k) {
    nn::MeshConvKernel kernel;
    const double gain = k + 1 == widths.size() ? cfg.output_init_scale : 1.0;
    for (auto& slot : kernel) slot = gain * nn::init_matrix(prev, widths[k], fan_per_input * prev, fan_in, rng);
    p.mesh.push_back(std::move(kernel));
    prev = widths[k];
  }
  return net;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

// Uniform double in [lo, hi) from the top 53 bits of the generator.
double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Vec3 random_direction(std::mt19937_64& rng) {
  const double z = uniform(rng, -1.0, 1.0);
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

struct Wave {
  double amplitude, frequency, phase;
  Vec3 direction;
  double at(const Vec3& u) const { return amplitude * std::sin(frequency * u.dot(direction) + phase); }
};

Wave random_wave(std::mt19937_64& rng, double amp_lo, double amp_hi) {
  Wave w;
  w.amplitude = uniform(rng, amp_lo, amp_hi);
  w.frequency = uniform(rng, 1.5, 3.0);
  w.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  w.direction = random_direction(rng);
  return w;
}

} // namespace

JointRegressor synthetic_joint_regressor(const MeshGraph& templ) {
  const double d = std::numbers::sqrt2 / 2.0;
  const Vec3 anchors[8] = {{0, 1, 0}, {0, -1, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 0, 1}, {0, 0, -1}, {d, -d, 0}, {-d, -d, 0}};
  const int per_joint = std::min(5, templ.vertex_count());
  std::vector<Eigen::Triplet<double>> trip;
  for (int k = 0; k < 8; ++k) {
    std::vector<std::pair<double, int>> dist;
    for (int i = 0; i < templ.vertex_count(); ++i)
      dist.emplace_back((templ.vertices().row(i).transpose() - anchors[k]).squaredNorm(), i);
    std::partial_sort(dist.begin(), dist.begin() + per_joint, dist.end());
    for (int j = 0; j < per_joint; ++j) trip.emplace_back(k, dist[j].second, 1.0 / per_joint);
  }
  JointRegressor reg;
  reg.weights.resize(8, templ.vertex_count());
  reg.weights.setFromTriplets(trip.begin(), trip.end());
  return reg;
}

ImageStack render_image_stack(const MeshGraph& surface, const CameraWP& cam, const Vec3& albedo) {
  const Vec3 origin = Vec3::Zero();
  const NormalMap front = rasterize_normal_map(surface, 0.0, cam, true, origin);
  const NormalMap back = rasterize_normal_map(surface, 180.0, cam, true, origin);
  const Vec3 light = Vec3(0.3, 0.5, 1.0).normalized();

  ImageStack s;
  s.width = cam.width;
  s.height = cam.height;
  s.channels = kFullChannels;
  s.data = Matrix::Zero(static_cast<long>(s.width) * s.height, static_cast<long>(kFullChannels.size()));
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const long p = static_cast<long>(y) * s.width + x;
      if (front.mask[p]) {
        const Vec3& n = front.at(x, y);
        const double shade = 0.2 + 0.8 * std::max(0.0, n.dot(light));
        for (int c = 0; c < 3; ++c) s.data(p, c) = albedo[c] * shade;
        s.data(p, 3) = front.depth[p];
        for (int c = 0; c < 3; ++c) s.data(p, 4 + c) = n[c];
      }
      // The back view mirrors x about the image center; undo that and the yaw.
      const int xm = s.width - 1 - x;
      if (back.mask[static_cast<long>(y) * s.width + xm]) {
        const Vec3& n = back.at(xm, y);
        s.data(p, 7) = -n.x();
        s.data(p, 8) = n.y();
        s.data(p, 9) = -n.z();
      }
    }
  }
  return s;
}

std::vector<Sample> make_synthetic_dataset(std::uint64_t seed, int n, const SyntheticOptions& opt) {
  if (n < 0) throw ConfigError("data.train_samples", "must be non-negative");
  std::mt19937_64 rng(seed);
  const MeshGraph templ = make_icosphere(opt.subdivisions);
  const JointRegressor reg = synthetic_joint_regressor(templ);
  CameraWP cam;
  cam.scale = opt.camera_scale;
  cam.width = cam.height = opt.resolution;

  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    const Vec3 axis(uniform(rng, 0.8, 0.9), uniform(rng, 1.1, 1.2), uniform(rng, 0.65, 0.75));
    Wave bumps[3];
    for (auto& w : bumps) w = random_wave(rng, 0.01, 0.03);
    Wave shell = random_wave(rng, 1.0, 1.0);
    const Vec3 albedo(uniform(rng, 0.3, 1.0), uniform(rng, 0.3, 1.0), uniform(rng, 0.3, 1.0));

    Positions body(templ.vertex_count(), 3);
    for (int v = 0; v < templ.vertex_count(); ++v) {
      const Vec3 u = templ.vertices().row(v).transpose();
      double r = 1.0;
      for (const auto& w : bumps) r += w.at(u);
      body.row(v) = (axis.cwiseProduct(u) * r).transpose();
    }
    Sample s;
    s.body = templ.with_vertices(std::move(body), MeshRole::Body);
    const Positions normals = vertex_normals(s.body);
    Positions surface = s.body.vertices();
    for (int v = 0; v < templ.vertex_count(); ++v) {
      const Vec3 u = templ.vertices().row(v).transpose();
      const double t = 0.5 + 0.5 * shell.at(u);
      surface.row(v) += (opt.offset_min + (opt.offset_max - opt.offset_min) * t) * normals.row(v);
    }
    s.surface = templ.with_vertices(std::move(surface), MeshRole::GroundTruth);
    s.joints = reg.apply(s.body.vertices());
    s.camera = cam;
    s.images = render_image_stack(s.surface, cam, albedo);
    out.push_back(std::move(s));
  }
  return out;
}

Dataset make_toy_dataset(const ToyConfig& cfg) {
  SyntheticOptions opt;
  opt.subdivisions = cfg.network.template_subdivisions;
  opt.resolution = cfg.network.image_resolution;
  opt.camera_scale = cfg.network.camera_scale;
  opt.offset_min = cfg.data.offset_min;
  opt.offset_max = cfg.data.offset_max;
  std::vector<Sample> all = make_synthetic_dataset(cfg.data.seed, cfg.data.train_samples + 1, opt);
  Dataset d;
  d.heldout = std::move(all.back());
  all.pop_back();
  d.train = std::move(all);
  d.regressor = synthetic_joint_regressor(make_icosphere(cfg.network.template_subdivisions));
  return d;
}

// ---------------------------------------------------------------------------
// Forward

MeshGraph forward_clothed(const Network& net, const MeshGraph& body, const FeatureMap& features,
                          const CameraWP& cam, ClothedTape* tape) {
  if (!body.same_topology(net.templ)) throw ShapeError("body mesh does not share the template topology");
  const VertexFeatures vf = assemble_vertex_features(body, features, cam, net.pattern());
  Matrix x = assemble_edge_features(vf.psi, body.edges());
  const auto& kernels = net.params.mesh;
  if (tape) {
    tape->body = body;
    tape->camera = cam;
    tape->vertex_features = vf.psi;
    tape->conv.assign(kernels.size(), {});
  }
  for (size_t k = 0; k < kernels.size(); ++k) {
    const Activation act = k + 1 == kernels.size() ? Activation::Linear : Activation::LeakyRelu;
    x = nn::mesh_conv_forward(x, net.adjacency, kernels[k], act, net.config.mesh_conv_mode,
                              tape ? &tape->conv[k] : nullptr);
  }
  Positions displaced = body.vertices() + nn::edge_to_vertex(x, net.edge_pooling);
  return body.with_vertices(std::move(displaced), MeshRole::Clothed);
}

ClothedGrads forward_clothed_backward(const Network& net, ClothedTape& tape, const FeatureMap& features,
                                      const Positions& d_surface) {
  const auto& kernels = net.params.mesh;
  ClothedGrads g;
  g.d_kernels.resize(kernels.size());
  Matrix up = nn::edge_to_vertex_backward(d_surface, net.edge_pooling);
  for (size_t k = kernels.size(); k-- > 0;) {
    nn::MeshConvGrads mg = nn::mesh_conv_backward(tape.conv[k], kernels[k], up);
    g.d_kernels[k] = std::move(mg.d_kernel);
    up = std::move(mg.d_input);
  }
  const Matrix d_psi = assemble_edge_features_backward(up, tape.body.edges(), tape.body.vertex_count());
  VertexFeatureGrads vg = assemble_vertex_features_backward(tape.body, features, tape.camera, net.pattern(), d_psi);
  g.d_body = d_surface + vg.d_vertices;
  g.d_camera = vg.d_camera;
  g.d_features = std::move(vg.d_features);
  return g;
}

namespace {

void check_sample(const Network& net, const Sample& sample) {
  const int res = net.config.image_resolution;
  if (sample.images.width != res || sample.images.height != res)
    throw ShapeError("sample images are " + std::to_string(sample.images.width) + "x" +
                     std::to_string(sample.images.height) + ", network expects " + std::to_string(res));
}

FeatureMap local_features(const Network& net, const Sample& sample, EncoderTape* tape) {
  return encode_local(sample.images.select(kLocalChannels), net.params.local, tape);
}

} // namespace

ForwardResult forward(const Network& net, const Sample& sample, ForwardTape* tape) {
  check_sample(net, sample);
  const NetworkConfig& cfg = net.config;
  const NetworkParams& p = net.params;

  const FeatureVector fg = encode_global(sample.images.select(kGlobalChannels), p.global, tape ? &tape->global : nullptr);
  FeatureMap features = local_features(net, sample, tape ? &tape->local : nullptr);

  const int v = net.templ.vertex_count();
  Matrix x(v, 3 + fg.size());
  x.leftCols(3) = net.templ.vertices();
  x.rightCols(fg.size()) = fg.replicate(v, 1);
  Matrix h = nn::dense_forward(x, p.l1_weight, p.l1_bias, Activation::LeakyRelu, tape ? &tape->l1 : nullptr);
  if (tape) tape->graph.assign(p.graph.size(), {});
  for (size_t k = 0; k < p.graph.size(); ++k)
    h = nn::graph_conv_forward(h, net.vertex_adjacency, p.graph[k], Activation::LeakyRelu,
                               tape ? &tape->graph[k] : nullptr);
  const Matrix out = nn::dense_forward(h, p.l10_weight, p.l10_bias, Activation::Linear, tape ? &tape->l10 : nullptr);

  const Eigen::Vector3d raw = out.rightCols(3).colwise().mean().transpose();
  ForwardResult r;
  r.camera.scale = cfg.camera_scale * std::exp(raw[0]);
  r.camera.tx = raw[1];
  r.camera.ty = raw[2];
  r.camera.width = r.camera.height = cfg.image_resolution;
  if (!out.allFinite()) throw NumericalError("non-finite body prediction");
  r.body = net.templ.with_vertices(net.templ.vertices() + out.leftCols(3), MeshRole::Body);
  r.surface = forward_clothed(net, r.body, features, r.camera, tape ? &tape->clothed : nullptr);
  if (!r.surface.vertices().allFinite()) throw NumericalError("non-finite surface prediction");
  if (tape) {
    tape->camera_raw = raw;
    tape->features = std::move(features);
  }
  return r;
}

MeshGraph forward_clothed_from_gt(const Network& net, const Sample& sample, const FeatureMap& features) {
  return forward_clothed(net, sample.body, features, sample.camera);
}

MeshGraph forward_clothed_from_gt(const Network& net, const Sample& sample) {
  check_sample(net, sample);
  return forward_clothed_from_gt(net, sample, local_features(net, sample, nullptr));
}

// ---------------------------------------------------------------------------
// Losses and gradients

namespace {

struct Evaluation {
  ForwardResult fwd;
  MeshLoss mesh;
  SurfaceLoss surface;
  TraceLoss trace;
  LossReport report;
};

Evaluation evaluate(const Network& net, const Sample& sample, const JointRegressor& regressor, const LossConfig& cfg,
                    ForwardTape* tape) {
  Evaluation e;
  e.fwd = forward(net, sample, tape);
  const FeatureMap features = tape ? tape->features : local_features(net, sample, nullptr);
  e.mesh = loss_mesh(e.fwd.body, sample.body, &regressor, &sample.joints, cfg);
  e.surface = loss_surface(e.fwd.surface, sample.surface, cfg);
  const MeshGraph from_gt = forward_clothed_from_gt(net, sample, features);
  e.trace = loss_trace(e.fwd.surface, from_gt, sample.surface, cfg);
  const double cloth = loss_cloth(e.fwd.surface, e.fwd.body, sample.surface, sample.body, e.fwd.camera,
                                  sample.camera, cfg);
  e.report = e.mesh.report;
  e.report.lcd2 = e.surface.lcd2;
  e.report.ln = e.surface.ln;
  e.report.ltrace = e.trace.value;
  e.report.lcloth = cloth;
  e.report.finalize(cfg);
  if (auto bad = e.report.first_non_finite(); !bad.empty())
    throw NumericalError("non-finite loss term: " + bad);
  return e;
}

} // namespace

LossReport evaluate_losses(const Network& net, const Sample& sample, const JointRegressor& regressor,
                           const LossConfig& cfg) {
  return evaluate(net, sample, regressor, cfg, nullptr).report;
}

StepResult loss_and_gradient(const Network& net, const Sample& sample, const JointRegressor& regressor,
                             const LossConfig& cfg, bool body_only) {
  ForwardTape tape;
  Evaluation e = evaluate(net, sample, regressor, cfg, &tape);
  const NetworkParams& p = net.params;
  StepResult res;
  res.report = e.report;
  res.grad = p.zeros_like();
  NetworkParams& g = res.grad;

  Positions d_body = e.mesh.grad;
  Eigen::Vector3d d_camera = Eigen::Vector3d::Zero();

  if (!body_only) {
    if (cfg.lambda_trace > 0.0) {
      ClothedTape copy = tape.clothed;
      ClothedGrads tg = forward_clothed_backward(net, copy, tape.features, cfg.lambda_trace * e.trace.grad_pred);
      d_body += tg.d_body;
      d_camera += tg.d_camera;
    }
    ClothedGrads sg = forward_clothed_backward(net, tape.clothed, tape.features, e.surface.grad);
    g.mesh = std::move(sg.d_kernels);
    EncoderGrads lg = encode_local_backward(tape.local, p.local, sg.d_features);
    g.local.weight = std::move(lg.d_weight);
    g.local.bias = std::move(lg.d_bias);
  }

  // Body branch: coordinates plus the vertex-averaged camera head.
  const int v = net.templ.vertex_count();
  const double scale = net.config.camera_scale * std::exp(tape.camera_raw[0]);
  Eigen::RowVector3d d_raw(d_camera[0] * scale, d_camera[1], d_camera[2]);
  Matrix d_out(v, 6);
  d_out.leftCols(3) = d_body;
  d_out.rightCols(3) = (d_raw / v).replicate(v, 1);

  nn::DenseGrads g10 = nn::dense_backward(tape.l10, p.l10_weight, d_out);
  g.l10_weight = std::move(g10.d_weight);
  g.l10_bias = std::move(g10.d_bias);
  Matrix up = std::move(g10.d_input);
  for (size_t k = p.graph.size(); k-- > 0;) {
    nn::GraphConvGrads gg = nn::graph_conv_backward(tape.graph[k], p.graph[k], up);
    g.graph[k] = std::move(gg.d_weight);
    up = std::move(gg.d_input);
  }
  nn::DenseGrads g1 = nn::dense_backward(tape.l1, p.l1_weight, up);
  g.l1_weight = std::move(g1.d_weight);
  g.l1_bias = std::move(g1.d_bias);
  const FeatureVector d_fg = g1.d_input.rightCols(g1.d_input.cols() - 3).colwise().sum();
  EncoderGrads eg = encode_global_backward(tape.global, p.global, d_fg);
  g.global.weight = std::move(eg.d_weight);
  g.global.bias = std::move(eg.d_bias);
  return res;
}

LossReport training_step(Network& net, const Sample& sample, const JointRegressor& regressor, const LossConfig& cfg,
                         Optimizer& opt, bool body_only) {
  return training_step(net, std::vector<const Sample*>{&sample}, regressor, cfg, opt, body_only);
}

namespace {

void accumulate(LossReport& sum, const LossReport& r) {
  sum.lv += r.lv;
  sum.lj += r.lj;
  sum.lcd1 += r.lcd1;
  sum.lcd2 += r.lcd2;
  sum.ln += r.ln;
  sum.ltrace += r.ltrace;
  sum.lcloth += r.lcloth;
}

LossReport mean_report(LossReport sum, size_t n, const LossConfig& cfg) {
  const double k = 1.0 / static_cast<double>(n);
  for (double* v : {&sum.lv, &sum.lj, &sum.lcd1, &sum.lcd2, &sum.ln, &sum.ltrace, &sum.lcloth}) *v *= k;
  sum.finalize(cfg);
  return sum;
}

} // namespace

LossReport evaluate_losses(const Network& net, const std::vector<const Sample*>& batch,
                           const JointRegressor& regressor, const LossConfig& cfg) {
  if (batch.empty()) throw ShapeError("empty batch");
  LossReport sum;
  for (const Sample* s : batch) accumulate(sum, evaluate_losses(net, *s, regressor, cfg));
  return mean_report(sum, batch.size(), cfg);
}

LossReport training_step(Network& net, const std::vector<const Sample*>& batch, const JointRegressor& regressor,
                         const LossConfig& cfg, Optimizer& opt, bool body_only) {
  if (batch.empty()) throw ShapeError("empty batch");
  LossReport sum;
  NetworkParams grad = net.params.zeros_like();
  for (const Sample* sample : batch) {
    StepResult s = loss_and_gradient(net, *sample, regressor, cfg, body_only);
    accumulate(sum, s.report);
    grad.axpy(1.0 / static_cast<double>(batch.size()), s.grad);
  }
  if (!grad.all_finite()) throw NumericalError("non-finite gradient");
  if (opt.clip_norm > 0.0) {
    const double norm = std::sqrt(grad.squared_norm());
    if (norm > opt.clip_norm) grad.scale(opt.clip_norm / norm);
  }
  if (!opt.velocity) opt.velocity = net.params.zeros_like();
  opt.velocity->scale(opt.momentum);
  opt.velocity->axpy(1.0, grad);
  net.params.axpy(-opt.learning_rate, *opt.velocity);
  if (!net.params.all_finite()) throw NumericalError("parameters became non-finite");
  return mean_report(sum, batch.size(), cfg);
}

// ---------------------------------------------------------------------------
// Toy training

std::string TrainHistory::csv_header() {
  return "step,lv,lj,lcd1,lcd2,ln,ltrace,lcloth,total,heldout_mvpe,heldout_cd";
}

std::string TrainHistory::to_csv() const {
  std::string out = csv_header() + "\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    const LossReport& l = r.losses;
    out += std::to_string(r.step);
    for (double v : {l.lv, l.lj, l.lcd1, l.lcd2, l.ln, l.ltrace, l.lcloth, l.total}) out += "," + num(v);
    out += "," + (r.heldout_mvpe ? num(*r.heldout_mvpe) : std::string());
    out += "," + (r.heldout_cd ? num(*r.heldout_cd) : std::string());
    out += "\n";
  }
  return out;
}

ToyResult train_toy(const ToyConfig& cfg) {
  cfg.validate();
  ToyResult res{build_network(cfg.network), {}, make_toy_dataset(cfg)};
  const TrainingConfig& t = cfg.training;
  Optimizer opt{t.learning_rate, t.momentum, t.clip_norm, std::nullopt};
  const auto& train = res.data.train;
  const Sample& heldout = res.data.heldout;
  const size_t batch_size = t.batch_size > 0 ? static_cast<size_t>(t.batch_size) : train.size();
  const int decay_step = static_cast<int>(std::floor(t.decay_at * t.steps));

  for (int step = 0; step <= t.steps; ++step) {
    HistoryRow row;
    row.step = step;
    if (step % t.eval_every == 0 || step == t.steps) {
      const ForwardResult f = forward(res.net, heldout);
      row.heldout_mvpe = mvpe(f.body.vertices(), heldout.body.vertices());
      row.heldout_cd = surface_distances(f.surface, heldout.surface, t.eval_samples, cfg.data.seed).chamfer;
    }
    std::vector<const Sample*> batch;
    for (size_t i = 0; i < batch_size; ++i) batch.push_back(&train[(static_cast<size_t>(step) * batch_size + i) % train.size()]);
    opt.learning_rate = step < decay_step ? t.learning_rate : t.learning_rate * t.decay_factor;
    if (step < t.steps)
      row.losses = training_step(res.net, batch, res.data.regressor, cfg.losses, opt, step < t.warmup_steps);
    else
      row.losses = evaluate_losses(res.net, batch, res.data.regressor, cfg.losses);
    res.history.rows.push_back(row);
  }
  return res;
}

} // namespace munet
