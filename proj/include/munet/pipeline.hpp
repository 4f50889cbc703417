#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "munet/encode.hpp"
#include "munet/losses.hpp"
#include "munet/mesh.hpp"
#include "munet/nn.hpp"
#include "munet/raster.hpp"

namespace munet {

// ---------------------------------------------------------------------------
// Configuration. JSON sections: network, losses, training, data.

struct NetworkConfig {
  int template_subdivisions = 2;
  int image_resolution = 32;
  int global_dim = 32; // f_g width
  int local_dim = 32;  // F depth
  int l1_width = 64;
  std::vector<int> graph_widths = std::vector<int>(8, 64); // L2-L9
  std::vector<int> mesh_widths = std::vector<int>(10, 32); // L11-L20; L21 emits 3
  int pattern_size = 3;
  double pattern_spacing = 1.0;
  nn::MeshConvMode mesh_conv_mode = nn::MeshConvMode::Symmetric;
  /// Reference camera scale; the head predicts log(s / camera_scale).
  double camera_scale = 0.55;
  /// L10 and L21 start at this fraction of their fan-in initialization.
  double output_init_scale = 0.1;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

struct TrainingConfig {
  double learning_rate = 2e-3;
  double momentum = 0.9;
  int steps = 1000;
  /// Leading steps that update the body branch from loss_mesh alone.
  int warmup_steps = 200;
  int eval_every = 50;
  int eval_samples = 2000;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_norm = 10.0;
  /// Samples per step, taken round-robin; 0 uses the whole training set.
  int batch_size = 0;
  /// Two-stage schedule: from step floor(decay_at * steps) on, the rate is learning_rate * decay_factor.
  double decay_at = 0.75;
  double decay_factor = 0.1;

  void validate() const;
};

struct DataConfig {
  std::uint64_t seed = 0;
  int train_samples = 4;
  double offset_min = 0.02;
  double offset_max = 0.15;

  void validate() const;
};

struct ToyConfig {
  NetworkConfig network;
  LossConfig losses;
  TrainingConfig training;
  DataConfig data;

  /// Missing keys keep their defaults; unknown or ill-typed keys throw ConfigError.
  static ToyConfig from_json(const std::string& text);
  std::string to_json() const;
  void validate() const;
};

std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Network

struct NetworkParams {
  EncoderParams global; // f_g from (RGB, depth)
  EncoderParams local;  // F from (RGB, front normals, back normals)
  nn::Matrix l1_weight, l1_bias;
  std::vector<nn::Matrix> graph; // L2-L9
  nn::Matrix l10_weight, l10_bias;
  std::vector<nn::MeshConvKernel> mesh; // L11-L21

  /// Every block in canonical layer order, with stable names.
  std::vector<std::pair<std::string, nn::Matrix*>> blocks();
  std::vector<std::pair<std::string, const nn::Matrix*>> blocks() const;
  long scalar_count() const;
  NetworkParams zeros_like() const;
  /// this += alpha * other
  void axpy(double alpha, const NetworkParams& other);
  void scale(double factor);
  double squared_norm() const;
  bool all_finite() const;
};

/// Closed-form parameter count of a configuration.
long expected_parameter_count(const NetworkConfig& cfg);

struct Network {
  NetworkConfig config;
  MeshGraph templ;
  EdgeAdjacency adjacency;
  nn::SparseRowMatrix vertex_adjacency; // row-stochastic with self loops
  nn::SparseRowMatrix edge_pooling;
  NetworkParams params;

  NeighborhoodPattern pattern() const { return {config.pattern_size, config.pattern_spacing}; }
};

Network build_network(const NetworkConfig& cfg);

// ---------------------------------------------------------------------------
// Data

struct Sample {
  ImageStack images; // kFullChannels
  MeshGraph body;    // ground-truth body
  MeshGraph surface; // ground-truth clothed surface
  Positions joints;
  CameraWP camera;
};

struct SyntheticOptions {
  int subdivisions = 2;
  int resolution = 32;
  double camera_scale = 0.55;
  double offset_min = 0.02;
  double offset_max = 0.15;
};

/// Eight joints, each the mean of the five template vertices nearest a fixed anchor direction.
JointRegressor synthetic_joint_regressor(const MeshGraph& templ);

/// Deformed-icosphere bodies with outward clothing shells, rendered into image stacks.
std::vector<Sample> make_synthetic_dataset(std::uint64_t seed, int n, const SyntheticOptions& options = {});

/// Front image, depth and normals rendered from `surface`, back normals from the
/// 180 degree view mirrored into the front image frame.
ImageStack render_image_stack(const MeshGraph& surface, const CameraWP& cam, const Vec3& albedo);

struct Dataset {
  std::vector<Sample> train;
  Sample heldout;
  JointRegressor regressor;
};

/// `cfg.data.train_samples` training samples plus one held-out sample from the same stream.
Dataset make_toy_dataset(const ToyConfig& cfg);

// ---------------------------------------------------------------------------
// Forward / backward

struct ClothedTape {
  MeshGraph body;
  CameraWP camera;
  nn::Matrix vertex_features;
  std::vector<nn::MeshConvTape> conv;
};

struct ForwardTape {
  EncoderTape global, local;
  FeatureMap features;
  nn::DenseTape l1;
  std::vector<nn::GraphConvTape> graph;
  nn::DenseTape l10;
  Eigen::Vector3d camera_raw = Eigen::Vector3d::Zero();
  ClothedTape clothed;
};

struct ForwardResult {
  MeshGraph body;
  CameraWP camera;
  MeshGraph surface;
};

ForwardResult forward(const Network& net, const Sample& sample, ForwardTape* tape = nullptr);

/// G_e alone: per-vertex displacements of `body` driven by features punctured with `cam`.
MeshGraph forward_clothed(const Network& net, const MeshGraph& body, const FeatureMap& features,
                          const CameraWP& cam, ClothedTape* tape = nullptr);

/// G_e with the ground-truth body and camera substituted for the predicted ones.
MeshGraph forward_clothed_from_gt(const Network& net, const Sample& sample);
MeshGraph forward_clothed_from_gt(const Network& net, const Sample& sample, const FeatureMap& features);

struct ClothedGrads {
  Positions d_body;
  Eigen::Vector3d d_camera = Eigen::Vector3d::Zero();
  nn::Matrix d_features;
  std::vector<nn::MeshConvKernel> d_kernels;
};

ClothedGrads forward_clothed_backward(const Network& net, ClothedTape& tape, const FeatureMap& features,
                                      const Positions& d_surface);

// ---------------------------------------------------------------------------
// Training

/// Gradient routing:
///   loss_mesh     -> G_v and the global encoder
///   loss_surface  -> G_e and the local encoder
///   L_trace       -> G_v and the global encoder, through the predicted body, its
///                    camera and the puncturing path; the ground-truth-driven surface is a constant
///   L_cloth       -> none (piecewise constant in the parameters)
struct StepResult {
  LossReport report;
  NetworkParams grad;
};

/// Losses at the current parameters and their routed gradient. `body_only` keeps
/// the loss_mesh route alone. Throws NumericalError naming the first non-finite term.
StepResult loss_and_gradient(const Network& net, const Sample& sample, const JointRegressor& regressor,
                             const LossConfig& cfg, bool body_only = false);

/// Losses only (all terms), no gradient.
LossReport evaluate_losses(const Network& net, const Sample& sample, const JointRegressor& regressor,
                           const LossConfig& cfg);

struct Optimizer {
  double learning_rate = 2e-3;
  double momentum = 0.9;
  double clip_norm = 0.0;
  std::optional<NetworkParams> velocity;
};

/// One momentum-descent update. Returns the losses before the update.
LossReport training_step(Network& net, const Sample& sample, const JointRegressor& regressor,
                         const LossConfig& cfg, Optimizer& opt, bool body_only = false);
/// One update from the mean loss over `batch`; the report holds the mean terms.
LossReport training_step(Network& net, const std::vector<const Sample*>& batch, const JointRegressor& regressor,
                         const LossConfig& cfg, Optimizer& opt, bool body_only = false);
LossReport evaluate_losses(const Network& net, const std::vector<const Sample*>& batch,
                           const JointRegressor& regressor, const LossConfig& cfg);

struct HistoryRow {
  int step = 0;
  LossReport losses;
  std::optional<double> heldout_mvpe;
  std::optional<double> heldout_cd;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;

  static std::string csv_header();
  std::string to_csv() const;
};

struct ToyResult {
  Network net;
  TrainHistory history;
  Dataset data;
};

/// Rows cover steps 0..steps: row t holds the mean losses of step t's batch at the
/// parameters before update t; held-out metrics every eval_every steps and at the end.
ToyResult train_toy(const ToyConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "MUNET1", u32 version, u32 + network config JSON, u32 block count, then per block:
/// u32 name length, name, u32 rank, u64 dims, little-endian fp64 payload.
std::string save_checkpoint(const Network& net);
Network load_checkpoint(const std::string& bytes);
/// Layer order and shapes as JSON.
std::string checkpoint_manifest(const Network& net);

} // namespace munet
