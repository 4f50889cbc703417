#include "munet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "munet/error.hpp"

namespace munet::nn {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

Matrix gather_rows(const Matrix& x, const std::vector<std::array<int, 4>>& nbr, int slot) {
  Matrix out(nbr.size(), x.cols());
  for (size_t e = 0; e < nbr.size(); ++e) out.row(e) = x.row(nbr[e][slot]);
  return out;
}

void scatter_add_rows(Matrix& dst, const Matrix& src, const std::vector<std::array<int, 4>>& nbr, int slot) {
  for (size_t e = 0; e < nbr.size(); ++e) dst.row(nbr[e][slot]) += src.row(e);
}

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

} // namespace

Matrix activate(const Matrix& pre, Activation act) {
  if (act == Activation::Linear) return pre;
  return pre.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
}

Matrix activation_backward(const Matrix& pre, const Matrix& upstream, Activation act) {
  if (act == Activation::Linear) return upstream;
  return upstream.binaryExpr(pre, [](double g, double v) { return v > 0.0 ? g : kLeakySlope * g; });
}

// ---------------------------------------------------------------------------
// ParamStore

int ParamStore::add(std::string name, Matrix value) {
  blocks_.push_back({std::move(name), std::move(value)});
  return static_cast<int>(blocks_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (blocks_[i].name == name) return i;
  return -1;
}

long ParamStore::scalar_count() const {
  long n = 0;
  for (const auto& b : blocks_) n += b.value.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& b : blocks_) out.add(b.name, Matrix::Zero(b.value.rows(), b.value.cols()));
  return out;
}

void ParamStore::set_zero() {
  for (auto& b : blocks_) b.value.setZero();
}

void ParamStore::axpy(double alpha, const ParamStore& other) {
  require(other.size() == size(), "parameter store size mismatch");
  for (int i = 0; i < size(); ++i) {
    require(blocks_[i].value.rows() == other[i].rows() && blocks_[i].value.cols() == other[i].cols(),
            "parameter block shape mismatch: " + blocks_[i].name);
    blocks_[i].value += alpha * other[i];
  }
}

bool ParamStore::all_finite() const {
  return std::all_of(blocks_.begin(), blocks_.end(), [](const Block& b) { return b.value.allFinite(); });
}

Matrix init_matrix(int rows, int cols, int fan_in, InitScheme scheme, std::mt19937_64& rng) {
  if (scheme == InitScheme::Zeros || rows * cols == 0) return Matrix::Zero(rows, cols);
  const double a = std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix m(rows, cols);
  // Fill row-major so the draw order does not depend on Eigen's storage order.
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

double init_target_variance(int fan_in) { return 2.0 / std::max(fan_in, 1); }

LayerParams init_params(std::uint64_t seed, InitScheme scheme, const std::vector<std::array<int, 2>>& shapes) {
  LayerParams p;
  p.seed = seed;
  p.scheme = scheme;
  std::mt19937_64 rng(seed);
  for (size_t i = 0; i < shapes.size(); ++i)
    p.store.add("w" + std::to_string(i), init_matrix(shapes[i][0], shapes[i][1], shapes[i][0], scheme, rng));
  return p;
}

void TapeBase::consume() {
  if (consumed_) throw Error("tape already consumed: backward may run once per forward");
  consumed_ = true;
}

// ---------------------------------------------------------------------------
// Dense

Matrix dense_forward(const Matrix& h, const Matrix& weight, const Matrix& bias, Activation act, DenseTape* tape) {
  require(h.cols() == weight.rows(),
          "dense: input width " + std::to_string(h.cols()) + " vs weight " + shape_str(weight));
  require(bias.rows() == 1 && bias.cols() == weight.cols(), "dense: bias shape " + shape_str(bias));
  Matrix pre = h * weight;
  pre.rowwise() += bias.row(0);
  Matrix out = activate(pre, act);
  if (tape) {
    tape->input = h;
    tape->pre = std::move(pre);
    tape->act = act;
  }
  return out;
}

DenseGrads dense_backward(DenseTape& tape, const Matrix& weight, const Matrix& upstream) {
  tape.consume();
  require(upstream.rows() == tape.pre.rows() && upstream.cols() == tape.pre.cols(),
          "dense backward: upstream " + shape_str(upstream));
  Matrix d_pre = activation_backward(tape.pre, upstream, tape.act);
  DenseGrads g;
  g.d_weight = tape.input.transpose() * d_pre;
  g.d_bias = d_pre.colwise().sum();
  g.d_input = d_pre * weight.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Graph convolution

Matrix graph_conv_forward(const Matrix& h, const SparseRowMatrix& adjacency, const Matrix& weight, Activation act,
                          GraphConvTape* tape) {
  require(adjacency.cols() == h.rows() && adjacency.rows() == h.rows(),
          "graph conv: adjacency " + std::to_string(adjacency.rows()) + " vs " + std::to_string(h.rows()) +
              " rows");
  require(h.cols() == weight.rows(), "graph conv: input width " + std::to_string(h.cols()) + " vs weight " +
                                         shape_str(weight));
  Matrix hw = h * weight;
  Matrix pre = adjacency * hw;
  Matrix out = activate(pre, act);
  if (tape) {
    tape->input = h;
    tape->pre = std::move(pre);
    tape->adjacency = &adjacency;
    tape->act = act;
  }
  return out;
}

GraphConvGrads graph_conv_backward(GraphConvTape& tape, const Matrix& weight, const Matrix& upstream) {
  tape.consume();
  require(upstream.rows() == tape.pre.rows() && upstream.cols() == tape.pre.cols(),
          "graph conv backward: upstream " + shape_str(upstream));
  Matrix d_pre = activation_backward(tape.pre, upstream, tape.act);
  Matrix d_hw = tape.adjacency->transpose() * d_pre;
  GraphConvGrads g;
  g.d_weight = tape.input.transpose() * d_hw;
  g.d_input = d_hw * weight.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Mesh convolution

Matrix mesh_conv_forward(const Matrix& x, const EdgeAdjacency& adjacency, const MeshConvKernel& kernel,
                         Activation act, MeshConvMode mode, MeshConvTape* tape) {
  const auto& nbr = adjacency.neighbors;
  require(static_cast<size_t>(x.rows()) == nbr.size(),
          "mesh conv: " + std::to_string(x.rows()) + " edge rows vs " + std::to_string(nbr.size()) +
              " adjacency records");
  for (const Matrix& k : kernel)
    require(k.rows() == x.cols() && k.cols() == kernel[0].cols(),
            "mesh conv: kernel " + shape_str(k) + " vs input width " + std::to_string(x.cols()));

  std::array<Matrix, 5> terms;
  Matrix diff13, diff24;
  terms[0] = x;
  if (mode == MeshConvMode::Symmetric) {
    Matrix x1 = gather_rows(x, nbr, 0), x2 = gather_rows(x, nbr, 1);
    Matrix x3 = gather_rows(x, nbr, 2), x4 = gather_rows(x, nbr, 3);
    diff13 = x1 - x3;
    diff24 = x2 - x4;
    terms[1] = x1 + x3;
    terms[2] = diff13.cwiseAbs();
    terms[3] = x2 + x4;
    terms[4] = diff24.cwiseAbs();
  } else {
    for (int k = 0; k < 4; ++k) terms[k + 1] = gather_rows(x, nbr, k);
  }

  Matrix pre = terms[0] * kernel[0];
  for (int k = 1; k < 5; ++k) pre.noalias() += terms[k] * kernel[k];
  Matrix out = activate(pre, act);
  if (tape) {
    tape->terms = std::move(terms);
    tape->diff13 = std::move(diff13);
    tape->diff24 = std::move(diff24);
    tape->pre = std::move(pre);
    tape->adjacency = &adjacency;
    tape->mode = mode;
    tape->act = act;
  }
  return out;
}

MeshConvGrads mesh_conv_backward(MeshConvTape& tape, const MeshConvKernel& kernel, const Matrix& upstream) {
  tape.consume();
  require(upstream.rows() == tape.pre.rows() && upstream.cols() == tape.pre.cols(),
          "mesh conv backward: upstream " + shape_str(upstream));
  const auto& nbr = tape.adjacency->neighbors;
  Matrix d_pre = activation_backward(tape.pre, upstream, tape.act);

  MeshConvGrads g;
  std::array<Matrix, 5> d_terms;
  for (int k = 0; k < 5; ++k) {
    g.d_kernel[k] = tape.terms[k].transpose() * d_pre;
    d_terms[k] = d_pre * kernel[k].transpose();
  }

  g.d_input = d_terms[0];
  if (tape.mode == MeshConvMode::Symmetric) {
    Matrix s13 = tape.diff13.unaryExpr(&sign0).cwiseProduct(d_terms[2]);
    Matrix s24 = tape.diff24.unaryExpr(&sign0).cwiseProduct(d_terms[4]);
    scatter_add_rows(g.d_input, d_terms[1] + s13, nbr, 0);
    scatter_add_rows(g.d_input, d_terms[1] - s13, nbr, 2);
    scatter_add_rows(g.d_input, d_terms[3] + s24, nbr, 1);
    scatter_add_rows(g.d_input, d_terms[3] - s24, nbr, 3);
  } else {
    for (int k = 0; k < 4; ++k) scatter_add_rows(g.d_input, d_terms[k + 1], nbr, k);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Edge -> vertex

SparseRowMatrix build_edge_to_vertex(const MeshGraph& mesh) {
  auto incident = vertex_edges(mesh);
  std::vector<Eigen::Triplet<double>> trip;
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    const double w = incident[v].empty() ? 0.0 : 1.0 / incident[v].size();
    for (int e : incident[v]) trip.emplace_back(v, e, w);
  }
  SparseRowMatrix p(mesh.vertex_count(), mesh.edge_count());
  p.setFromTriplets(trip.begin(), trip.end());
  return p;
}

Matrix edge_to_vertex(const Matrix& edge_values, const SparseRowMatrix& pooling) {
  require(pooling.cols() == edge_values.rows(),
          "edge_to_vertex: " + std::to_string(edge_values.rows()) + " edge rows vs " +
              std::to_string(pooling.cols()) + " edges");
  return pooling * edge_values;
}

Matrix edge_to_vertex_backward(const Matrix& upstream, const SparseRowMatrix& pooling) {
  require(pooling.rows() == upstream.rows(), "edge_to_vertex backward: row mismatch");
  return pooling.transpose() * upstream;
}

// ---------------------------------------------------------------------------
// Conv2d

int conv2d_output_size(int input, int stride) { return (input - 1) / stride + 1; }

Grid conv2d_forward(const Grid& input, const Matrix& weight, const Matrix& bias, int stride, Activation act,
                    Conv2dTape* tape) {
  const int cin = input.channels();
  require(input.data.rows() == static_cast<long>(input.width) * input.height, "conv2d: grid size mismatch");
  require(weight.rows() == 9 * cin, "conv2d: weight " + shape_str(weight) + " vs " + std::to_string(cin) +
                                        " input channels");
  require(bias.rows() == 1 && bias.cols() == weight.cols(), "conv2d: bias shape " + shape_str(bias));
  require(stride >= 1, "conv2d: stride must be positive");

  const int ow = conv2d_output_size(input.width, stride);
  const int oh = conv2d_output_size(input.height, stride);
  Matrix cols = Matrix::Zero(static_cast<long>(ow) * oh, 9 * cin);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const long r = static_cast<long>(oy) * ow + ox;
      for (int ky = 0; ky < 3; ++ky) {
        int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= input.height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= input.width) continue;
          cols.block(r, (ky * 3 + kx) * cin, 1, cin) = input.data.row(static_cast<long>(iy) * input.width + ix);
        }
      }
    }
  }
  Matrix pre = cols * weight;
  pre.rowwise() += bias.row(0);
  Grid out;
  out.width = ow;
  out.height = oh;
  out.data = activate(pre, act);
  if (tape) {
    tape->columns = std::move(cols);
    tape->pre = std::move(pre);
    tape->in_width = input.width;
    tape->in_height = input.height;
    tape->in_channels = cin;
    tape->stride = stride;
    tape->out_width = ow;
    tape->out_height = oh;
    tape->act = act;
  }
  return out;
}

Conv2dGrads conv2d_backward(Conv2dTape& tape, const Matrix& weight, const Matrix& upstream) {
  tape.consume();
  require(upstream.rows() == tape.pre.rows() && upstream.cols() == tape.pre.cols(),
          "conv2d backward: upstream " + shape_str(upstream));
  Matrix d_pre = activation_backward(tape.pre, upstream, tape.act);
  Conv2dGrads g;
  g.d_weight = tape.columns.transpose() * d_pre;
  g.d_bias = d_pre.colwise().sum();
  Matrix d_cols = d_pre * weight.transpose();

  const int cin = tape.in_channels;
  g.d_input.width = tape.in_width;
  g.d_input.height = tape.in_height;
  g.d_input.data = Matrix::Zero(static_cast<long>(tape.in_width) * tape.in_height, cin);
  for (int oy = 0; oy < tape.out_height; ++oy) {
    for (int ox = 0; ox < tape.out_width; ++ox) {
      const long r = static_cast<long>(oy) * tape.out_width + ox;
      for (int ky = 0; ky < 3; ++ky) {
        int iy = oy * tape.stride + ky - 1;
        if (iy < 0 || iy >= tape.in_height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int ix = ox * tape.stride + kx - 1;
          if (ix < 0 || ix >= tape.in_width) continue;
          g.d_input.data.row(static_cast<long>(iy) * tape.in_width + ix) +=
              d_cols.block(r, (ky * 3 + kx) * cin, 1, cin);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Gradient check

bool GradCheckReport::pass() const {
  return std::all_of(blocks.begin(), blocks.end(), [&](const Entry& e) { return e.max_rel_error <= tolerance; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : blocks) w = std::max(w, e.max_rel_error);
  return w;
}

GradCheckReport grad_check(const std::function<double()>& closure, std::span<GradBlock> blocks,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);

  auto eval = [&](const std::string& block) {
    double v = closure();
    if (!std::isfinite(v)) throw NumericalError("non-finite closure value while checking " + block);
    return v;
  };

  for (size_t bi = 0; bi < blocks.size(); ++bi) {
    GradBlock& b = blocks[bi];
    if (b.values.size() != b.analytic.size())
      throw ShapeError("grad_check: block " + b.name + " has mismatched value/gradient sizes");
    std::vector<size_t> idx(b.values.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    const size_t limit = options.max_entries > 0 ? static_cast<size_t>(options.max_entries) : idx.size();
    if (idx.size() > limit) std::shuffle(idx.begin(), idx.end(), rng);
    if (options.accept) {
      std::vector<size_t> kept;
      for (size_t i : idx) {
        if (kept.size() == limit) break;
        if (options.accept(bi, i)) kept.push_back(i);
      }
      idx = std::move(kept);
    } else if (idx.size() > limit) {
      idx.resize(limit);
    }
    std::sort(idx.begin(), idx.end());

    double max_num = 0.0, max_abs = 0.0;
    for (size_t i : idx) {
      const double orig = b.values[i];
      b.values[i] = orig + options.step;
      const double fp = eval(b.name);
      b.values[i] = orig - options.step;
      const double fm = eval(b.name);
      b.values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.step);
      if (!std::isfinite(b.analytic[i])) throw NumericalError("non-finite analytic gradient in " + b.name);
      max_num = std::max(max_num, std::abs(numeric));
      max_abs = std::max(max_abs, std::abs(numeric - b.analytic[i]));
    }
    GradCheckReport::Entry e;
    e.name = b.name;
    e.checked = static_cast<int>(idx.size());
    e.max_abs_error = max_abs;
    e.max_rel_error = max_abs / std::max(max_num, options.scale_floor);
    report.blocks.push_back(e);
  }
  return report;
}

} // namespace munet::nn
