#include "munet/mesh.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

#include "munet/error.hpp"

namespace munet {

namespace {

std::uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b);
}

std::uint64_t directed_key(int from, int to) {
  return (static_cast<std::uint64_t>(from) << 32) | static_cast<std::uint32_t>(to);
}

Vec3 row(const Positions& p, int i) { return p.row(i).transpose(); }

} // namespace

std::string_view to_string(MeshRole role) {
  switch (role) {
  case MeshRole::Template: return "template";
  case MeshRole::Body: return "body";
  case MeshRole::Clothed: return "clothed";
  case MeshRole::GroundTruth: return "ground_truth";
  }
  return "unknown";
}

std::string_view to_string(Violation::Kind kind) {
  switch (kind) {
  case Violation::Kind::BoundaryEdge: return "boundary_edge";
  case Violation::Kind::NonManifoldEdge: return "non_manifold_edge";
  case Violation::Kind::InconsistentWinding: return "inconsistent_winding";
  case Violation::Kind::DegenerateFace: return "degenerate_face";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Topology / MeshGraph

std::shared_ptr<const Topology> Topology::from_faces(int vertex_count, std::vector<Face> faces) {
  auto topo = std::make_shared<Topology>();
  topo->vertex_count = vertex_count;
  for (const Face& f : faces)
    for (int i : f)
      if (i < 0 || i >= vertex_count)
        throw StructuralError("face index " + std::to_string(i) + " out of range for " +
                              std::to_string(vertex_count) + " vertices");

  std::vector<Edge> edges;
  edges.reserve(faces.size() * 3);
  for (const Face& f : faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      if (a == b) continue;
      edges.push_back({std::min(a, b), std::max(a, b)});
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  topo->faces = std::move(faces);
  topo->edges = std::move(edges);
  return topo;
}

int Topology::find_edge(int a, int b) const {
  Edge key{std::min(a, b), std::max(a, b)};
  auto it = std::lower_bound(edges.begin(), edges.end(), key);
  if (it == edges.end() || *it != key) return -1;
  return static_cast<int>(it - edges.begin());
}

MeshGraph::MeshGraph(Positions vertices, std::vector<Face> faces, MeshRole role)
    : vertices_(std::move(vertices)),
      topology_(Topology::from_faces(static_cast<int>(vertices_.rows()), std::move(faces))),
      role_(role) {}

MeshGraph::MeshGraph(Positions vertices, std::shared_ptr<const Topology> topology, MeshRole role)
    : vertices_(std::move(vertices)), topology_(std::move(topology)), role_(role) {
  if (topology_->vertex_count != vertices_.rows())
    throw ShapeError("vertex count " + std::to_string(vertices_.rows()) +
                     " does not match topology (" + std::to_string(topology_->vertex_count) + ")");
}

MeshGraph MeshGraph::with_vertices(Positions vertices, MeshRole role) const {
  return MeshGraph(std::move(vertices), topology_, role);
}

MeshGraph MeshGraph::flipped() const {
  std::vector<Face> faces = topology_->faces;
  for (Face& f : faces) std::swap(f[1], f[2]);
  return MeshGraph(vertices_, std::move(faces), role_);
}

bool MeshGraph::same_topology(const MeshGraph& other) const {
  if (topology_ == other.topology_) return true;
  return topology_->vertex_count == other.topology_->vertex_count &&
         topology_->faces == other.topology_->faces;
}

// ---------------------------------------------------------------------------
// OBJ

namespace {

double parse_double(std::string_view tok, int line) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(value))
    throw ParseError("invalid number '" + std::string(tok) + "'", line);
  return value;
}

long parse_index(std::string_view tok, int line) {
  tok = tok.substr(0, tok.find('/'));
  long value = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || tok.empty())
    throw ParseError("invalid face index '" + std::string(tok) + "'", line);
  return value;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

} // namespace

MeshGraph load_obj(std::string_view text) {
  std::vector<Vec3> verts;
  struct RawFace {
    std::array<long, 3> idx;
    int line;
  };
  std::vector<RawFace> raw_faces;

  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto toks = split_ws(line);
    if (toks.empty()) continue;

    if (toks[0] == "v") {
      if (toks.size() < 4 || toks.size() > 5)
        throw ParseError("vertex line needs 3 coordinates", line_no);
      verts.emplace_back(parse_double(toks[1], line_no), parse_double(toks[2], line_no),
                         parse_double(toks[3], line_no));
    } else if (toks[0] == "f") {
      if (toks.size() < 4) throw ParseError("face line needs 3 indices", line_no);
      if (toks.size() > 4)
        throw ParseError("only triangular faces are supported (got " +
                             std::to_string(toks.size() - 1) + " indices)",
                         line_no);
      raw_faces.push_back(
          {{parse_index(toks[1], line_no), parse_index(toks[2], line_no), parse_index(toks[3], line_no)},
           line_no});
    }
    if (end == text.size()) break;
  }

  const long n = static_cast<long>(verts.size());
  std::vector<Face> faces;
  faces.reserve(raw_faces.size());
  for (const RawFace& rf : raw_faces) {
    Face f{};
    for (int k = 0; k < 3; ++k) {
      long i = rf.idx[k];
      long resolved = i > 0 ? i - 1 : n + i;
      if (i == 0 || resolved < 0 || resolved >= n)
        throw StructuralError("line " + std::to_string(rf.line) + ": face index " + std::to_string(i) +
                              " out of range for " + std::to_string(n) + " vertices");
      f[k] = static_cast<int>(resolved);
    }
    faces.push_back(f);
  }

  Positions p(verts.size(), 3);
  for (size_t i = 0; i < verts.size(); ++i) p.row(i) = verts[i].transpose();
  return MeshGraph(std::move(p), std::move(faces));
}

std::string write_obj(const MeshGraph& mesh) {
  if (mesh.empty()) throw StructuralError("cannot write an empty mesh");
  std::string out;
  char buf[128];
  const Positions& v = mesh.vertices();
  for (int i = 0; i < v.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v(i, 0), v(i, 1), v(i, 2));
    out += buf;
  }
  for (const Face& f : mesh.faces()) {
    std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += buf;
  }
  return out;
}

MeshGraph read_obj_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_obj(ss.str());
}

void write_obj_file(const MeshGraph& mesh, const std::string& path) {
  std::string text = write_obj(mesh);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Validation and adjacency

ValidationReport validate_manifold(const MeshGraph& mesh) {
  ValidationReport report;
  const Positions& v = mesh.vertices();

  for (size_t fi = 0; fi < mesh.faces().size(); ++fi) {
    const Face& f = mesh.faces()[fi];
    bool repeated = f[0] == f[1] || f[1] == f[2] || f[0] == f[2];
    bool zero_area = false;
    if (!repeated) {
      Vec3 n = (row(v, f[1]) - row(v, f[0])).cross(row(v, f[2]) - row(v, f[0]));
      zero_area = n.squaredNorm() == 0.0;
    }
    if (repeated || zero_area)
      report.violations.push_back({Violation::Kind::DegenerateFace, {static_cast<int>(fi)}});
  }

  // Count directed half-edges per undirected edge.
  std::unordered_map<std::uint64_t, int> directed;
  for (const Face& f : mesh.faces())
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      if (a != b) ++directed[directed_key(a, b)];
    }

  for (const Edge& e : mesh.edges()) {
    auto count = [&](int from, int to) {
      auto it = directed.find(directed_key(from, to));
      return it == directed.end() ? 0 : it->second;
    };
    int forward = count(e[0], e[1]);
    int backward = count(e[1], e[0]);
    int total = forward + backward;
    if (total == 1)
      report.violations.push_back({Violation::Kind::BoundaryEdge, {e[0], e[1]}});
    else if (total > 2)
      report.violations.push_back({Violation::Kind::NonManifoldEdge, {e[0], e[1]}});
    else if (forward != 1 || backward != 1)
      report.violations.push_back({Violation::Kind::InconsistentWinding, {e[0], e[1]}});
  }
  return report;
}

std::string ValidationReport::to_json() const {
  nlohmann::json j;
  j["pass"] = pass();
  j["violations"] = nlohmann::json::array();
  for (const Violation& viol : violations)
    j["violations"].push_back({{"kind", std::string(to_string(viol.kind))}, {"indices", viol.indices}});
  return j.dump();
}

EdgeAdjacency build_edge_adjacency(const MeshGraph& mesh) {
  const auto& edges = mesh.edges();
  const auto& topo = *mesh.topology();
  EdgeAdjacency adj;
  adj.neighbors.assign(edges.size(), {-1, -1, -1, -1});
  adj.faces.assign(edges.size(), {-1, -1});

  auto edge_name = [&](int e) {
    return "(" + std::to_string(edges[e][0]) + ", " + std::to_string(edges[e][1]) + ")";
  };

  for (size_t fi = 0; fi < mesh.faces().size(); ++fi) {
    const Face& f = mesh.faces()[fi];
    for (int k = 0; k < 3; ++k) {
      int from = f[k], to = f[(k + 1) % 3], third = f[(k + 2) % 3];
      int e = topo.find_edge(from, to);
      if (e < 0) throw StructuralError("degenerate face " + std::to_string(fi));
      int slot = from < to ? 0 : 1;
      if (adj.faces[e][slot] != -1)
        throw StructuralError("edge " + edge_name(e) + " is non-manifold or inconsistently wound");
      adj.faces[e][slot] = static_cast<int>(fi);
      adj.neighbors[e][2 * slot] = topo.find_edge(to, third);
      adj.neighbors[e][2 * slot + 1] = topo.find_edge(third, from);
    }
  }
  for (size_t e = 0; e < edges.size(); ++e)
    if (adj.faces[e][0] < 0 || adj.faces[e][1] < 0)
      throw StructuralError("edge " + edge_name(static_cast<int>(e)) + " is a boundary edge");
  return adj;
}

SparseRowMatrix build_vertex_adjacency(const MeshGraph& mesh) {
  const int n = mesh.vertex_count();
  std::vector<int> degree(n, 0);
  for (const Edge& e : mesh.edges()) {
    ++degree[e[0]];
    ++degree[e[1]];
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(n + 2 * mesh.edges().size());
  for (int i = 0; i < n; ++i) trip.emplace_back(i, i, 1.0 / (degree[i] + 1));
  for (const Edge& e : mesh.edges()) {
    trip.emplace_back(e[0], e[1], 1.0 / (degree[e[0]] + 1));
    trip.emplace_back(e[1], e[0], 1.0 / (degree[e[1]] + 1));
  }
  SparseRowMatrix a(n, n);
  a.setFromTriplets(trip.begin(), trip.end());
  return a;
}

std::vector<std::vector<int>> vertex_edges(const MeshGraph& mesh) {
  std::vector<std::vector<int>> out(mesh.vertex_count());
  for (size_t e = 0; e < mesh.edges().size(); ++e) {
    out[mesh.edges()[e][0]].push_back(static_cast<int>(e));
    out[mesh.edges()[e][1]].push_back(static_cast<int>(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normals

namespace {

// Unnormalized accumulated normals (sum of face cross products).
Positions accumulated_normals(const MeshGraph& mesh) {
  const Positions& v = mesh.vertices();
  Positions acc = Positions::Zero(v.rows(), 3);
  for (const Face& f : mesh.faces()) {
    Vec3 c = (row(v, f[1]) - row(v, f[0])).cross(row(v, f[2]) - row(v, f[0]));
    for (int i : f) acc.row(i) += c.transpose();
  }
  return acc;
}

} // namespace

Positions vertex_normals(const MeshGraph& mesh) {
  Positions acc = accumulated_normals(mesh);
  for (int i = 0; i < acc.rows(); ++i) {
    double len = acc.row(i).norm();
    if (!(len > 0.0))
      throw DegenerateGeometryError("vertex " + std::to_string(i) + " has a zero-magnitude normal");
    acc.row(i) /= len;
  }
  return acc;
}

Positions vertex_normals_backward(const MeshGraph& mesh, const Positions& grad_normals) {
  const Positions& v = mesh.vertices();
  Positions acc = accumulated_normals(mesh);
  // dL/dm for each accumulated normal m: (I - n n^T) g / |m|
  Positions grad_acc(acc.rows(), 3);
  for (int i = 0; i < acc.rows(); ++i) {
    double len = acc.row(i).norm();
    if (!(len > 0.0))
      throw DegenerateGeometryError("vertex " + std::to_string(i) + " has a zero-magnitude normal");
    Vec3 n = acc.row(i).transpose() / len;
    Vec3 g = grad_normals.row(i).transpose();
    grad_acc.row(i) = ((g - n * n.dot(g)) / len).transpose();
  }
  Positions grad_v = Positions::Zero(v.rows(), 3);
  for (const Face& f : mesh.faces()) {
    Vec3 a = row(v, f[1]) - row(v, f[0]);
    Vec3 b = row(v, f[2]) - row(v, f[0]);
    Vec3 g = row(grad_acc, f[0]) + row(grad_acc, f[1]) + row(grad_acc, f[2]);
    Vec3 da = b.cross(g);
    Vec3 db = g.cross(a);
    grad_v.row(f[1]) += da.transpose();
    grad_v.row(f[2]) += db.transpose();
    grad_v.row(f[0]) -= (da + db).transpose();
  }
  return grad_v;
}

Positions face_normals(const MeshGraph& mesh) {
  const Positions& v = mesh.vertices();
  Positions out(mesh.face_count(), 3);
  for (int fi = 0; fi < mesh.face_count(); ++fi) {
    const Face& f = mesh.faces()[fi];
    Vec3 c = (row(v, f[1]) - row(v, f[0])).cross(row(v, f[2]) - row(v, f[0]));
    double len = c.norm();
    if (len > 0.0)
      out.row(fi) = (c / len).transpose();
    else
      out.row(fi).setZero();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Icosphere

MeshGraph make_icosphere(int subdivisions) {
  if (subdivisions < 0 || subdivisions > 5)
    throw StructuralError("icosphere subdivisions must be in [0, 5], got " + std::to_string(subdivisions));

  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
  };
  for (Vec3& p : verts) p.normalize();
  std::vector<Face> faces = {
      {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
      {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1},
  };

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::uint64_t, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = edge_key(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      int idx = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const Face& f : faces) {
      int ab = mid(f[0], f[1]);
      int bc = mid(f[1], f[2]);
      int ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }

  Positions p(verts.size(), 3);
  for (size_t i = 0; i < verts.size(); ++i) p.row(i) = verts[i].transpose();
  return MeshGraph(std::move(p), std::move(faces), MeshRole::Template);
}

} // namespace munet
