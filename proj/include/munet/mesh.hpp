#pragma once

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SparseCore>

namespace munet {

using Vec3 = Eigen::Vector3d;
/// One row per vertex.
using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Face = std::array<int, 3>;
/// Unordered vertex pair stored with first < second.
using Edge = std::array<int, 2>;

enum class MeshRole { Template, Body, Clothed, GroundTruth };

std::string_view to_string(MeshRole role);

/// Connectivity shared by every mesh deformed from the same template.
/// Edges are deduplicated and sorted lexicographically, so the ordering is
/// a pure function of the face list.
struct Topology {
  int vertex_count = 0;
  std::vector<Face> faces;
  std::vector<Edge> edges;

  static std::shared_ptr<const Topology> from_faces(int vertex_count, std::vector<Face> faces);

  /// Index of edge (a, b) in `edges`, or -1.
  int find_edge(int a, int b) const;
};

/// Triangular graph: positions over a shared, immutable topology.
class MeshGraph {
public:
  MeshGraph() = default;
  MeshGraph(Positions vertices, std::vector<Face> faces, MeshRole role = MeshRole::Template);
  MeshGraph(Positions vertices, std::shared_ptr<const Topology> topology,
            MeshRole role = MeshRole::Template);

  const Positions& vertices() const { return vertices_; }
  const std::vector<Face>& faces() const { return topology_->faces; }
  const std::vector<Edge>& edges() const { return topology_->edges; }
  const std::shared_ptr<const Topology>& topology() const { return topology_; }
  MeshRole role() const { return role_; }

  int vertex_count() const { return static_cast<int>(vertices_.rows()); }
  int face_count() const { return static_cast<int>(topology_->faces.size()); }
  int edge_count() const { return static_cast<int>(topology_->edges.size()); }
  bool empty() const { return vertices_.rows() == 0 || topology_->faces.empty(); }

  /// Same topology (shared, not copied), new positions.
  MeshGraph with_vertices(Positions vertices, MeshRole role) const;
  MeshGraph with_vertices(Positions vertices) const { return with_vertices(std::move(vertices), role_); }

  /// Reversed winding on every face; edge set unchanged.
  MeshGraph flipped() const;

  bool same_topology(const MeshGraph& other) const;

private:
  Positions vertices_;
  std::shared_ptr<const Topology> topology_ = Topology::from_faces(0, {});
  MeshRole role_ = MeshRole::Template;
};

/// Four neighbours per edge. For edge (a, b):
///   (e1, e2) are the remaining edges of the face holding the directed
///   half-edge a->b, in winding order after it (b->c, then c->a);
///   (e3, e4) likewise for the face holding b->a (a->d, then d->b).
struct EdgeAdjacency {
  std::vector<std::array<int, 4>> neighbors;
  /// The two faces incident to each edge, in the same first/second order.
  std::vector<std::array<int, 2>> faces;
};

struct Violation {
  enum class Kind { BoundaryEdge, NonManifoldEdge, InconsistentWinding, DegenerateFace };
  Kind kind;
  std::vector<int> indices;
};

std::string_view to_string(Violation::Kind kind);

struct ValidationReport {
  std::vector<Violation> violations;
  bool pass() const { return violations.empty(); }
  std::string to_json() const;
};

MeshGraph load_obj(std::string_view text);
std::string write_obj(const MeshGraph& mesh);
MeshGraph read_obj_file(const std::string& path);
void write_obj_file(const MeshGraph& mesh, const std::string& path);

ValidationReport validate_manifold(const MeshGraph& mesh);

/// Throws StructuralError naming the first boundary or non-manifold edge.
EdgeAdjacency build_edge_adjacency(const MeshGraph& mesh);

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Row-stochastic averaging operator: 1/(deg(i)+1) on the 1-ring and the diagonal.
SparseRowMatrix build_vertex_adjacency(const MeshGraph& mesh);

/// Area-weighted unit vertex normals. Throws DegenerateGeometryError when the
/// accumulated normal of a vertex vanishes.
Positions vertex_normals(const MeshGraph& mesh);

/// Vector-Jacobian product of vertex_normals: maps dL/dN to dL/dV.
Positions vertex_normals_backward(const MeshGraph& mesh, const Positions& grad_normals);

/// Unit face normals (zero vector for zero-area faces).
Positions face_normals(const MeshGraph& mesh);

/// Subdivided icosahedron projected onto the unit sphere, subdivisions in [0, 5].
MeshGraph make_icosphere(int subdivisions);

/// Incident-edge lists per vertex, derived from the edge list.
std::vector<std::vector<int>> vertex_edges(const MeshGraph& mesh);

} // namespace munet
