#pragma once

// Deformable tetrahedral grid, marching-tetrahedra surface extraction and the
// surface statistics (translation, contraction) used by camera compensation.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pf3d/autodiff.hpp"

namespace pf3d {

using Vec3 = Eigen::Vector3d;
using Tri = std::array<std::uint32_t, 3>;
using Tet = std::array<std::uint32_t, 4>;

inline constexpr double kDegenerateArea = 1e-12;
inline constexpr double kCollapseEps = 1e-9;

struct CubeBounds {
  Vec3 lo{-1.0, -1.0, -1.0};
  Vec3 hi{1.0, 1.0, 1.0};

  static CubeBounds symmetric(double half_width) {
    return {Vec3::Constant(-half_width), Vec3::Constant(half_width)};
  }
  Vec3 size() const { return hi - lo; }
  double volume() const { return size().prod(); }
};

struct TetGrid {
  int resolution = 0;
  CubeBounds extent;
  std::vector<Vec3> vertices;
  std::vector<Tet> tets;
  // Unique undirected grid edges (a < b), shared by the SDF regularizer.
  std::vector<std::array<std::uint32_t, 2>> edges;

  double cell_width() const { return extent.size().maxCoeff() / resolution; }
  // Deformation clamp: half a cell.
  double max_deformation() const { return 0.5 * extent.size().minCoeff() / resolution; }
  std::size_t vertex_count() const { return vertices.size(); }
};

struct FieldSample {
  std::vector<double> sdf;
  std::vector<Vec3> deformation;
};

struct SurfaceMesh {
  std::vector<Vec3> vertices;
  std::vector<Tri> triangles;
  std::vector<Vec3> colors;  // empty or one per vertex, in [0,1]

  bool empty() const { return triangles.empty(); }
};

struct ShapeStats {
  Vec3 translation = Vec3::Zero();  // Δd
  double contraction = 0.0;         // Δk
  std::size_t surface_tets = 0;     // |T|
};

class CollapsedShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double signed_tet_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

// Regular grid split into six tetrahedra per cube along the main diagonal
// (Kuhn/Freudenthal split, conforming across neighbouring cubes).
inline TetGrid build_grid(int resolution, const CubeBounds& extent) {
  if (resolution < 1) throw std::invalid_argument("build_grid: resolution must be >= 1");
  if ((extent.hi - extent.lo).minCoeff() <= 0.0 || !extent.lo.allFinite() || !extent.hi.allFinite())
    throw std::invalid_argument("build_grid: degenerate extent");

  TetGrid g;
  g.resolution = resolution;
  g.extent = extent;
  const std::uint32_t n = static_cast<std::uint32_t>(resolution) + 1;
  const Vec3 step = extent.size() / resolution;
  g.vertices.reserve(std::size_t(n) * n * n);
  for (std::uint32_t k = 0; k < n; ++k)
    for (std::uint32_t j = 0; j < n; ++j)
      for (std::uint32_t i = 0; i < n; ++i)
        g.vertices.push_back(extent.lo + Vec3(i * step.x(), j * step.y(), k * step.z()));

  auto vid = [n](std::uint32_t i, std::uint32_t j, std::uint32_t k) { return i + n * (j + n * k); };
  static constexpr std::array<std::array<int, 3>, 6> kAxisOrders = {
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

  g.tets.reserve(std::size_t(6) * resolution * resolution * resolution);
  const auto r = static_cast<std::uint32_t>(resolution);
  for (std::uint32_t k = 0; k < r; ++k)
    for (std::uint32_t j = 0; j < r; ++j)
      for (std::uint32_t i = 0; i < r; ++i)
        for (const auto& order : kAxisOrders) {
          std::array<std::uint32_t, 3> c{i, j, k};
          Tet t;
          t[0] = vid(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            ++c[order[s]];
            t[s + 1] = vid(c[0], c[1], c[2]);
          }
          if (signed_tet_volume(g.vertices[t[0]], g.vertices[t[1]], g.vertices[t[2]], g.vertices[t[3]]) < 0.0)
            std::swap(t[2], t[3]);
          g.tets.push_back(t);
        }

  std::vector<std::array<std::uint32_t, 2>> edges;
  edges.reserve(g.tets.size() * 6);
  for (const Tet& t : g.tets)
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) edges.push_back({std::min(t[a], t[b]), std::max(t[a], t[b])});
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  g.edges = std::move(edges);
  return g;
}

// Exact zeros count as outside.
inline bool is_inside(double s) { return s < 0.0; }

// Sign-pattern topology of the zero level set. Independent of the deformed
// positions except for triangle orientation.
struct SurfaceTopology {
  std::vector<std::array<std::uint32_t, 2>> crossing_edges;  // one output vertex each
  std::vector<Tri> triangles;                                 // indices into crossing_edges
  std::vector<std::uint32_t> surface_tets;                    // T
};

// Triangulates the zero crossing of every tet with mixed signs. Triangles are
// oriented with normals pointing from the inside (s < 0) toward the outside,
// judged with `positions` (deformed grid coordinates).
inline SurfaceTopology extract_topology(const TetGrid& grid, std::span<const double> sdf, std::span<const Vec3> positions) {
  if (sdf.size() != grid.vertices.size() || positions.size() != grid.vertices.size())
    throw ShapeError("extract_topology: field size does not match grid");
  for (double s : sdf)
    if (!std::isfinite(s)) throw NonFiniteError("extract_surface:sdf", -1);

  SurfaceTopology topo;
  std::unordered_map<std::uint64_t, std::uint32_t> edge_ids;
  auto edge_vertex = [&](std::uint32_t a, std::uint32_t b) {
    const std::uint32_t lo = std::min(a, b), hi = std::max(a, b);
    const std::uint64_t key = (std::uint64_t(lo) << 32) | hi;
    auto [it, inserted] = edge_ids.try_emplace(key, static_cast<std::uint32_t>(topo.crossing_edges.size()));
    if (inserted) topo.crossing_edges.push_back({lo, hi});
    return it->second;
  };

  for (std::uint32_t ti = 0; ti < grid.tets.size(); ++ti) {
    const Tet& t = grid.tets[ti];
    std::array<int, 4> in_ids{}, out_ids{};
    int n_in = 0, n_out = 0;
    for (int c = 0; c < 4; ++c) {
      if (is_inside(sdf[t[c]]))
        in_ids[n_in++] = c;
      else
        out_ids[n_out++] = c;
    }
    if (n_in == 0 || n_out == 0) continue;
    topo.surface_tets.push_back(ti);

    Vec3 in_mean = Vec3::Zero(), out_mean = Vec3::Zero();
    for (int c = 0; c < n_in; ++c) in_mean += positions[t[in_ids[c]]];
    for (int c = 0; c < n_out; ++c) out_mean += positions[t[out_ids[c]]];
    const Vec3 outward = out_mean / n_out - in_mean / n_in;

    auto emit = [&](std::uint32_t e0, std::uint32_t e1, std::uint32_t e2) {
      auto mid = [&](std::uint32_t e) {
        const auto& ed = topo.crossing_edges[e];
        return 0.5 * (positions[ed[0]] + positions[ed[1]]);
      };
      const Vec3 n = (mid(e1) - mid(e0)).cross(mid(e2) - mid(e0));
      if (n.dot(outward) < 0.0) std::swap(e1, e2);
      topo.triangles.push_back({e0, e1, e2});
    };

    if (n_in == 1 || n_out == 1) {
      const bool lone_inside = n_in == 1;
      const int lone = lone_inside ? in_ids[0] : out_ids[0];
      const auto& others = lone_inside ? out_ids : in_ids;
      emit(edge_vertex(t[lone], t[others[0]]), edge_vertex(t[lone], t[others[1]]),
           edge_vertex(t[lone], t[others[2]]));
    } else {
      const std::uint32_t a = t[in_ids[0]], b = t[in_ids[1]], c = t[out_ids[0]], d = t[out_ids[1]];
      // Quad ac-ad-bd-bc, split along ac-bd.
      const std::uint32_t ac = edge_vertex(a, c), ad = edge_vertex(a, d), bd = edge_vertex(b, d),
                          bc = edge_vertex(b, c);
      emit(ac, ad, bd);
      emit(ac, bd, bc);
    }
  }
  return topo;
}

// Deformed coordinates p = v + Δv.
inline std::vector<Vec3> deformed_positions(const TetGrid& grid, const FieldSample& fields) {
  if (fields.deformation.size() != grid.vertices.size()) throw ShapeError("deformed_positions: size mismatch");
  std::vector<Vec3> p(grid.vertices.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = grid.vertices[i] + fields.deformation[i];
  return p;
}

// Zero crossing on edge (a,b): (s_b p_a - s_a p_b) / (s_b - s_a).
inline Vec3 edge_crossing(const Vec3& pa, const Vec3& pb, double sa, double sb) {
  return (sb * pa - sa * pb) / (sb - sa);
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * (b - a).cross(c - a).norm(); }

struct Extraction {
  SurfaceMesh mesh;
  std::vector<std::uint32_t> surface_tets;
};

// Plain (non-differentiable) marching tetrahedra. Optional per-grid-vertex
// colors are interpolated with the same edge weights as positions.
inline Extraction extract_surface(const TetGrid& grid, const FieldSample& fields,
                                  std::span<const Vec3> vertex_colors = {}) {
  if (fields.sdf.size() != grid.vertices.size()) throw ShapeError("extract_surface: sdf size does not match grid");
  for (const Vec3& d : fields.deformation)
    if (!d.allFinite()) throw NonFiniteError("extract_surface:deformation", -1);
  const std::vector<Vec3> pos = deformed_positions(grid, fields);
  SurfaceTopology topo = extract_topology(grid, fields.sdf, pos);

  Extraction ex;
  ex.surface_tets = std::move(topo.surface_tets);
  auto& m = ex.mesh;
  m.vertices.reserve(topo.crossing_edges.size());
  for (const auto& [a, b] : topo.crossing_edges) m.vertices.push_back(edge_crossing(pos[a], pos[b], fields.sdf[a], fields.sdf[b]));
  if (!vertex_colors.empty()) {
    if (vertex_colors.size() != grid.vertices.size()) throw ShapeError("extract_surface: color size does not match grid");
    for (const auto& [a, b] : topo.crossing_edges)
      m.colors.push_back(edge_crossing(vertex_colors[a], vertex_colors[b], fields.sdf[a], fields.sdf[b]));
  }
  for (const Tri& t : topo.triangles)
    if (triangle_area(m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]) >= kDegenerateArea) m.triangles.push_back(t);
  return ex;
}

// Centroid of each surface tet from deformed positions.
inline std::vector<Vec3> surface_tet_centroids(const TetGrid& grid, std::span<const Vec3> positions,
                                               std::span<const std::uint32_t> surface_tets) {
  std::vector<Vec3> c;
  c.reserve(surface_tets.size());
  for (std::uint32_t ti : surface_tets) {
    const Tet& t = grid.tets.at(ti);
    c.push_back(0.25 * (positions[t[0]] + positions[t[1]] + positions[t[2]] + positions[t[3]]));
  }
  return c;
}

// Δd = mean centroid; Δk = Σ‖centroid − Δd‖ / (c0 |T|).
inline ShapeStats stats_from_centroids(std::span<const Vec3> centroids, double c0) {
  if (!(c0 > 0.0)) throw std::invalid_argument("shape_stats: c0 must be positive");
  if (centroids.empty()) throw CollapsedShapeError("shape_stats: empty surface (collapsed shape)");
  ShapeStats s;
  s.surface_tets = centroids.size();
  for (const Vec3& c : centroids) s.translation += c;
  s.translation /= static_cast<double>(centroids.size());
  double acc = 0.0;
  for (const Vec3& c : centroids) acc += (c - s.translation).norm();
  s.contraction = acc / (c0 * static_cast<double>(centroids.size()));
  return s;
}

inline ShapeStats shape_stats(const TetGrid& grid, std::span<const Vec3> positions,
                              std::span<const std::uint32_t> surface_tets, double c0) {
  const auto c = surface_tet_centroids(grid, positions, surface_tets);
  return stats_from_centroids(c, c0);
}

// p -> (p − Δd)·(c0/Δk)
inline Vec3 normalize_point(const Vec3& p, const ShapeStats& stats, double c0) {
  return (p - stats.translation) * (c0 / stats.contraction);
}

inline SurfaceMesh normalize_shape(const SurfaceMesh& mesh, const ShapeStats& stats, double c0) {
  if (!(stats.contraction > kCollapseEps)) throw CollapsedShapeError("normalize_shape: contraction too small");
  SurfaceMesh out = mesh;
  for (Vec3& v : out.vertices) v = normalize_point(v, stats, c0);
  return out;
}

// Area-uniform surface samples; deterministic per seed.
inline std::vector<Vec3> sample_surface_points(const SurfaceMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.triangles.empty()) throw std::invalid_argument("sample_surface_points: empty mesh");
  if (n == 0) throw std::invalid_argument("sample_surface_points: n must be >= 1");
  std::vector<double> cdf(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const Tri& t = mesh.triangles[i];
    total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
    cdf[i] = total;
  }
  if (!(total > 0.0)) throw std::invalid_argument("sample_surface_points: zero-area mesh");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double pick = u01(rng) * total;
    std::size_t i = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), pick) - cdf.begin());
    i = std::min(i, cdf.size() - 1);
    const Tri& t = mesh.triangles[i];
    const double r1 = std::sqrt(u01(rng)), r2 = u01(rng);
    pts.push_back((1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                  r1 * r2 * mesh.vertices[t[2]]);
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Differentiable counterparts
// ---------------------------------------------------------------------------

// Rows of an [N,3] tensor as Vec3.
inline std::vector<Vec3> to_points(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("to_points: expected [N,3], got " + shape_str(t.shape()));
  std::vector<Vec3> p(t.dim(0));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = Vec3(t[3 * i], t[3 * i + 1], t[3 * i + 2]);
  return p;
}

inline Tensor from_points(std::span<const Vec3> pts) {
  Tensor t(Shape{pts.size(), 3});
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int c = 0; c < 3; ++c) t[3 * i + c] = pts[i][c];
  return t;
}

struct DiffSurface {
  SurfaceTopology topology;
  std::vector<Tri> triangles;  // non-degenerate subset of topology.triangles
  Var vertices;                // [M,3], differentiable w.r.t. sdf and positions
  Var weight_a;                // [M,3] interpolation weights, reused for colors
  Var weight_b;
  bool empty() const { return triangles.empty(); }
};

// Differentiable marching tetrahedra. `sdf` is [V], `positions` [V,3] deformed.
inline DiffSurface extract_surface(const TetGrid& grid, const Var& sdf, const Var& positions) {
  if (sdf.shape() != Shape{grid.vertices.size()}) throw ShapeError("extract_surface: sdf must be [V]");
  if (positions.shape() != Shape{grid.vertices.size(), 3}) throw ShapeError("extract_surface: positions must be [V,3]");
  DiffSurface out;
  const std::vector<Vec3> pos = to_points(positions.value());
  out.topology = extract_topology(grid, sdf.value().data(), pos);
  const auto& edges = out.topology.crossing_edges;
  if (edges.empty()) {
    Graph& g = sdf.graph();
    out.vertices = out.weight_a = out.weight_b = g.constant(Tensor(Shape{0, 3}));
    return out;
  }

  std::vector<std::size_t> ia, ib, sa3, sb3;
  for (const auto& [a, b] : edges) {
    ia.push_back(a);
    ib.push_back(b);
    for (int c = 0; c < 3; ++c) {
      sa3.push_back(a);
      sb3.push_back(b);
    }
  }
  const std::size_t m = edges.size();
  Var sa = gather(sdf, make_index(std::move(sa3)), Shape{m, 3});
  Var sb = gather(sdf, make_index(std::move(sb3)), Shape{m, 3});
  Var denom = sb - sa;
  out.weight_a = sb / denom;
  out.weight_b = neg(sa) / denom;
  Var pa = gather_rows(positions, make_index(std::move(ia)));
  Var pb = gather_rows(positions, make_index(std::move(ib)));
  out.vertices = out.weight_a * pa + out.weight_b * pb;

  const Tensor& vv = out.vertices.value();
  for (const Tri& t : out.topology.triangles) {
    const Vec3 a(vv[3 * t[0]], vv[3 * t[0] + 1], vv[3 * t[0] + 2]);
    const Vec3 b(vv[3 * t[1]], vv[3 * t[1] + 1], vv[3 * t[1] + 2]);
    const Vec3 c(vv[3 * t[2]], vv[3 * t[2] + 1], vv[3 * t[2] + 2]);
    if (triangle_area(a, b, c) >= kDegenerateArea) out.triangles.push_back(t);
  }
  return out;
}

// Per-surface-vertex values interpolated from a per-grid-vertex [V,3] field.
inline Var interpolate_on_surface(const DiffSurface& surf, const Var& grid_values) {
  std::vector<std::size_t> ia, ib;
  for (const auto& [a, b] : surf.topology.crossing_edges) {
    ia.push_back(a);
    ib.push_back(b);
  }
  Var va = gather_rows(grid_values, make_index(std::move(ia)));
  Var vb = gather_rows(grid_values, make_index(std::move(ib)));
  return surf.weight_a * va + surf.weight_b * vb;
}

struct DiffStats {
  Var translation;  // [3]
  Var contraction;  // scalar
  std::size_t surface_tets = 0;

  ShapeStats value() const {
    const Tensor& t = translation.value();
    return {Vec3(t[0], t[1], t[2]), contraction.item(), surface_tets};
  }
};

inline DiffStats shape_stats(const TetGrid& grid, const Var& positions, std::span<const std::uint32_t> surface_tets,
                             double c0) {
  if (!(c0 > 0.0)) throw std::invalid_argument("shape_stats: c0 must be positive");
  if (surface_tets.empty()) throw CollapsedShapeError("shape_stats: empty surface (collapsed shape)");
  std::array<std::vector<std::size_t>, 4> corner;
  for (std::uint32_t ti : surface_tets)
    for (int c = 0; c < 4; ++c) corner[c].push_back(grid.tets.at(ti)[c]);
  Var sum4 = gather_rows(positions, make_index(corner[0]));
  for (int c = 1; c < 4; ++c) sum4 = sum4 + gather_rows(positions, make_index(corner[c]));
  Var centroids = scale(sum4, 0.25);
  const double n = static_cast<double>(surface_tets.size());
  DiffStats s;
  s.surface_tets = surface_tets.size();
  s.translation = scale(sum_to(centroids, Shape{3}), 1.0 / n);
  s.contraction = scale(sum(row_norm(centroids - s.translation)), 1.0 / (c0 * n));
  return s;
}

}  // namespace pf3d
