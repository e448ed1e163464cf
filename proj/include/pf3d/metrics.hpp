#pragma once

// Shape-set evaluation: Chamfer distance between point clouds, coverage and
// minimum matching distance between generated and reference sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pf3d/tetgrid.hpp"

namespace pf3d {

struct PointCloud {
  std::vector<Vec3> points;
  int source_id = -1;
};

struct ChamferOptions {
  bool mean = false;  // average each direction instead of summing
};

// Σ_x min_y ‖x−y‖² + Σ_y min_x ‖x−y‖², exact brute force.
inline double chamfer(std::span<const Vec3> x, std::span<const Vec3> y, ChamferOptions opt = {}) {
  if (x.empty() || y.empty()) throw std::invalid_argument("chamfer: empty point cloud");
  auto one_way = [](std::span<const Vec3> a, std::span<const Vec3> b) {
    double acc = 0.0;
    for (const Vec3& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& q : b) best = std::min(best, (p - q).squaredNorm());
      acc += best;
    }
    return acc;
  };
  double ab = one_way(x, y), ba = one_way(y, x);
  if (opt.mean) {
    ab /= static_cast<double>(x.size());
    ba /= static_cast<double>(y.size());
  }
  return ab + ba;
}

inline double chamfer(const PointCloud& x, const PointCloud& y, ChamferOptions opt = {}) {
  return chamfer(x.points, y.points, opt);
}

// D[g][r] = d(S_g[g], S_r[r]).
using DistanceMatrix = std::vector<std::vector<double>>;

inline DistanceMatrix distance_matrix(std::span<const PointCloud> gen, std::span<const PointCloud> ref,
                                      const std::function<double(const PointCloud&, const PointCloud&)>& d) {
  if (gen.empty()) throw std::invalid_argument("distance_matrix: generated set is empty");
  if (ref.empty()) throw std::invalid_argument("distance_matrix: reference set is empty");
  DistanceMatrix m(gen.size(), std::vector<double>(ref.size()));
  for (std::size_t i = 0; i < gen.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j) m[i][j] = d(gen[i], ref[j]);
  return m;
}

// Percent of references that are the nearest reference of some generated
// shape. Ties resolve to the lowest reference index.
inline double coverage(const DistanceMatrix& d) {
  if (d.empty() || d.front().empty()) throw std::invalid_argument("coverage: empty set");
  std::vector<bool> hit(d.front().size(), false);
  for (const auto& row : d) {
    if (row.size() != hit.size()) throw std::invalid_argument("coverage: ragged distance matrix");
    hit[static_cast<std::size_t>(std::min_element(row.begin(), row.end()) - row.begin())] = true;
  }
  return 100.0 * static_cast<double>(std::count(hit.begin(), hit.end(), true)) / static_cast<double>(hit.size());
}

// Mean over references of the distance to the closest generated shape.
inline double mmd(const DistanceMatrix& d) {
  if (d.empty() || d.front().empty()) throw std::invalid_argument("mmd: empty set");
  const std::size_t nr = d.front().size();
  double acc = 0.0;
  for (std::size_t r = 0; r < nr; ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : d) {
      if (row.size() != nr) throw std::invalid_argument("mmd: ragged distance matrix");
      best = std::min(best, row[r]);
    }
    acc += best;
  }
  return acc / static_cast<double>(nr);
}

using CloudDistance = std::function<double(const PointCloud&, const PointCloud&)>;

inline CloudDistance chamfer_distance(ChamferOptions opt = {}) {
  return [opt](const PointCloud& a, const PointCloud& b) { return chamfer(a, b, opt); };
}

inline double coverage(std::span<const PointCloud> gen, std::span<const PointCloud> ref, const CloudDistance& d) {
  return coverage(distance_matrix(gen, ref, d));
}

inline double mmd(std::span<const PointCloud> gen, std::span<const PointCloud> ref, const CloudDistance& d) {
  return mmd(distance_matrix(gen, ref, d));
}

// Bounding-box centre to the origin, largest extent to 1.
inline SurfaceMesh normalize_bbox(const SurfaceMesh& mesh) {
  if (mesh.vertices.empty()) throw std::invalid_argument("normalize_bbox: empty mesh");
  Vec3 lo = mesh.vertices.front(), hi = lo;
  for (const Vec3& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const double ext = (hi - lo).maxCoeff();
  if (!(ext > 0.0)) throw std::invalid_argument("normalize_bbox: degenerate mesh");
  const Vec3 c = 0.5 * (lo + hi);
  SurfaceMesh out = mesh;
  for (Vec3& v : out.vertices) v = (v - c) / ext;
  return out;
}

struct EvalConfig {
  std::size_t points = 2048;
  std::uint64_t seed = 0;
  ChamferOptions chamfer;
  bool keep_matrix = false;
};

struct EvalReport {
  double cov_cd = 0.0;  // percent
  double mmd_cd = 0.0;  // ×10³
  std::size_t generated = 0;
  std::size_t reference = 0;
  std::vector<std::string> warnings;
  DistanceMatrix matrix;  // filled when requested
};

// The sample seed depends only on the mesh's position in its list, so equal
// meshes at equal positions give identical clouds.
inline std::vector<PointCloud> sample_clouds(std::span<const SurfaceMesh> meshes, const EvalConfig& cfg,
                                             const char* what) {
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    if (meshes[i].empty())
      throw std::invalid_argument(std::string("eval: ") + what + " mesh " + std::to_string(i) + " is empty");
    const SurfaceMesh n = normalize_bbox(meshes[i]);
    out.push_back({sample_surface_points(n, cfg.points, cfg.seed * 1000003ULL + i),
                   static_cast<int>(i)});
  }
  return out;
}

inline EvalReport eval_report(std::span<const SurfaceMesh> generated, std::span<const SurfaceMesh> reference,
                              const EvalConfig& cfg = {}) {
  if (generated.empty()) throw std::invalid_argument("eval: generated mesh list is empty");
  if (reference.empty()) throw std::invalid_argument("eval: reference mesh list is empty");
  const auto gen = sample_clouds(generated, cfg, "generated");
  const auto ref = sample_clouds(reference, cfg, "reference");
  const DistanceMatrix d = distance_matrix(gen, ref, chamfer_distance(cfg.chamfer));
  EvalReport r;
  r.generated = gen.size();
  r.reference = ref.size();
  r.cov_cd = coverage(d);
  r.mmd_cd = 1e3 * mmd(d);
  if (gen.size() != 5 * ref.size())
    r.warnings.push_back("generated set has " + std::to_string(gen.size()) + " shapes; expected 5x the " +
                         std::to_string(ref.size()) + " references");
  if (cfg.keep_matrix) r.matrix = d;
  return r;
}

}  // namespace pf3d
