#pragma once

// Soft rasterizer. Per triangle and pixel the coverage is
//   c = sigmoid(s · dist²(p, nearest edge) / τ),  s = +1 inside, −1 outside,
// in normalized device coordinates. Silhouette is 1 − Π(1 − c); color is an
// over-composite of flat triangle colors sorted front to back. Gradients are
// analytic (first order) w.r.t. vertices, vertex colors and all six camera
// parameters.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include <Eigen/Core>

#include "pf3d/autodiff.hpp"
#include "pf3d/camera.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

using Vec2 = Eigen::Vector2d;

struct RenderOptions {
  Intrinsics intrinsics;
  double tau = 1e-4;
  Vec3 background = Vec3::Ones();
  double facing_floor = 0.05;     // color weight of back-facing triangles
  double facing_softness = 1e-3;  // NDC² scale of the facing sigmoid

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
  void validate() const {
    intrinsics.validate();
    if (!(tau > 0.0)) throw std::invalid_argument("render: tau must be positive");
    if (!(facing_floor > 0.0 && facing_floor <= 1.0)) throw std::invalid_argument("render: facing floor in (0, 1]");
    if (!(facing_softness > 0.0)) throw std::invalid_argument("render: facing softness must be positive");
  }
};

// Channel-major images: color is [3, H, W], mask is [H, W].
struct RenderedPair {
  Tensor color;
  Tensor mask;
};

inline Vec2 pixel_center_ndc(int row, int col, int width, int height) {
  return {2.0 * (col + 0.5) / width - 1.0, 1.0 - 2.0 * (row + 0.5) / height};
}

namespace detail {

inline constexpr double kCoverageCutoff = 40.0;  // logits below −40 are dropped

struct Fragment {
  std::uint32_t tri;
  std::uint8_t edge;  // edge (v[edge], v[edge+1 mod 3]) nearest to the pixel
  double logit;       // s·d²/τ
  double t;           // position of the nearest point along the edge
  Vec2 r;             // pixel − nearest point
};

struct EdgeHit {
  double d2;
  double t;
  Vec2 r;
};

inline EdgeHit nearest_on_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 r = p - (a + t * ab);
  return {r.squaredNorm(), t, r};
}

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Forward state retained for the backward pass.
class Raster {
 public:
  Raster(std::vector<Vec3> verts, std::vector<Vec3> colors, std::vector<Tri> tris, const Camera6D& cam,
         const RenderOptions& opts)
      : verts_(std::move(verts)), colors_(std::move(colors)), tris_(std::move(tris)), cam_(cam), opts_(opts) {
    opts_.validate();
    if (colors_.size() != verts_.size()) throw ShapeError("render: need one color per vertex");
    for (const Vec3& v : verts_)
      if (!v.allFinite()) throw NonFiniteError("render:vertices", -1);
    for (const Tri& t : tris_)
      for (auto i : t)
        if (i >= verts_.size()) throw std::out_of_range("render: triangle index out of range");
    project();
    rasterize();
  }

  int width() const { return opts_.width(); }
  int height() const { return opts_.height(); }

  // [4, H, W]: rgb then mask.
  Tensor image() const {
    const int w = width(), h = height();
    const std::size_t np = static_cast<std::size_t>(w) * h;
    Tensor out(Shape{4, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    std::vector<double> trans;
    for (std::size_t px = 0; px < np; ++px) {
      Vec3 num = Vec3::Zero();
      double den = 0.0, tr = 1.0;
      for (std::size_t k = offsets_[px]; k < offsets_[px + 1]; ++k) {
        const Fragment& f = frags_[k];
        const double c = stable_sigmoid(f.logit);
        const double a = c * tr * facing_[f.tri];
        num += a * tri_color_[f.tri];
        den += a;
        tr *= 1.0 - c;
      }
      num += tr * opts_.background;
      den += tr;
      for (int ch = 0; ch < 3; ++ch) out[ch * np + px] = num[ch] / den;
      out[3 * np + px] = 1.0 - tr;
    }
    return out;
  }

  struct Grads {
    std::vector<Vec3> verts;
    std::vector<Vec3> colors;
    CameraVector camera{};
  };

  Grads backward(std::span<const double> g) const {
    const int w = width(), h = height();
    const std::size_t np = static_cast<std::size_t>(w) * h;
    if (g.size() != 4 * np) throw ShapeError("render backward: gradient size mismatch");
    const double tau = opts_.tau;

    std::vector<Vec2> g_ndc(verts_.size(), Vec2::Zero());
    std::vector<double> g_facing(tris_.size(), 0.0);
    std::vector<Vec3> g_tricol(tris_.size(), Vec3::Zero());
    std::vector<double> tr_before, cov;

    for (std::size_t px = 0; px < np; ++px) {
      const std::size_t b = offsets_[px], e = offsets_[px + 1];
      const Vec3 gC(g[px], g[np + px], g[2 * np + px]);
      const double gM = g[3 * np + px];
      if (gC.isZero(0.0) && gM == 0.0) continue;
      const std::size_t n = e - b;
      tr_before.resize(n);
      cov.resize(n);
      Vec3 num = Vec3::Zero();
      double den = 0.0, tr = 1.0;
      for (std::size_t k = 0; k < n; ++k) {
        const Fragment& f = frags_[b + k];
        const double c = stable_sigmoid(f.logit);
        cov[k] = c;
        tr_before[k] = tr;
        const double a = c * tr * facing_[f.tri];
        num += a * tri_color_[f.tri];
        den += a;
        tr *= 1.0 - c;
      }
      num += tr * opts_.background;
      den += tr;
      const Vec3 color = num / den;
      const Vec3 gN = gC / den;
      const double gD = -gC.dot(color) / den;

      // R is the downstream contribution per unit of transmittance.
      double R = gN.dot(opts_.background) + gD - gM;
      for (std::size_t k = n; k-- > 0;) {
        const Fragment& f = frags_[b + k];
        const double c = cov[k], tb = tr_before[k];
        const double shade = gN.dot(tri_color_[f.tri]) + gD;
        const double et = facing_[f.tri] * shade;
        const double gc = tb * (et - R);
        const double a = c * tb;
        g_facing[f.tri] += a * shade;
        g_tricol[f.tri] += a * facing_[f.tri] * gN;
        R = et * c + (1.0 - c) * R;

        const double dsig = stable_sigmoid(f.logit) * stable_sigmoid(-f.logit);
        const double sgn = f.logit >= 0.0 ? 1.0 : -1.0;
        const double g_d2 = gc * dsig * sgn / tau;
        const Tri& t = tris_[f.tri];
        const std::uint32_t va = t[f.edge], vb = t[(f.edge + 1) % 3];
        g_ndc[va] += g_d2 * (-2.0 * (1.0 - f.t)) * f.r;
        g_ndc[vb] += g_d2 * (-2.0 * f.t) * f.r;
      }
    }

    Grads out;
    out.verts.assign(verts_.size(), Vec3::Zero());
    out.colors.assign(verts_.size(), Vec3::Zero());
    const double fmin = opts_.facing_floor, alpha = opts_.facing_softness;
    for (std::size_t ti = 0; ti < tris_.size(); ++ti) {
      const Tri& t = tris_[ti];
      for (auto v : t) out.colors[v] += g_tricol[ti] / 3.0;
      if (g_facing[ti] == 0.0) continue;
      const double s = area2_[ti] / alpha;
      const double g_area = g_facing[ti] * (1.0 - fmin) * stable_sigmoid(s) * stable_sigmoid(-s) / alpha;
      const Vec2 &q0 = ndc_[t[0]], &q1 = ndc_[t[1]], &q2 = ndc_[t[2]];
      const Vec2 d1(q2.y() - q0.y(), -(q2.x() - q0.x()));
      const Vec2 d2(-(q1.y() - q0.y()), q1.x() - q0.x());
      g_ndc[t[1]] += g_area * d1;
      g_ndc[t[2]] += g_area * d2;
      g_ndc[t[0]] -= g_area * (d1 + d2);
    }

    const Mat3 rot = orbit_rotation(cam_.theta, cam_.phi);
    const Mat3 rt = orbit_rotation_dtheta(cam_.theta, cam_.phi);
    const Mat3 rp = orbit_rotation_dphi(cam_.theta, cam_.phi);
    const double fy = opts_.intrinsics.focal(), fx = fy / opts_.intrinsics.aspect();
    for (std::size_t v = 0; v < verts_.size(); ++v) {
      const Vec2& gq = g_ndc[v];
      if (gq.isZero(0.0)) continue;
      const Vec3& c = cam_pos_[v];
      const double z = -c.z();
      const Vec3 gcam(fx / z * gq.x(), fy / z * gq.y(), (fx * c.x() * gq.x() + fy * c.y() * gq.y()) / (z * z));
      const Vec3 gworld = rot.transpose() * gcam;
      const Vec3 world = cam_.d + cam_.k * verts_[v];
      out.verts[v] = cam_.k * gworld;
      out.camera[kTheta] += gcam.dot(rt * world);
      out.camera[kPhi] += gcam.dot(rp * world);
      out.camera[kScale] += gworld.dot(verts_[v]);
      out.camera[kDx] += gworld.x();
      out.camera[kDy] += gworld.y();
      out.camera[kDz] += gworld.z();
    }
    return out;
  }

  std::size_t fragment_count() const { return frags_.size(); }

 private:
  void project() {
    const Mat3 rot = orbit_rotation(cam_.theta, cam_.phi);
    const double fy = opts_.intrinsics.focal(), fx = fy / opts_.intrinsics.aspect();
    const Vec3 offset(0.0, 0.0, -opts_.intrinsics.orbit_radius);
    ndc_.resize(verts_.size());
    cam_pos_.resize(verts_.size());
    for (std::size_t v = 0; v < verts_.size(); ++v) {
      const Vec3 c = rot * (cam_.d + cam_.k * verts_[v]) + offset;
      cam_pos_[v] = c;
      const double z = -c.z();
      ndc_[v] = Vec2(fx * c.x() / z, fy * c.y() / z);
    }
    const double fmin = opts_.facing_floor, alpha = opts_.facing_softness;
    const std::size_t nt = tris_.size();
    area2_.assign(nt, 0.0);
    facing_.assign(nt, 0.0);
    depth_.assign(nt, 0.0);
    tri_color_.assign(nt, Vec3::Zero());
    visible_.assign(nt, false);
    for (std::size_t ti = 0; ti < nt; ++ti) {
      const Tri& t = tris_[ti];
      bool vis = true;
      for (auto v : t) vis = vis && -cam_pos_[v].z() > opts_.intrinsics.near;
      visible_[ti] = vis;
      if (!vis) continue;
      area2_[ti] = cross2(ndc_[t[1]] - ndc_[t[0]], ndc_[t[2]] - ndc_[t[0]]);
      facing_[ti] = fmin + (1.0 - fmin) * stable_sigmoid(area2_[ti] / alpha);
      depth_[ti] = -(cam_pos_[t[0]].z() + cam_pos_[t[1]].z() + cam_pos_[t[2]].z()) / 3.0;
      tri_color_[ti] = (colors_[t[0]] + colors_[t[1]] + colors_[t[2]]) / 3.0;
    }
  }

  void rasterize() {
    const int w = width(), h = height();
    const double tau = opts_.tau;
    const double margin = std::sqrt(kCoverageCutoff * tau);
    std::vector<std::pair<std::uint32_t, Fragment>> hits;
    for (std::size_t ti = 0; ti < tris_.size(); ++ti) {
      if (!visible_[ti]) continue;
      const Tri& t = tris_[ti];
      const Vec2 q[3] = {ndc_[t[0]], ndc_[t[1]], ndc_[t[2]]};
      const double xmin = std::min({q[0].x(), q[1].x(), q[2].x()}) - margin;
      const double xmax = std::max({q[0].x(), q[1].x(), q[2].x()}) + margin;
      const double ymin = std::min({q[0].y(), q[1].y(), q[2].y()}) - margin;
      const double ymax = std::max({q[0].y(), q[1].y(), q[2].y()}) + margin;
      const int c0 = std::max(0, static_cast<int>(std::ceil((xmin + 1.0) * w / 2.0 - 0.5)));
      const int c1 = std::min(w - 1, static_cast<int>(std::floor((xmax + 1.0) * w / 2.0 - 0.5)));
      const int r0 = std::max(0, static_cast<int>(std::ceil((1.0 - ymax) * h / 2.0 - 0.5)));
      const int r1 = std::min(h - 1, static_cast<int>(std::floor((1.0 - ymin) * h / 2.0 - 0.5)));
      const double area = area2_[ti];
      for (int row = r0; row <= r1; ++row) {
        for (int col = c0; col <= c1; ++col) {
          const Vec2 p = pixel_center_ndc(row, col, w, h);
          EdgeHit best{std::numeric_limits<double>::infinity(), 0.0, Vec2::Zero()};
          std::uint8_t best_edge = 0;
          bool pos = true, neg = true;
          for (std::uint8_t k = 0; k < 3; ++k) {
            const Vec2& a = q[k];
            const Vec2& b = q[(k + 1) % 3];
            const double side = cross2(b - a, p - a);
            pos = pos && side >= 0.0;
            neg = neg && side <= 0.0;
            const EdgeHit hit = nearest_on_segment(p, a, b);
            if (hit.d2 < best.d2) {
              best = hit;
              best_edge = k;
            }
          }
          const bool inside = area != 0.0 && (area > 0.0 ? pos : neg);
          const double logit = (inside ? 1.0 : -1.0) * best.d2 / tau;
          if (logit < -kCoverageCutoff) continue;
          hits.push_back({static_cast<std::uint32_t>(row * w + col),
                          Fragment{static_cast<std::uint32_t>(ti), best_edge, logit, best.t, best.r}});
        }
      }
    }
    const std::size_t np = static_cast<std::size_t>(w) * h;
    offsets_.assign(np + 1, 0);
    for (const auto& hp : hits) ++offsets_[hp.first + 1];
    std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
    frags_.resize(hits.size());
    std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
    for (const auto& hp : hits) frags_[cursor[hp.first]++] = hp.second;
    for (std::size_t px = 0; px < np; ++px) {
      std::sort(frags_.begin() + static_cast<std::ptrdiff_t>(offsets_[px]),
                frags_.begin() + static_cast<std::ptrdiff_t>(offsets_[px + 1]),
                [this](const Fragment& a, const Fragment& b) {
                  if (depth_[a.tri] != depth_[b.tri]) return depth_[a.tri] < depth_[b.tri];
                  return a.tri < b.tri;
                });
    }
  }

  std::vector<Vec3> verts_, colors_;
  std::vector<Tri> tris_;
  Camera6D cam_;
  RenderOptions opts_;

  std::vector<Vec2> ndc_;
  std::vector<Vec3> cam_pos_;
  std::vector<double> area2_, facing_, depth_;
  std::vector<Vec3> tri_color_;
  std::vector<bool> visible_;
  std::vector<Fragment> frags_;
  std::vector<std::size_t> offsets_;
};

}  // namespace detail

inline RenderedPair split_image(const Tensor& image) {
  const std::size_t h = image.shape()[1], w = image.shape()[2], np = h * w;
  auto v = image.data();
  RenderedPair out{Tensor(Shape{3, h, w}, std::vector<double>(v.begin(), v.begin() + 3 * np)),
                   Tensor(Shape{h, w}, std::vector<double>(v.begin() + 3 * np, v.end()))};
  return out;
}

inline RenderedPair render(const SurfaceMesh& mesh, const Camera6D& camera, const RenderOptions& opts) {
  std::vector<Vec3> colors = mesh.colors;
  if (colors.size() != mesh.vertices.size()) colors.assign(mesh.vertices.size(), Vec3::Constant(0.5));
  detail::Raster r(mesh.vertices, std::move(colors), mesh.triangles, camera, opts);
  return split_image(r.image());
}

// Differentiable render. vertices, colors: [M, 3]; camera: [6]. Returns [4, H, W].
// First order only.
inline Var render(const Var& vertices, const Var& colors, const std::vector<Tri>& triangles, const Var& camera,
                  const RenderOptions& opts) {
  if (vertices.shape().size() != 2 || vertices.shape()[1] != 3) throw ShapeError("render: vertices must be [M,3]");
  if (colors.shape() != vertices.shape()) throw ShapeError("render: colors must match vertices");
  if (camera.shape() != Shape{kCameraDims}) throw ShapeError("render: camera must be [6]");
  auto raster = std::make_shared<detail::Raster>(to_points(vertices.value()), to_points(colors.value()), triangles,
                                                 camera_value(camera), opts);
  Tensor img = raster->image();
  return vertices.graph().record(
      "render", std::move(img), {vertices, colors, camera},
      [raster, vertices, colors, camera](const Var&, const Var& g) {
        const auto grads = raster->backward(g.value().data());
        Graph& gr = g.graph();
        Tensor gc(Shape{kCameraDims}, std::vector<double>(grads.camera.begin(), grads.camera.end()));
        return std::vector<Var>{
            gr.record("render_backward", from_points(grads.verts), {g, vertices, colors, camera}, nullptr),
            gr.record("render_backward", from_points(grads.colors), {g, vertices, colors, camera}, nullptr),
            gr.record("render_backward", std::move(gc), {g, vertices, colors, camera}, nullptr)};
      });
}

// Result of rendering a generated shape: image [4, H, W], the shape statistics
// and the camera that was actually used (compensated or not).
struct GeneratedRender {
  Var image;
  DiffStats stats;
  Var camera;
  DiffSurface surface;
};

using SurfaceColorFn = std::function<Var(const DiffSurface&)>;

// extract → stats → optional compensation → render. Throws CollapsedShapeError
// when the surface is empty or degenerate.
inline GeneratedRender render_generated(const TetGrid& grid, const Var& sdf, const Var& positions,
                                        const SurfaceColorFn& color_fn, const Var& camera, const RenderOptions& opts,
                                        bool use_compensation, double c0) {
  GeneratedRender out;
  out.surface = extract_surface(grid, sdf, positions);
  if (out.surface.topology.surface_tets.empty() || out.surface.triangles.empty())
    throw CollapsedShapeError("render_generated: empty surface");
  out.stats = shape_stats(grid, positions, out.surface.topology.surface_tets, c0);
  if (!(out.stats.contraction.item() > kCollapseEps)) throw CollapsedShapeError("render_generated: collapsed shape");
  out.camera = use_compensation ? compensate(camera, out.stats.translation, out.stats.contraction, c0) : camera;
  const Var colors = color_fn(out.surface);
  out.image = render(out.surface.vertices, colors, out.surface.triangles, out.camera, opts);
  return out;
}

}  // namespace pf3d
