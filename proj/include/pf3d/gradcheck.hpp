#pragma once

// Finite-difference suites over the autodiff primitives, surface extraction
// and statistics, and render-through-camera pipelines. Shared by the
// grad-check command and the test suite.

#include <random>
#include <string>
#include <vector>

#include "pf3d/autodiff.hpp"
#include "pf3d/camera.hpp"
#include "pf3d/render.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

struct GradCheckResult {
  std::string suite;
  std::string name;
  double max_error = 0.0;  // worst over all points
  double threshold = 0.0;
  int points = 0;
  bool pass() const { return max_error < threshold; }
};

namespace detail {

inline Tensor uniform_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace detail

inline std::vector<GradCheckResult> primitive_suite(int points = 10, std::uint64_t seed = 1) {
  auto gi = make_index({2, 0, 5, 5, 1});
  auto rows = make_index({1, 0, 1});
  const std::vector<std::pair<std::string, ScalarFn>> cases = {
      {"add", [](Graph&, const NamedVars& in) { return sum(square(in.at("a") + in.at("b"))); }},
      {"sub", [](Graph&, const NamedVars& in) { return sum(square(in.at("a") - in.at("b"))); }},
      {"mul", [](Graph&, const NamedVars& in) { return sum(in.at("a") * in.at("b")); }},
      {"div", [](Graph&, const NamedVars& in) { return sum(in.at("a") / (square(in.at("b")) + 1.0)); }},
      {"neg", [](Graph&, const NamedVars& in) { return sum(square(neg(in.at("a")) + in.at("b"))); }},
      {"scale", [](Graph&, const NamedVars& in) { return sum(square(scale(in.at("a"), -2.5))); }},
      {"add_scalar", [](Graph&, const NamedVars& in) { return sum(square(in.at("a") + 0.7)); }},
      {"exp", [](Graph&, const NamedVars& in) { return sum(exp(in.at("a"))); }},
      {"log", [](Graph&, const NamedVars& in) { return sum(log(square(in.at("a")) + 0.5)); }},
      {"sigmoid", [](Graph&, const NamedVars& in) { return sum(sigmoid(in.at("a") * 3.0)); }},
      {"softplus", [](Graph&, const NamedVars& in) { return sum(softplus(in.at("a") * 3.0)); }},
      {"tanh", [](Graph&, const NamedVars& in) { return sum(tanh(in.at("a") * 2.0)); }},
      {"sin", [](Graph&, const NamedVars& in) { return sum(sin(in.at("a") * 2.0)); }},
      {"cos", [](Graph&, const NamedVars& in) { return sum(cos(in.at("a") * 2.0)); }},
      {"square", [](Graph&, const NamedVars& in) { return sum(square(in.at("a")) * in.at("b")); }},
      {"abs", [](Graph&, const NamedVars& in) { return sum(abs(in.at("a")) * in.at("b")); }},
      {"leaky_relu", [](Graph&, const NamedVars& in) { return sum(leaky_relu(in.at("a"), 0.2) * in.at("b")); }},
      {"maximum", [](Graph&, const NamedVars& in) { return sum(square(maximum(in.at("a"), in.at("b")))); }},
      {"matmul", [](Graph&, const NamedVars& in) { return sum(square(matmul(in.at("a"), transpose(in.at("b"))))); }},
      {"transpose", [](Graph&, const NamedVars& in) { return sum(square(transpose(in.at("a"))) * transpose(in.at("b"))); }},
      {"sum", [](Graph&, const NamedVars& in) { return square(sum(in.at("a"))); }},
      {"mean", [](Graph&, const NamedVars& in) { return square(mean(in.at("a") * in.at("b"))); }},
      {"reshape", [](Graph&, const NamedVars& in) { return sum(square(reshape(in.at("a"), Shape{3, 2})) * reshape(in.at("b"), Shape{3, 2})); }},
      {"broadcast_to", [](Graph&, const NamedVars& in) {
         return sum(square(in.at("a") * broadcast_to(reshape(in.at("c"), Shape{3}), Shape{2, 3})));
       }},
      {"sum_to", [](Graph&, const NamedVars& in) { return sum(square(sum_to(in.at("a") * in.at("b"), Shape{3}))); }},
      {"gather", [gi](Graph&, const NamedVars& in) { return sum(square(gather(in.at("a"), gi, Shape{5}))); }},
      {"scatter_add", [gi](Graph&, const NamedVars& in) {
         return sum(square(scatter_add(reshape(slice_rows(reshape(in.at("a"), Shape{6}), 0, 5), Shape{5}), gi, Shape{6})));
       }},
      {"gather_rows", [rows](Graph&, const NamedVars& in) { return sum(square(gather_rows(in.at("a"), rows))); }},
      {"scatter_rows_add", [rows](Graph&, const NamedVars& in) {
         return sum(square(scatter_rows_add(concat({in.at("a"), in.at("c")}), rows, 2)));
       }},
      {"slice_rows", [](Graph&, const NamedVars& in) { return sum(square(slice_rows(in.at("a"), 1, 2)) * in.at("c")); }},
      {"concat", [](Graph&, const NamedVars& in) {
         return sum(square(gather_rows(concat({in.at("a"), in.at("b")}), make_index({3, 0, 0}))));
       }},
      {"row_norm", [](Graph&, const NamedVars& in) { return sum(row_norm(in.at("a"))); }},
      {"norm", [](Graph&, const NamedVars& in) { return norm(in.at("a") - in.at("b")); }},
  };
  std::vector<GradCheckResult> out;
  for (const auto& [name, fn] : cases) {
    GradCheckResult r{"primitives", name, 0.0, 1e-6, points};
    std::mt19937_64 rng(seed);
    for (int p = 0; p < points; ++p) {
      NamedTensors point{{"a", detail::uniform_tensor(rng, {2, 3}, -1.0, 1.0)},
                         {"b", detail::uniform_tensor(rng, {2, 3}, -1.0, 1.0)},
                         {"c", detail::uniform_tensor(rng, {1, 3}, -1.0, 1.0)}};
      r.max_error = std::max(r.max_error, finite_diff_check(fn, point, 1e-6));
    }
    out.push_back(r);
  }
  return out;
}

// Random SDF and deformation on a small grid. SDF values are kept away from
// zero so a finite-difference step never changes the topology.
inline FieldSample random_field_sample(const TetGrid& g, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> n(-0.15, 0.15);
  FieldSample f;
  for (const Vec3& v : g.vertices) {
    double s = v.norm() - 0.6 + n(rng);
    if (std::abs(s) < 1e-3) s = s < 0.0 ? -1e-3 : 1e-3;
    f.sdf.push_back(s);
    f.deformation.push_back(0.5 * g.max_deformation() * Vec3(n(rng), n(rng), n(rng)) / 0.15);
  }
  return f;
}

inline std::vector<GradCheckResult> geometry_suite(int points = 3, std::uint64_t seed = 2) {
  const TetGrid g = build_grid(4, CubeBounds{});
  GradCheckResult surf{"geometry", "extract_surface", 0.0, 1e-5, points};
  GradCheckResult stats{"geometry", "shape_stats", 0.0, 1e-5, points};
  std::mt19937_64 rng(seed);
  const Tensor base = from_points(g.vertices);
  for (int p = 0; p < points; ++p) {
    const FieldSample f = random_field_sample(g, rng);
    const auto topo = extract_surface(g, f).surface_tets;
    ScalarFn surface_fn = [&](Graph& gr, const NamedVars& in) {
      const Var pos = gr.constant(base) + in.at("dv");
      const auto s = extract_surface(g, in.at("sdf"), pos);
      return sum(square(s.vertices)) + sum(sin(s.vertices * 3.0));
    };
    ScalarFn stats_fn = [&](Graph& gr, const NamedVars& in) {
      const Var pos = gr.constant(base) + in.at("dv");
      const auto st = shape_stats(g, pos, topo, 1.0);
      return st.contraction + sum(square(st.translation));
    };
    NamedTensors point{{"sdf", Tensor::vector(f.sdf)}, {"dv", from_points(f.deformation)}};
    surf.max_error = std::max(surf.max_error, finite_diff_check(surface_fn, point, 1e-6));
    stats.max_error = std::max(stats.max_error, finite_diff_check(stats_fn, point, 1e-6));
  }
  return {surf, stats};
}

// An octahedron (8 triangles) plus two separate loose triangles, colored per
// vertex.
inline SurfaceMesh gradcheck_scene(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> j(-0.08, 0.08), c(0.1, 0.9);
  SurfaceMesh m;
  m.vertices = {Vec3(0.8, 0, 0), Vec3(-0.8, 0, 0), Vec3(0, 0.8, 0), Vec3(0, -0.8, 0), Vec3(0, 0, 0.8), Vec3(0, 0, -0.8),
                Vec3(0.9, 0.7, 0.3), Vec3(1.2, 0.9, 0.1), Vec3(0.8, 1.1, 0.2),
                Vec3(-0.9, -0.6, 0.4), Vec3(-1.2, -0.8, 0.6), Vec3(-0.7, -1.0, 0.5)};
  for (Vec3& v : m.vertices) v += Vec3(j(rng), j(rng), j(rng));
  m.triangles = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4}, {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}, {6, 7, 8}, {9, 11, 10}};
  for (std::size_t i = 0; i < m.vertices.size(); ++i) m.colors.emplace_back(c(rng), c(rng), c(rng));
  return m;
}

inline std::vector<GradCheckResult> render_suite(int points = 2, std::uint64_t seed = 3) {
  std::vector<GradCheckResult> out;
  std::mt19937_64 rng(seed);
  for (double tau : {1e-2, 1e-3, 1e-4}) {
    GradCheckResult direct{"render", "render_camera_tau" + std::to_string(static_cast<int>(std::round(-std::log10(tau)))),
                           0.0, 1e-3, points};
    GradCheckResult decoded{"render", "decode_sample_render_tau" + std::to_string(static_cast<int>(std::round(-std::log10(tau)))),
                            0.0, 1e-3, points};
    GradCheckResult comp{"render", "compensate_render_tau" + std::to_string(static_cast<int>(std::round(-std::log10(tau)))),
                         0.0, 1e-3, points};
    RenderOptions opts;
    opts.intrinsics.width = opts.intrinsics.height = 16;
    opts.tau = tau;
    for (int p = 0; p < points; ++p) {
      const SurfaceMesh m = gradcheck_scene(rng);
      const Tensor w = detail::uniform_tensor(rng, {4 * 16 * 16}, -1.0, 1.0);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      auto weighted = [w](Graph& g, const Var& img) { return sum(reshape(img, Shape{img.numel()}) * g.constant(w)); };

      Tensor cam(Shape{6}, std::vector<double>{0.4 + 0.3 * u(rng), 1.3 + 0.2 * u(rng), 1.1, 0.05 * u(rng), 0.05 * u(rng),
                                               0.05 * u(rng)});
      ScalarFn fd = [&](Graph& g, const NamedVars& in) {
        return weighted(g, render(in.at("v"), in.at("c"), m.triangles, in.at("cam"), opts));
      };
      direct.max_error = std::max(direct.max_error,
                                  finite_diff_check(fd, {{"v", from_points(m.vertices)}, {"c", from_points(m.colors)}, {"cam", cam}}, 1e-7));

      // raw 12-vector -> decoded Gaussian -> reparameterized camera -> image
      CameraPoseDistribution init = initial_camera_distribution();
      init.mean[kPhi] = 1.3;
      const std::array<double, 6> eps{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
      ScalarFn fdec = [&](Graph& g, const NamedVars& in) {
        const Var c = sample_camera(decode_distribution(in.at("raw"), init), eps);
        return weighted(g, render(g.constant(from_points(m.vertices)), g.constant(from_points(m.colors)), m.triangles, c, opts));
      };
      decoded.max_error = std::max(decoded.max_error,
                                   finite_diff_check(fdec, {{"raw", detail::uniform_tensor(rng, {12}, -0.1, 0.1)}}, 1e-7));

      ScalarFn fcomp = [&](Graph& g, const NamedVars& in) {
        const Var c = compensate(in.at("cam"), in.at("t"), reshape(in.at("k"), Shape{}), 1.0);
        return weighted(g, render(in.at("v"), g.constant(from_points(m.colors)), m.triangles, c, opts));
      };
      NamedTensors pc{{"cam", cam},
                      {"t", detail::uniform_tensor(rng, {3}, -0.05, 0.05)},
                      {"k", detail::uniform_tensor(rng, {1}, 0.9, 1.1)},
                      {"v", from_points(m.vertices)}};
      comp.max_error = std::max(comp.max_error, finite_diff_check(fcomp, pc, 1e-7));
    }
    out.push_back(direct);
    out.push_back(decoded);
    out.push_back(comp);
  }
  return out;
}

inline std::vector<GradCheckResult> all_gradient_suites() {
  std::vector<GradCheckResult> out = primitive_suite();
  for (auto& r : geometry_suite()) out.push_back(r);
  for (auto& r : render_suite()) out.push_back(r);
  return out;
}

}  // namespace pf3d
