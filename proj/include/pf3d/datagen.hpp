#pragma once

// Synthetic image collections: analytic SDF shapes extracted with marching
// tetrahedra and rendered under a perturbed camera distribution, written as
// PNG pairs plus a JSON manifest. Also the planar crop/resize augmentation
// and a seeded batch loader that never exposes camera columns.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "pf3d/camera.hpp"
#include "pf3d/image_io.hpp"
#include "pf3d/mesh_io.hpp"
#include "pf3d/render.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Analytic shapes
// ---------------------------------------------------------------------------

enum class ShapeFamily { kEllipsoid, kBox, kSuperellipsoid };

inline std::string family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kEllipsoid: return "ellipsoid";
    case ShapeFamily::kBox: return "box";
    case ShapeFamily::kSuperellipsoid: return "superellipsoid";
  }
  return "?";
}

inline ShapeFamily parse_family(const std::string& s) {
  if (s == "ellipsoid") return ShapeFamily::kEllipsoid;
  if (s == "box") return ShapeFamily::kBox;
  if (s == "superellipsoid") return ShapeFamily::kSuperellipsoid;
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

struct ShapeInstance {
  ShapeFamily family = ShapeFamily::kEllipsoid;
  Vec3 semi_axes = Vec3::Ones();  // half-extents for boxes
  double exponent = 2.0;          // superellipsoid roundness

  void validate() const {
    if (!(semi_axes.minCoeff() > 0.0) || !semi_axes.allFinite())
      throw std::invalid_argument("shape: semi-axes must be positive");
    if (family == ShapeFamily::kSuperellipsoid && !(exponent >= 1.0))
      throw std::invalid_argument("shape: superellipsoid exponent must be >= 1");
  }
};

namespace detail {

// Bisection for the Lagrange parameter of the closest point on an ellipse or
// ellipsoid (radii normalised so the smallest is 1). The iteration stops when
// the interval no longer shrinks in floating point.
template <std::size_t N>
double ellipsoid_root(const std::array<double, N>& r, const std::array<double, N>& z, double g) {
  std::array<double, N> n{};
  for (std::size_t i = 0; i < N; ++i) n[i] = r[i] * z[i];
  double s0 = z[N - 1] - 1.0;
  double s1 = 0.0;
  if (g >= 0.0) {
    double len = 0.0;
    for (double v : n) len = std::hypot(len, v);
    s1 = len - 1.0;
  }
  for (int it = 0; it < 2000; ++it) {
    const double s = 0.5 * (s0 + s1);
    if (s == s0 || s == s1) return s;
    double gs = -1.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double q = n[i] / (s + r[i]);
      gs += q * q;
    }
    if (gs > 0.0) s0 = s;
    else if (gs < 0.0) s1 = s;
    else return s;
  }
  return 0.5 * (s0 + s1);
}

// Closest point on an axis-aligned ellipse with e0 >= e1 > 0 to y >= 0.
inline std::array<double, 2> ellipse_closest(double e0, double e1, double y0, double y1) {
  if (y1 > 0.0) {
    if (y0 > 0.0) {
      const double z0 = y0 / e0, z1 = y1 / e1, g = z0 * z0 + z1 * z1 - 1.0;
      if (g == 0.0) return {y0, y1};
      const double r0 = (e0 / e1) * (e0 / e1);
      const double s = ellipsoid_root<2>({r0, 1.0}, {z0, z1}, g);
      return {r0 * y0 / (s + r0), y1 / (s + 1.0)};
    }
    return {0.0, e1};
  }
  const double numer = e0 * y0, denom = e0 * e0 - e1 * e1;
  if (numer < denom) {
    const double xd = numer / denom;
    return {e0 * xd, e1 * std::sqrt(std::max(0.0, 1.0 - xd * xd))};
  }
  return {e0, 0.0};
}

// Closest point on an axis-aligned ellipsoid with e0 >= e1 >= e2 > 0 to y >= 0.
inline std::array<double, 3> ellipsoid_closest(const std::array<double, 3>& e, const std::array<double, 3>& y) {
  if (y[2] > 0.0) {
    if (y[1] > 0.0) {
      if (y[0] > 0.0) {
        const std::array<double, 3> z{y[0] / e[0], y[1] / e[1], y[2] / e[2]};
        const double g = z[0] * z[0] + z[1] * z[1] + z[2] * z[2] - 1.0;
        if (g == 0.0) return y;
        const std::array<double, 3> r{(e[0] / e[2]) * (e[0] / e[2]), (e[1] / e[2]) * (e[1] / e[2]), 1.0};
        const double s = ellipsoid_root<3>(r, z, g);
        return {r[0] * y[0] / (s + r[0]), r[1] * y[1] / (s + r[1]), y[2] / (s + 1.0)};
      }
      const auto c = ellipse_closest(e[1], e[2], y[1], y[2]);
      return {0.0, c[0], c[1]};
    }
    if (y[0] > 0.0) {
      const auto c = ellipse_closest(e[0], e[2], y[0], y[2]);
      return {c[0], 0.0, c[1]};
    }
    return {0.0, 0.0, e[2]};
  }
  const double d0 = e[0] * e[0] - e[2] * e[2], d1 = e[1] * e[1] - e[2] * e[2];
  const double n0 = e[0] * y[0], n1 = e[1] * y[1];
  if (n0 < d0 && n1 < d1) {
    const double x0 = n0 / d0, x1 = n1 / d1, disc = 1.0 - x0 * x0 - x1 * x1;
    if (disc > 0.0) return {e[0] * x0, e[1] * x1, e[2] * std::sqrt(disc)};
  }
  const auto c = ellipse_closest(e[0], e[1], y[0], y[1]);
  return {c[0], c[1], 0.0};
}

}  // namespace detail

// Exact signed distance to an axis-aligned ellipsoid centred at the origin.
inline double ellipsoid_sdf(const Vec3& axes, const Vec3& p) {
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return axes[a] > axes[b]; });
  std::array<double, 3> e{}, y{};
  for (int i = 0; i < 3; ++i) {
    e[i] = axes[order[i]];
    y[i] = std::abs(p[order[i]]);
  }
  const auto x = detail::ellipsoid_closest(e, y);
  const double dist = std::sqrt((x[0] - y[0]) * (x[0] - y[0]) + (x[1] - y[1]) * (x[1] - y[1]) +
                                (x[2] - y[2]) * (x[2] - y[2]));
  double level = 0.0;
  for (int i = 0; i < 3; ++i) level += (y[i] / e[i]) * (y[i] / e[i]);
  return level < 1.0 ? -dist : dist;
}

inline double box_sdf(const Vec3& half, const Vec3& p) {
  const Vec3 q = p.cwiseAbs() - half;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

// (Σ|p_i/a_i|^n)^(1/n) − 1, scaled by the smallest semi-axis. Not a true
// distance away from the surface, but sign-correct with the right zero set.
inline double superellipsoid_sdf(const Vec3& axes, double n, const Vec3& p) {
  double acc = 0.0;
  const Vec3 u = p.cwiseQuotient(axes).cwiseAbs();
  const double m = u.maxCoeff();
  if (m == 0.0) return -axes.minCoeff();
  for (int i = 0; i < 3; ++i) acc += std::pow(u[i] / m, n);
  return (m * std::pow(acc, 1.0 / n) - 1.0) * axes.minCoeff();
}

inline double analytic_sdf(const ShapeInstance& s, const Vec3& p) {
  if (!p.allFinite()) throw NonFiniteError("analytic_sdf", -1);
  switch (s.family) {
    case ShapeFamily::kEllipsoid: return ellipsoid_sdf(s.semi_axes, p);
    case ShapeFamily::kBox: return box_sdf(s.semi_axes, p);
    case ShapeFamily::kSuperellipsoid: return superellipsoid_sdf(s.semi_axes, s.exponent, p);
  }
  return 0.0;
}

// Albedo baked into the synthetic shapes: front/back and up/down gradients so
// the rotation is identifiable from color.
inline Vec3 shape_albedo(const Vec3& p, double extent) {
  const Vec3 u = p / extent;
  Vec3 c(0.5 + 0.4 * std::tanh(2.0 * u.x()), 0.35 + 0.25 * std::tanh(2.0 * u.y()) + 0.15 * std::tanh(2.0 * u.z()),
         0.5 - 0.4 * std::tanh(2.0 * u.x()));
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

// Marching-tet mesh of the instance, rescaled so its contraction equals c0
// and centred on its surface-tet centroid.
inline SurfaceMesh build_shape_mesh(const ShapeInstance& s, int resolution, double c0 = 1.0) {
  s.validate();
  const double half = 1.2 * s.semi_axes.maxCoeff();
  const TetGrid grid = build_grid(resolution, CubeBounds::symmetric(half));
  FieldSample f;
  f.sdf.resize(grid.vertices.size());
  f.deformation.assign(grid.vertices.size(), Vec3::Zero());
  std::vector<Vec3> colors(grid.vertices.size());
  for (std::size_t i = 0; i < grid.vertices.size(); ++i) {
    f.sdf[i] = analytic_sdf(s, grid.vertices[i]);
    colors[i] = shape_albedo(grid.vertices[i], s.semi_axes.maxCoeff());
  }
  Extraction ex = extract_surface(grid, f, colors);
  const ShapeStats st = shape_stats(grid, grid.vertices, ex.surface_tets, c0);
  return normalize_shape(ex.mesh, st, c0);
}

// ---------------------------------------------------------------------------
// Dataset configuration and manifest
// ---------------------------------------------------------------------------

struct AxisRange {
  double lo = 0.5;
  double hi = 1.0;
};

struct DatasetConfig {
  std::vector<ShapeFamily> families{ShapeFamily::kEllipsoid};
  std::array<AxisRange, 3> axes{AxisRange{0.6, 1.0}, AxisRange{0.35, 0.6}, AxisRange{0.4, 0.7}};
  AxisRange exponent{2.5, 5.0};
  int shapes = 10;
  int views_per_shape = 24;
  int image_size = 64;
  int mesh_resolution = 32;
  double tau = 1e-4;
  double c0 = 1.0;
  CameraPoseDistribution cameras = target_camera_distribution();
  std::uint64_t seed = 0;

  void validate() const {
    if (shapes < 1 || views_per_shape < 1) throw std::invalid_argument("dataset: counts must be >= 1");
    if (image_size < 4) throw std::invalid_argument("dataset: image_size must be >= 4");
    if (mesh_resolution < 2) throw std::invalid_argument("dataset: mesh_resolution must be >= 2");
    if (families.empty()) throw std::invalid_argument("dataset: no shape families");
    for (const auto& a : axes)
      if (!(a.lo > 0.0 && a.hi >= a.lo)) throw std::invalid_argument("dataset: axis ranges need 0 < lo <= hi");
    if (!(exponent.lo >= 1.0 && exponent.hi >= exponent.lo))
      throw std::invalid_argument("dataset: exponent range needs 1 <= lo <= hi");
    for (double s : cameras.stddev)
      if (!(s >= 0.0)) throw std::invalid_argument("dataset: camera distribution with sigma < 0");
    if (!(tau > 0.0) || !(c0 > 0.0)) throw std::invalid_argument("dataset: tau and c0 must be positive");
  }

  RenderOptions render_options() const {
    RenderOptions o;
    o.intrinsics.width = o.intrinsics.height = image_size;
    o.tau = tau;
    return o;
  }
};

inline json distribution_to_json(const CameraPoseDistribution& d) {
  return {{"mean", std::vector<double>(d.mean.begin(), d.mean.end())},
          {"std", std::vector<double>(d.stddev.begin(), d.stddev.end())}};
}

inline CameraPoseDistribution distribution_from_json(const json& j) {
  CameraPoseDistribution d;
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("std").get<std::vector<double>>();
  if (m.size() != kCameraDims || s.size() != kCameraDims)
    throw std::invalid_argument("camera distribution needs 6 means and 6 stds");
  std::copy(m.begin(), m.end(), d.mean.begin());
  std::copy(s.begin(), s.end(), d.stddev.begin());
  return d;
}

inline json dataset_config_to_json(const DatasetConfig& c) {
  json fams = json::array();
  for (auto f : c.families) fams.push_back(family_name(f));
  json axes = json::array();
  for (const auto& a : c.axes) axes.push_back({a.lo, a.hi});
  return {{"families", fams},
          {"axes", axes},
          {"exponent", {c.exponent.lo, c.exponent.hi}},
          {"shapes", c.shapes},
          {"views_per_shape", c.views_per_shape},
          {"image_size", c.image_size},
          {"mesh_resolution", c.mesh_resolution},
          {"tau", c.tau},
          {"c0", c.c0},
          {"cameras", distribution_to_json(c.cameras)},
          {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  c.families.clear();
  for (const auto& f : j.at("families")) c.families.push_back(parse_family(f.get<std::string>()));
  const auto& axes = j.at("axes");
  if (axes.size() != 3) throw std::invalid_argument("dataset: axes needs three [lo, hi] ranges");
  for (int i = 0; i < 3; ++i) c.axes[i] = {axes[i].at(0).get<double>(), axes[i].at(1).get<double>()};
  c.exponent = {j.at("exponent").at(0).get<double>(), j.at("exponent").at(1).get<double>()};
  c.shapes = j.at("shapes").get<int>();
  c.views_per_shape = j.at("views_per_shape").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.mesh_resolution = j.at("mesh_resolution").get<int>();
  c.tau = j.at("tau").get<double>();
  c.c0 = j.at("c0").get<double>();
  c.cameras = distribution_from_json(j.at("cameras"));
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

struct ManifestRecord {
  std::string image;  // relative to the manifest directory
  std::string mask;
  int shape_id = 0;
  Camera6D camera;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;
  DatasetConfig config;
  std::vector<ShapeInstance> shapes;
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // directory holding manifest.json
};

inline json shape_to_json(const ShapeInstance& s) {
  return {{"family", family_name(s.family)},
          {"semi_axes", {s.semi_axes.x(), s.semi_axes.y(), s.semi_axes.z()}},
          {"exponent", s.exponent}};
}

inline ShapeInstance shape_from_json(const json& j) {
  ShapeInstance s;
  s.family = parse_family(j.at("family").get<std::string>());
  const auto a = j.at("semi_axes").get<std::vector<double>>();
  if (a.size() != 3) throw std::invalid_argument("shape: semi_axes needs 3 values");
  s.semi_axes = Vec3(a[0], a[1], a[2]);
  s.exponent = j.at("exponent").get<double>();
  return s;
}

inline json manifest_to_json(const DatasetManifest& m) {
  json shapes = json::array();
  for (std::size_t i = 0; i < m.shapes.size(); ++i) {
    json s = shape_to_json(m.shapes[i]);
    s["id"] = i;
    shapes.push_back(std::move(s));
  }
  json recs = json::array();
  for (const auto& r : m.records) {
    const auto v = r.camera.to_array();
    json cam;
    for (int j = 0; j < kCameraDims; ++j) cam[kCameraParamNames[j]] = v[j];
    recs.push_back({{"image", r.image}, {"mask", r.mask}, {"shape_id", r.shape_id}, {"camera", cam}});
  }
  return {{"schema_version", DatasetManifest::kSchemaVersion},
          {"config", dataset_config_to_json(m.config)},
          {"shapes", shapes},
          {"records", recs}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  if (j.at("schema_version").get<int>() != DatasetManifest::kSchemaVersion)
    throw std::runtime_error("manifest: unsupported schema version");
  DatasetManifest m;
  m.config = dataset_config_from_json(j.at("config"));
  for (const auto& s : j.at("shapes")) m.shapes.push_back(shape_from_json(s));
  for (const auto& r : j.at("records")) {
    ManifestRecord rec;
    rec.image = r.at("image").get<std::string>();
    rec.mask = r.at("mask").get<std::string>();
    rec.shape_id = r.at("shape_id").get<int>();
    if (rec.shape_id < 0 || rec.shape_id >= static_cast<int>(m.shapes.size()))
      throw std::runtime_error("manifest: record references unknown shape " + std::to_string(rec.shape_id));
    CameraVector v{};
    for (int k = 0; k < kCameraDims; ++k) v[k] = r.at("camera").at(kCameraParamNames[k]).get<double>();
    rec.camera = Camera6D::from_array(v);
    m.records.push_back(std::move(rec));
  }
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  m.root = path.parent_path();
  return m;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

// Independent streams per (seed, shape, purpose) so any shape can be rebuilt
// in isolation.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t shape, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(shape), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline double sample_gaussian_param(std::mt19937_64& rng, double mean, double sd) {
  std::normal_distribution<double> n(0.0, 1.0);
  return mean + sd * n(rng);
}

}  // namespace detail

inline ShapeInstance sample_shape(const DatasetConfig& cfg, int shape_id) {
  auto rng = detail::stream(cfg.seed, static_cast<std::uint64_t>(shape_id), 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  ShapeInstance s;
  s.family = cfg.families[static_cast<std::size_t>(shape_id) % cfg.families.size()];
  for (int i = 0; i < 3; ++i) s.semi_axes[i] = cfg.axes[i].lo + (cfg.axes[i].hi - cfg.axes[i].lo) * u01(rng);
  s.exponent = s.family == ShapeFamily::kSuperellipsoid
                   ? cfg.exponent.lo + (cfg.exponent.hi - cfg.exponent.lo) * u01(rng)
                   : 2.0;
  return s;
}

// Cameras for one shape. Zero standard deviations give the mean exactly.
inline std::vector<Camera6D> sample_views(const DatasetConfig& cfg, int shape_id) {
  auto rng = detail::stream(cfg.seed, static_cast<std::uint64_t>(shape_id), 2);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Camera6D> out;
  for (int v = 0; v < cfg.views_per_shape; ++v) {
    CameraVector x{};
    for (int j = 0; j < kCameraDims; ++j) x[j] = cfg.cameras.mean[j] + cfg.cameras.stddev[j] * n(rng);
    x[kTheta] = wrap_angle(x[kTheta]);
    x[kScale] = soft_clamp_scale(x[kScale]);
    out.push_back(Camera6D::from_array(x));
  }
  return out;
}

inline std::string record_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.png", index);
  return buf;
}

// Shapes and records without touching the filesystem.
inline DatasetManifest plan_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  DatasetManifest m;
  m.config = cfg;
  for (int s = 0; s < cfg.shapes; ++s) {
    m.shapes.push_back(sample_shape(cfg, s));
    for (const Camera6D& cam : sample_views(cfg, s)) {
      const std::string stem = record_stem(m.records.size());
      m.records.push_back({"images/" + stem, "masks/" + stem, s, cam});
    }
  }
  return m;
}

inline SurfaceMesh manifest_shape_mesh(const DatasetManifest& m, int shape_id) {
  return build_shape_mesh(m.shapes.at(static_cast<std::size_t>(shape_id)), m.config.mesh_resolution, m.config.c0);
}

struct EncodedPair {
  std::vector<std::uint8_t> image;
  std::vector<std::uint8_t> mask;
};

inline EncodedPair encode_view(const SurfaceMesh& mesh, const Camera6D& cam, const RenderOptions& opts) {
  const RenderedPair r = render(mesh, cam, opts);
  return {encode_png(to_image8(r.color)), encode_png(to_image8(r.mask))};
}

inline std::string shape_mesh_path(int shape_id) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "meshes/shape_%05d.obj", shape_id);
  return buf;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << manifest_to_json(m).dump(2) << '\n';
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline DatasetManifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  DatasetManifest m = plan_dataset(cfg);
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "masks", "meshes"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw std::runtime_error("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  const RenderOptions opts = cfg.render_options();
  std::size_t rec = 0;
  for (int s = 0; s < cfg.shapes; ++s) {
    const SurfaceMesh mesh = manifest_shape_mesh(m, s);
    write_obj(out_dir / shape_mesh_path(s), mesh);
    for (int v = 0; v < cfg.views_per_shape; ++v, ++rec) {
      const ManifestRecord& r = m.records[rec];
      const EncodedPair e = encode_view(mesh, r.camera, opts);
      write_file_bytes(out_dir / r.image, e.image);
      write_file_bytes(out_dir / r.mask, e.mask);
    }
  }
  write_manifest(m, out_dir / "manifest.json");
  m.root = out_dir;
  return m;
}

// ---------------------------------------------------------------------------
// Planar augmentation
// ---------------------------------------------------------------------------

struct ImagePair {
  Tensor image;  // [C, H, W]
  Tensor mask;   // [1, H, W]
};

namespace detail {

// Bilinear resample of every channel through the map out(j) -> src(x(j)).
// Samples more than half a pixel outside the source take `fill`.
inline Tensor resample(const Tensor& src, double cx, double cy, double scale, double fill) {
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor out(Shape{c, h, w});
  for (std::size_t i = 0; i < h; ++i) {
    const double y = cy + (static_cast<double>(i) + 0.5 - 0.5 * static_cast<double>(h)) / scale - 0.5;
    for (std::size_t j = 0; j < w; ++j) {
      const double x = cx + (static_cast<double>(j) + 0.5 - 0.5 * static_cast<double>(w)) / scale - 0.5;
      const bool outside = x < -0.5 || x > static_cast<double>(w) - 0.5 || y < -0.5 || y > static_cast<double>(h) - 0.5;
      const double xc = std::clamp(x, 0.0, static_cast<double>(w - 1));
      const double yc = std::clamp(y, 0.0, static_cast<double>(h - 1));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(xc)), y0 = static_cast<std::size_t>(std::floor(yc));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = xc - static_cast<double>(x0), fy = yc - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (outside) {
          out[(ch * h + i) * w + j] = fill;
          continue;
        }
        const double* p = src.data().data() + ch * h * w;
        const double top = fx == 0.0 ? p[y0 * w + x0] : (1.0 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
        const double bot = fx == 0.0 ? p[y1 * w + x0] : (1.0 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
        out[(ch * h + i) * w + j] = fy == 0.0 ? top : (1.0 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

}  // namespace detail

// Crop of side (source/scale) centred at centre + translation (pixels),
// resized back to the source size. When the window fits inside the image its
// centre is clamped so it stays inside.
inline ImagePair augment_2d(const ImagePair& in, double scale, const Vec2& translation, double background = 1.0) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("augment_2d: scale must be positive");
  if (!translation.allFinite()) throw std::invalid_argument("augment_2d: translation must be finite");
  if (in.image.rank() != 3 || in.mask.rank() != 3 || in.mask.dim(0) != 1 || in.image.dim(1) != in.mask.dim(1) ||
      in.image.dim(2) != in.mask.dim(2))
    throw ShapeError("augment_2d: expected image [C,H,W] and mask [1,H,W] of equal size");
  const double w = static_cast<double>(in.image.dim(2)), h = static_cast<double>(in.image.dim(1));
  const double cw = w / scale, ch = h / scale;
  double cx = 0.5 * w + translation.x(), cy = 0.5 * h + translation.y();
  if (std::abs(translation.x()) >= 0.5 * (w + cw) || std::abs(translation.y()) >= 0.5 * (h + ch))
    throw std::invalid_argument("augment_2d: crop window lies entirely outside the image");
  if (cw <= w) cx = std::clamp(cx, 0.5 * cw, w - 0.5 * cw);
  if (ch <= h) cy = std::clamp(cy, 0.5 * ch, h - 0.5 * ch);
  return {detail::resample(in.image, cx, cy, scale, background), detail::resample(in.mask, cx, cy, scale, 0.0)};
}

struct AugmentOptions {
  bool enabled = false;
  double scale_lo = 1.0;
  double scale_hi = 1.25;
  double max_shift = 0.1;  // fraction of the image side
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

enum class Split { kTrain, kVal, kTest };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

// Shape ids per split, 70/10/20 by shape so views of a shape stay together.
// The shuffle depends only on the dataset seed.
inline std::array<std::vector<int>, 3> split_shapes(int shapes, std::uint64_t seed) {
  std::vector<int> ids(static_cast<std::size_t>(shapes));
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = detail::stream(seed, 0xffffffffu, 3);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * shapes));
  const auto n_val = std::min(ids.size() - n_train, static_cast<std::size_t>(std::llround(0.1 * shapes)));
  std::array<std::vector<int>, 3> out;
  out[0].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  out[1].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out[2].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

struct Batch {
  Tensor images;  // [B, 3, H, W]
  Tensor masks;   // [B, 1, H, W]
  std::size_t size() const { return images.dim(0); }
};

// Image/mask batches only; camera columns stay in the manifest.
class DatasetLoader {
 public:
  DatasetLoader(const std::filesystem::path& manifest_path, std::size_t batch_size, std::uint64_t seed,
                Split split = Split::kTrain, AugmentOptions augment = {})
      : batch_size_(batch_size), seed_(seed), augment_(augment) {
    if (batch_size == 0) throw std::invalid_argument("loader: batch size must be >= 1");
    const DatasetManifest m = read_manifest(manifest_path);
    const auto splits = split_shapes(m.config.shapes, m.config.seed);
    const auto& keep = splits[static_cast<std::size_t>(split)];
    side_ = static_cast<std::size_t>(m.config.image_size);
    for (const auto& r : m.records) {
      if (!std::binary_search(keep.begin(), keep.end(), r.shape_id)) continue;
      Tensor img = load(m.root / r.image, 3);
      Tensor mask = load(m.root / r.mask, 1);
      pairs_.push_back({std::move(img), std::move(mask)});
      shape_ids_.push_back(r.shape_id);
    }
    if (pairs_.empty()) throw std::runtime_error("loader: split '" + split_name(split) + "' is empty");
  }

  std::size_t size() const { return pairs_.size(); }
  std::size_t image_size() const { return side_; }
  std::size_t batches_per_epoch() const { return (pairs_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<int>& shape_ids() const { return shape_ids_; }

  // Record order for an epoch; a pure function of (seed, epoch).
  std::vector<std::vector<std::size_t>> epoch_batches(std::uint64_t epoch) const {
    std::vector<std::size_t> order(pairs_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = detail::stream(seed_, epoch, 4);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size_)
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
    return out;
  }

  Batch gather(std::span<const std::size_t> idx, std::mt19937_64* aug_rng = nullptr) const {
    if (idx.empty()) throw std::invalid_argument("loader: empty batch");
    const std::size_t n = idx.size(), s = side_, np = s * s;
    Batch b{Tensor(Shape{n, 3, s, s}), Tensor(Shape{n, 1, s, s})};
    for (std::size_t k = 0; k < n; ++k) {
      ImagePair p = pairs_.at(idx[k]);
      if (augment_.enabled && aug_rng) {
        std::uniform_real_distribution<double> us(augment_.scale_lo, augment_.scale_hi);
        std::uniform_real_distribution<double> ut(-augment_.max_shift, augment_.max_shift);
        const double sc = us(*aug_rng);
        const Vec2 t(ut(*aug_rng) * static_cast<double>(s), ut(*aug_rng) * static_cast<double>(s));
        p = augment_2d(p, sc, t);
      }
      std::copy(p.image.data().begin(), p.image.data().end(), b.images.data().begin() + static_cast<std::ptrdiff_t>(k * 3 * np));
      std::copy(p.mask.data().begin(), p.mask.data().end(), b.masks.data().begin() + static_cast<std::ptrdiff_t>(k * np));
    }
    return b;
  }

  // Endless stream: batch `step` of the concatenated epochs.
  Batch batch_at(std::uint64_t step, std::mt19937_64* aug_rng = nullptr) const {
    const std::uint64_t per = batches_per_epoch();
    const auto batches = epoch_batches(step / per);
    return gather(batches[step % per], aug_rng);
  }

  // Mean mask coverage (fraction of pixels) over the split.
  double mean_mask_area() const {
    double acc = 0.0;
    for (const auto& p : pairs_) {
      double a = 0.0;
      for (double v : p.mask.data()) a += v;
      acc += a / static_cast<double>(p.mask.numel());
    }
    return acc / static_cast<double>(pairs_.size());
  }

 private:
  Tensor load(const std::filesystem::path& path, int channels) const {
    if (!std::filesystem::exists(path)) throw std::runtime_error("loader: missing file " + path.string());
    Tensor t;
    try {
      t = read_png(path);
    } catch (const std::exception& e) {
      throw std::runtime_error("loader: corrupt image " + path.string() + ": " + e.what());
    }
    if (t.dim(0) != static_cast<std::size_t>(channels) || t.dim(1) != side_ || t.dim(2) != side_)
      throw std::runtime_error("loader: unexpected image shape in " + path.string());
    return t;
  }

  std::size_t batch_size_;
  std::uint64_t seed_;
  AugmentOptions augment_;
  std::size_t side_ = 0;
  std::vector<ImagePair> pairs_;
  std::vector<int> shape_ids_;
};

}  // namespace pf3d
