#pragma once

// 6D camera model: orbit rotation θ, elevation φ, object scale k and object
// displacement d. Object-space point p lands at world point d + k·p, which is
// then viewed from an eye on a sphere of radius r0 around the origin.

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>

#include <Eigen/Core>

#include "pf3d/autodiff.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Parameter order shared by the 6-vector and the 12-D decode head.
enum CameraParam : int { kTheta = 0, kPhi = 1, kScale = 2, kDx = 3, kDy = 4, kDz = 5 };
inline constexpr int kCameraDims = 6;
inline constexpr std::array<const char*, 6> kCameraParamNames = {"theta", "phi", "k", "dx", "dy", "dz"};

using CameraVector = std::array<double, kCameraDims>;

inline double wrap_angle(double a) {
  double w = a - kTwoPi * std::floor(a / kTwoPi);
  return w >= kTwoPi ? 0.0 : w;
}

struct Camera6D {
  double theta = 0.0;
  double phi = kPi / 2;
  double k = 1.0;
  Vec3 d = Vec3::Zero();

  CameraVector to_array() const { return {theta, phi, k, d.x(), d.y(), d.z()}; }
  static Camera6D from_array(std::span<const double> v) {
    if (v.size() != kCameraDims) throw ShapeError("Camera6D: expected 6 parameters");
    return {v[0], v[1], v[2], Vec3(v[3], v[4], v[5])};
  }
};

struct CameraPoseDistribution {
  CameraVector mean{};
  CameraVector stddev{};
};

// "Initialized" sampler state: the decode head maps raw = 0 here.
inline CameraPoseDistribution initial_camera_distribution() {
  return {{0.0, kPi, 1.2, 0.0, 0.0, 0.0}, {kPi / 10, kPi / 36, 0.06, 0.06, 0.06, 0.06}};
}

// Camera distribution the synthetic datasets are rendered from.
inline CameraPoseDistribution target_camera_distribution() {
  return {{kPi, 5 * kPi / 6, 1.2, 0.0, 0.0, 0.0}, {2 * kPi / 5, kPi / 6, 0.2, 0.2, 0.2, 0.2}};
}

// Fixed sampler used while the shape generator is initialized: uniform
// rotation and elevation, scale and position held constant.
struct FixedSampler {
  double theta_lo = 0.0, theta_hi = kTwoPi;
  double phi_lo = kPi / 3, phi_hi = kPi / 2;
  double k = 1.2;
  Vec3 d = Vec3::Zero();

  template <class Rng>
  Camera6D sample(Rng& rng) const {
    std::uniform_real_distribution<double> ut(theta_lo, theta_hi), up(phi_lo, phi_hi);
    const double t = ut(rng);
    return {wrap_angle(t), up(rng), k, d};
  }
};

struct Intrinsics {
  double fov = 0.691;  // vertical field of view, radians
  double near = 0.1;
  double far = 100.0;
  int width = 32;
  int height = 32;
  double orbit_radius = 5.0;

  double focal() const { return 1.0 / std::tan(0.5 * fov); }
  double aspect() const { return static_cast<double>(width) / height; }
  void validate() const {
    if (!(fov > 0.0 && fov < kPi)) throw std::invalid_argument("intrinsics: fov must lie in (0, pi)");
    if (!(orbit_radius > 0.0)) throw std::invalid_argument("intrinsics: orbit radius must be positive");
    if (!(near > 0.0 && far > near)) throw std::invalid_argument("intrinsics: need 0 < near < far");
    if (width < 1 || height < 1) throw std::invalid_argument("intrinsics: image size must be positive");
  }
};

// ---------------------------------------------------------------------------
// Distribution decode and reparameterized sampling
// ---------------------------------------------------------------------------

inline const double kSoftplusOneShift = std::log(std::numbers::e - 1.0);  // softplus(shift) = 1

inline double positive_map(double raw, double sigma_init) {
  return sigma_init * detail::stable_softplus(raw + kSoftplusOneShift);
}

// First six entries offset the initialization means; last six feed a smooth
// positive map anchored so raw = 0 reproduces the initialization deviations.
inline CameraPoseDistribution decode_distribution(std::span<const double> raw,
                                                  const CameraPoseDistribution& init = initial_camera_distribution()) {
  if (raw.size() != 2 * kCameraDims) throw ShapeError("decode_distribution: expected a 12-vector");
  for (double v : raw)
    if (!std::isfinite(v)) throw NonFiniteError("decode_distribution", -1);
  CameraPoseDistribution d;
  for (int j = 0; j < kCameraDims; ++j) {
    d.mean[j] = init.mean[j] + raw[j];
    d.stddev[j] = positive_map(raw[kCameraDims + j], init.stddev[j]);
  }
  return d;
}

struct DiffDistribution {
  Var mean;    // [6]
  Var stddev;  // [6]
};

inline DiffDistribution decode_distribution(const Var& raw, const CameraPoseDistribution& init = initial_camera_distribution()) {
  if (raw.shape() != Shape{2 * kCameraDims}) throw ShapeError("decode_distribution: expected a [12] var");
  Graph& g = raw.graph();
  Tensor mu0(Shape{kCameraDims}), sig0(Shape{kCameraDims});
  for (int j = 0; j < kCameraDims; ++j) {
    mu0[j] = init.mean[j];
    sig0[j] = init.stddev[j];
  }
  DiffDistribution d;
  d.mean = slice_rows(raw, 0, kCameraDims) + g.constant(mu0);
  d.stddev = softplus(slice_rows(raw, kCameraDims, 2 * kCameraDims) + kSoftplusOneShift) * g.constant(sig0);
  return d;
}

inline constexpr double kScaleMin = 0.05;
inline constexpr double kScaleKnee = 0.1;

// Identity above the knee, smooth (C1) exponential approach to kScaleMin below.
inline double soft_clamp_scale(double k) {
  if (k >= kScaleKnee) return k;
  const double span = kScaleKnee - kScaleMin;
  return kScaleMin + span * std::exp((k - kScaleKnee) / span);
}

inline double soft_clamp_scale_grad(double k) {
  if (k >= kScaleKnee) return 1.0;
  const double span = kScaleKnee - kScaleMin;
  return std::exp((k - kScaleKnee) / span);
}

inline Camera6D sample_camera(const CameraPoseDistribution& dist, std::span<const double> eps) {
  if (eps.size() != kCameraDims) throw ShapeError("sample_camera: expected 6 noise values");
  for (double s : dist.stddev)
    if (!(s > 0.0)) throw std::invalid_argument("sample_camera: stddev must be positive");
  CameraVector v;
  for (int j = 0; j < kCameraDims; ++j) v[j] = dist.mean[j] + dist.stddev[j] * eps[j];
  v[kTheta] = wrap_angle(v[kTheta]);
  v[kScale] = soft_clamp_scale(v[kScale]);
  return Camera6D::from_array(v);
}

// Wraps θ into [0, 2π) and soft-clamps k; gradient of the wrap is the identity.
inline Var canonicalize_camera(const Var& cam) {
  if (cam.shape() != Shape{kCameraDims}) throw ShapeError("canonicalize_camera: expected [6]");
  Tensor out = cam.value();
  const double k_in = out[kScale];
  out[kTheta] = wrap_angle(out[kTheta]);
  out[kScale] = soft_clamp_scale(k_in);
  const double dk = soft_clamp_scale_grad(k_in);
  return cam.graph().record("canonicalize_camera", std::move(out), {cam}, [dk](const Var& o, const Var& g) {
    Tensor m(Shape{kCameraDims}, 1.0);
    m[kScale] = dk;
    return std::vector<Var>{mul(g, o.graph().constant(m))};
  });
}

// camera = μ + σ·ε, reparameterized so gradients reach μ and σ.
inline Var sample_camera(const DiffDistribution& dist, std::span<const double> eps) {
  if (eps.size() != kCameraDims) throw ShapeError("sample_camera: expected 6 noise values");
  Graph& g = dist.mean.graph();
  Tensor e(Shape{kCameraDims}, std::vector<double>(eps.begin(), eps.end()));
  return canonicalize_camera(dist.mean + dist.stddev * g.constant(e));
}

inline Var camera_var(Graph& g, const Camera6D& c, bool requires_grad = false) {
  const CameraVector v = c.to_array();
  return g.input(Tensor(Shape{kCameraDims}, std::vector<double>(v.begin(), v.end())), requires_grad, "camera");
}

inline Camera6D camera_value(const Var& cam) { return Camera6D::from_array(cam.value().data()); }

// ---------------------------------------------------------------------------
// Compensation
// ---------------------------------------------------------------------------

// k' = k·c0/Δk, d' = d − k'·Δd; rotation is never compensated. Viewing the raw
// shape with the compensated camera places it exactly where the normalized
// shape lands under the original camera.
inline Camera6D compensate(const Camera6D& cam, const ShapeStats& stats, double c0) {
  if (!(stats.contraction > kCollapseEps)) throw CollapsedShapeError("compensate: collapsed shape");
  Camera6D out = cam;
  out.k = cam.k * c0 / stats.contraction;
  out.d = cam.d - out.k * stats.translation;
  return out;
}

inline Var compensate(const Var& cam, const Var& translation, const Var& contraction, double c0) {
  if (!(contraction.item() > kCollapseEps)) throw CollapsedShapeError("compensate: collapsed shape");
  Var head = slice_rows(cam, 0, 2);
  Var k = reshape(slice_rows(cam, 2, 3), Shape{});
  Var d = slice_rows(cam, 3, 6);
  Var k2 = k * c0 / contraction;
  Var d2 = d - k2 * translation;
  return concat({head, reshape(k2, Shape{1}), d2});
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

// World-to-camera rotation. Rows: camera right, up, back (camera looks down −z).
// Equals a look-at toward the origin with +y up wherever sin φ > 0, and stays
// smooth through the poles.
inline Mat3 orbit_rotation(double theta, double phi) {
  const double st = std::sin(theta), ct = std::cos(theta), sp = std::sin(phi), cp = std::cos(phi);
  Mat3 r;
  r << ct, 0.0, -st,         //
      cp * st, sp, cp * ct,  //
      sp * st, -cp, sp * ct;
  return r;
}

inline Mat3 orbit_rotation_dtheta(double theta, double phi) {
  const double st = std::sin(theta), ct = std::cos(theta), sp = std::sin(phi), cp = std::cos(phi);
  Mat3 r;
  r << -st, 0.0, -ct,         //
      cp * ct, 0.0, -cp * st,  //
      sp * ct, 0.0, -sp * st;
  return r;
}

inline Mat3 orbit_rotation_dphi(double theta, double phi) {
  const double st = std::sin(theta), ct = std::cos(theta), sp = std::sin(phi), cp = std::cos(phi);
  Mat3 r;
  r << 0.0, 0.0, 0.0,          //
      -sp * st, cp, -sp * ct,  //
      cp * st, sp, cp * ct;
  return r;
}

inline Vec3 eye_position(const Camera6D& cam, double orbit_radius) {
  return orbit_radius * orbit_rotation(cam.theta, cam.phi).row(2).transpose();
}

struct ViewTransform {
  Mat4 model = Mat4::Identity();       // object -> world (scale k, displacement d)
  Mat4 view = Mat4::Identity();        // world -> camera, rigid
  Mat4 projection = Mat4::Identity();  // camera -> clip
  int width = 0;
  int height = 0;

  Mat4 full() const { return projection * view * model; }

  // Object-space point to NDC (x, y) and view depth (distance along −z).
  Eigen::Vector3d project(const Vec3& p) const {
    const Eigen::Vector4d c = full() * p.homogeneous();
    const Eigen::Vector4d cam = view * model * p.homogeneous();
    return {c.x() / c.w(), c.y() / c.w(), -cam.z()};
  }
};

inline ViewTransform view_transform(const Camera6D& cam, const Intrinsics& intr) {
  intr.validate();
  if (!(cam.k > 0.0)) throw std::invalid_argument("view_transform: object scale must be positive");
  ViewTransform vt;
  vt.width = intr.width;
  vt.height = intr.height;
  vt.model.topLeftCorner<3, 3>() = cam.k * Mat3::Identity();
  vt.model.topRightCorner<3, 1>() = cam.d;
  vt.view.topLeftCorner<3, 3>() = orbit_rotation(cam.theta, cam.phi);
  vt.view.topRightCorner<3, 1>() = Vec3(0.0, 0.0, -intr.orbit_radius);
  const double f = intr.focal(), n = intr.near, fa = intr.far;
  vt.projection = Mat4::Zero();
  vt.projection(0, 0) = f / intr.aspect();
  vt.projection(1, 1) = f;
  vt.projection(2, 2) = (fa + n) / (n - fa);
  vt.projection(2, 3) = 2.0 * fa * n / (n - fa);
  vt.projection(3, 2) = -1.0;
  return vt;
}

// Summary statistics of a set of cameras (per parameter mean / population std).
inline CameraPoseDistribution empirical_moments(std::span<const Camera6D> cams) {
  if (cams.empty()) throw std::invalid_argument("empirical_moments: no cameras");
  CameraPoseDistribution m;
  for (const Camera6D& c : cams) {
    const auto v = c.to_array();
    for (int j = 0; j < kCameraDims; ++j) m.mean[j] += v[j];
  }
  for (double& v : m.mean) v /= static_cast<double>(cams.size());
  for (const Camera6D& c : cams) {
    const auto v = c.to_array();
    for (int j = 0; j < kCameraDims; ++j) m.stddev[j] += (v[j] - m.mean[j]) * (v[j] - m.mean[j]);
  }
  for (double& v : m.stddev) v = std::sqrt(v / static_cast<double>(cams.size()));
  return m;
}

// Moments of the equal-weight Gaussian mixture formed by several components.
inline CameraPoseDistribution mixture_moments(std::span<const CameraPoseDistribution> comps) {
  if (comps.empty()) throw std::invalid_argument("mixture_moments: no components");
  CameraPoseDistribution m;
  const double n = static_cast<double>(comps.size());
  for (const auto& c : comps)
    for (int j = 0; j < kCameraDims; ++j) m.mean[j] += c.mean[j] / n;
  for (const auto& c : comps)
    for (int j = 0; j < kCameraDims; ++j)
      m.stddev[j] += (c.stddev[j] * c.stddev[j] + (c.mean[j] - m.mean[j]) * (c.mean[j] - m.mean[j])) / n;
  for (double& v : m.stddev) v = std::sqrt(v);
  return m;
}

// Smallest absolute angular difference, in [0, π].
inline double angular_distance(double a, double b) {
  const double d = wrap_angle(a - b);
  return std::min(d, kTwoPi - d);
}

}  // namespace pf3d
