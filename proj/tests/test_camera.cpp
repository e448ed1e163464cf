#include <gtest/gtest.h>

#include <random>

#include "pf3d/camera.hpp"

using namespace pf3d;

namespace {

// Textbook look-at (target = origin, up = +y), rows right/up/back.
Mat3 look_at_rotation(const Vec3& eye) {
  const Vec3 fwd = (-eye).normalized();
  const Vec3 right = fwd.cross(Vec3::UnitY()).normalized();
  const Vec3 up = right.cross(fwd);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = up.transpose();
  r.row(2) = -fwd.transpose();
  return r;
}

Vec3 eye_from_angles(double theta, double phi, double r) {
  return r * Vec3(std::sin(phi) * std::sin(theta), -std::cos(phi), std::sin(phi) * std::cos(theta));
}

}  // namespace

TEST(Camera, RotationMatchesLookAtOracle) {
  const double theta = kPi / 4, phi = kPi / 3;
  const Mat3 r = orbit_rotation(theta, phi);
  const Mat3 ref = look_at_rotation(eye_from_angles(theta, phi, 5.0));
  EXPECT_LT((r - ref).cwiseAbs().maxCoeff(), 1e-12);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ut(-10.0, 10.0), up(0.05, kPi - 0.05);
  for (int i = 0; i < 200; ++i) {
    const double t = ut(rng), p = up(rng);
    EXPECT_LT((orbit_rotation(t, p) - look_at_rotation(eye_from_angles(t, p, 1.0))).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Camera, RotationIsProperEverywhereIncludingPoles) {
  for (double phi : {0.0, 1e-12, kPi / 2, kPi - 1e-12, kPi, 4.0}) {
    for (double theta : {0.0, 1.0, kPi, 5.5}) {
      const Mat3 r = orbit_rotation(theta, phi);
      EXPECT_LT((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-14);
      EXPECT_NEAR(r.determinant(), 1.0, 1e-14);
    }
  }
  // The eye sits directly above the origin for φ = π and the camera looks down.
  const Vec3 eye = eye_position(Camera6D{0.3, kPi, 1.0, Vec3::Zero()}, 5.0);
  EXPECT_LT((eye - Vec3(0, 5, 0)).norm(), 1e-12);
}

TEST(Camera, RotationDerivativesMatchFiniteDifferences) {
  const double h = 1e-6;
  for (auto [t, p] : {std::pair{0.3, 1.1}, std::pair{2.0, kPi}, std::pair{-4.0, 0.2}}) {
    const Mat3 dt = (orbit_rotation(t + h, p) - orbit_rotation(t - h, p)) / (2 * h);
    const Mat3 dp = (orbit_rotation(t, p + h) - orbit_rotation(t, p - h)) / (2 * h);
    EXPECT_LT((dt - orbit_rotation_dtheta(t, p)).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((dp - orbit_rotation_dphi(t, p)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Camera, ProjectionMatchesPinhole) {
  Intrinsics intr;
  intr.width = 48;
  intr.height = 32;
  const Camera6D cam{0.7, 2.0, 1.3, Vec3(0.1, -0.2, 0.05)};
  const ViewTransform vt = view_transform(cam, intr);
  const Vec3 p(0.3, -0.4, 0.25);
  const Vec3 world = cam.d + cam.k * p;
  const Vec3 pc = look_at_rotation(eye_from_angles(cam.theta, cam.phi, 5.0)) *
                  (world - eye_from_angles(cam.theta, cam.phi, 5.0));
  const double f = 1.0 / std::tan(0.691 / 2);
  const Eigen::Vector3d got = vt.project(p);
  EXPECT_NEAR(got.x(), f / 1.5 * pc.x() / -pc.z(), 1e-12);
  EXPECT_NEAR(got.y(), f * pc.y() / -pc.z(), 1e-12);
  EXPECT_NEAR(got.z(), -pc.z(), 1e-12);

  const Eigen::Vector3d origin = view_transform(Camera6D{1.0, 2.5, 1.0, Vec3::Zero()}, intr).project(Vec3::Zero());
  EXPECT_NEAR(origin.x(), 0.0, 1e-15);
  EXPECT_NEAR(origin.y(), 0.0, 1e-15);
  EXPECT_NEAR(origin.z(), 5.0, 1e-12);
}

TEST(Camera, ViewTransformRejectsBadInputs) {
  Intrinsics bad;
  bad.fov = 0.0;
  EXPECT_THROW(view_transform(Camera6D{}, bad), std::invalid_argument);
  EXPECT_THROW(view_transform(Camera6D{0, 1, 0.0, Vec3::Zero()}, Intrinsics{}), std::invalid_argument);
}

TEST(Camera, DecodeAtZeroGivesInitialization) {
  const std::vector<double> raw(12, 0.0);
  const auto d = decode_distribution(raw);
  const auto init = initial_camera_distribution();
  for (int j = 0; j < kCameraDims; ++j) {
    EXPECT_DOUBLE_EQ(d.mean[j], init.mean[j]);
    EXPECT_NEAR(d.stddev[j], init.stddev[j], 1e-15);
  }
  std::vector<double> neg(12, -60.0);
  for (double s : decode_distribution(neg).stddev) EXPECT_GT(s, 0.0);
  EXPECT_THROW(decode_distribution(std::vector<double>(11, 0.0)), ShapeError);
  std::vector<double> nan(12, 0.0);
  nan[7] = std::nan("");
  EXPECT_THROW(decode_distribution(nan), NonFiniteError);
}

TEST(Camera, ZeroNoiseSamplesTheMean) {
  CameraPoseDistribution d{{1.0, 2.0, 1.2, 0.1, -0.1, 0.2}, {0.1, 0.1, 0.1, 0.1, 0.1, 0.1}};
  const std::array<double, 6> eps{};
  const auto v = sample_camera(d, eps).to_array();
  for (int j = 0; j < kCameraDims; ++j) EXPECT_EQ(v[j], d.mean[j]);
}

TEST(Camera, SamplesFollowTheDistribution) {
  const CameraPoseDistribution d{{kPi, 1.9, 1.1, 0.05, -0.05, 0.0}, {0.3, 0.2, 0.1, 0.1, 0.2, 0.05}};
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  std::vector<Camera6D> cams;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    std::array<double, 6> eps;
    for (double& e : eps) e = n01(rng);
    cams.push_back(sample_camera(d, eps));
  }
  const auto m = empirical_moments(cams);
  for (int j = 0; j < kCameraDims; ++j) {
    EXPECT_NEAR(m.mean[j], d.mean[j], 5 * d.stddev[j] / std::sqrt(n)) << kCameraParamNames[j];
    EXPECT_NEAR(m.stddev[j], d.stddev[j], 0.02 * d.stddev[j]) << kCameraParamNames[j];
  }
}

TEST(Camera, ThetaWrapsAndScaleStaysPositive) {
  CameraPoseDistribution d{{-0.5, 1.0, 0.02, 0, 0, 0}, {1, 1, 1, 1, 1, 1}};
  const std::array<double, 6> eps{10.0, 0.0, -3.0, 0, 0, 0};
  const Camera6D c = sample_camera(d, eps);
  EXPECT_GE(c.theta, 0.0);
  EXPECT_LT(c.theta, kTwoPi);
  EXPECT_NEAR(c.theta, wrap_angle(9.5), 1e-15);
  EXPECT_GE(c.k, kScaleMin);
  EXPECT_NEAR(wrap_angle(-1e-18), 0.0, 1e-15);
  EXPECT_LT(wrap_angle(-1e-18), kTwoPi);
}

TEST(Camera, ScaleClampIsSmooth) {
  EXPECT_EQ(soft_clamp_scale(0.5), 0.5);
  EXPECT_NEAR(soft_clamp_scale(kScaleKnee - 1e-12), kScaleKnee, 1e-11);
  EXPECT_NEAR(soft_clamp_scale_grad(kScaleKnee - 1e-12), 1.0, 1e-9);
  const double h = 1e-6;
  for (double k : {-1.0, 0.0, 0.07, 0.2}) {
    EXPECT_NEAR((soft_clamp_scale(k + h) - soft_clamp_scale(k - h)) / (2 * h), soft_clamp_scale_grad(k), 1e-7);
  }
}

TEST(Camera, DifferentiableSamplerMatchesPlainAndFiniteDifferences) {
  const std::array<double, 6> eps{0.3, -1.2, 0.7, 0.1, -0.4, 2.0};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 0.3);
  Tensor raw(Shape{12});
  for (double& v : raw.data()) v = n01(rng);

  Graph g;
  Var r = g.input(raw, true);
  Var cam = sample_camera(decode_distribution(r), eps);
  const auto plain = sample_camera(decode_distribution(raw.data()), eps).to_array();
  for (int j = 0; j < kCameraDims; ++j) EXPECT_NEAR(cam.value()[j], plain[j], 1e-14);

  Tensor weights(Shape{6}, std::vector<double>{0.3, -1.0, 2.0, 0.5, -0.7, 1.1});
  ScalarFn fn = [&](Graph& gg, const NamedVars& in) {
    Var c = sample_camera(decode_distribution(in.at("raw")), eps);
    return sum(c * gg.constant(weights));
  };
  raw.requires_grad = true;
  EXPECT_LT(finite_diff_check(fn, {{"raw", raw}}, 1e-6), 1e-7);
}

TEST(Camera, CompensationMakesRawShapeMatchNormalizedShape) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const ShapeStats stats{Vec3(0.3, -0.2, 0.15), 0.37, 10};
  const double c0 = 1.0;
  const Camera6D cam{2.1, 2.4, 1.2, Vec3(0.05, 0.1, -0.08)};
  const Camera6D comp = compensate(cam, stats, c0);
  const ViewTransform a = view_transform(cam, Intrinsics{}), b = view_transform(comp, Intrinsics{});
  for (int i = 0; i < 50; ++i) {
    const Vec3 p(u(rng), u(rng), u(rng));
    const Vec3 pn = normalize_point(p, stats, c0);
    EXPECT_LT((a.project(pn) - b.project(p)).norm(), 1e-12);
  }
  EXPECT_EQ(comp.theta, cam.theta);
  EXPECT_EQ(comp.phi, cam.phi);
  EXPECT_THROW(compensate(cam, ShapeStats{Vec3::Zero(), 0.0, 1}, c0), CollapsedShapeError);
}

TEST(Camera, DifferentiableCompensationGradients) {
  Tensor cam(Shape{6}, std::vector<double>{1.0, 2.0, 1.2, 0.1, -0.1, 0.05});
  Tensor t(Shape{3}, std::vector<double>{0.2, -0.3, 0.1});
  Tensor k(Shape{}, std::vector<double>{0.8});
  cam.requires_grad = t.requires_grad = k.requires_grad = true;

  Graph g;
  Var out = compensate(g.input(cam), g.input(t), g.input(k), 1.0);
  const auto plain = compensate(Camera6D::from_array(cam.data()), ShapeStats{Vec3(0.2, -0.3, 0.1), 0.8, 1}, 1.0)
                         .to_array();
  for (int j = 0; j < kCameraDims; ++j) EXPECT_NEAR(out.value()[j], plain[j], 1e-15);

  Tensor w(Shape{6}, std::vector<double>{0.4, 0.1, -1.3, 0.9, 0.5, -0.2});
  ScalarFn fn = [&](Graph& gg, const NamedVars& in) {
    return sum(compensate(in.at("cam"), in.at("t"), in.at("k"), 1.0) * gg.constant(w));
  };
  EXPECT_LT(finite_diff_check(fn, {{"cam", cam}, {"t", t}, {"k", k}}, 1e-6), 1e-8);
}

TEST(Camera, MixtureMomentsMatchSampling) {
  std::vector<CameraPoseDistribution> comps = {
      {{0.0, 1.0, 1.0, 0, 0, 0}, {0.1, 0.2, 0.1, 0.1, 0.1, 0.1}},
      {{1.0, 2.0, 1.4, 0.2, 0, -0.2}, {0.3, 0.1, 0.2, 0.1, 0.3, 0.1}},
  };
  const auto m = mixture_moments(comps);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01;
  std::vector<Camera6D> cams;
  for (int i = 0; i < 200000; ++i) {
    const auto& c = comps[i % 2];
    std::array<double, 6> v;
    for (int j = 0; j < 6; ++j) v[j] = c.mean[j] + c.stddev[j] * n01(rng);
    cams.push_back(Camera6D::from_array(v));
  }
  const auto e = empirical_moments(cams);
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(e.mean[j], m.mean[j], 5e-3);
    EXPECT_NEAR(e.stddev[j], m.stddev[j], 5e-3);
  }
}

TEST(Camera, AngularDistanceIsCircular) {
  EXPECT_NEAR(angular_distance(0.1, kTwoPi - 0.1), 0.2, 1e-12);
  EXPECT_NEAR(angular_distance(0.0, kPi), kPi, 1e-12);
  EXPECT_NEAR(angular_distance(-7.0, -7.0 + kTwoPi * 3), 0.0, 1e-12);
}

TEST(Camera, FixedSamplerRanges) {
  FixedSampler s;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Camera6D c = s.sample(rng);
    EXPECT_GE(c.theta, 0.0);
    EXPECT_LT(c.theta, kTwoPi);
    EXPECT_GE(c.phi, kPi / 3);
    EXPECT_LE(c.phi, kPi / 2);
    EXPECT_EQ(c.k, 1.2);
  }
}
