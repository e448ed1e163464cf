#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "pf3d/datagen.hpp"
#include "pf3d/metrics.hpp"

using namespace pf3d;

namespace {

std::vector<Vec3> random_cloud(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> p(n);
  for (Vec3& v : p) v = Vec3(u(rng), u(rng), u(rng));
  return p;
}

// Set of argmin references, one per generated shape; ties to the first.
double oracle_coverage(const std::vector<std::vector<double>>& d) {
  std::set<std::size_t> matched;
  for (std::size_t g = 0; g < d.size(); ++g) {
    std::size_t arg = 0;
    for (std::size_t r = 1; r < d[g].size(); ++r)
      if (d[g][r] < d[g][arg]) arg = r;
    matched.insert(arg);
  }
  return 100.0 * static_cast<double>(matched.size()) / static_cast<double>(d[0].size());
}

double oracle_mmd(const std::vector<std::vector<double>>& d) {
  double acc = 0.0;
  for (std::size_t r = 0; r < d[0].size(); ++r) {
    double best = d[0][r];
    for (std::size_t g = 1; g < d.size(); ++g) best = d[g][r] < best ? d[g][r] : best;
    acc += best;
  }
  return acc / static_cast<double>(d[0].size());
}

SurfaceMesh shape_mesh(const Vec3& axes, ShapeFamily f = ShapeFamily::kEllipsoid) {
  return build_shape_mesh({f, axes, 3.0}, 10);
}

}  // namespace

TEST(Chamfer, HandExamples) {
  const std::vector<Vec3> o{Vec3(0, 0, 0)}, e{Vec3(1, 0, 0)}, two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_EQ(chamfer(o, e), 2.0);
  EXPECT_EQ(chamfer(two, o), 1.0);
  EXPECT_EQ(chamfer(two, two), 0.0);
  EXPECT_EQ(chamfer(two, o, {.mean = true}), 0.5);
  EXPECT_THROW(chamfer(std::vector<Vec3>{}, o), std::invalid_argument);
}

TEST(Chamfer, SymmetricAndRigidInvariant) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto x = random_cloud(rng, 40), y = random_cloud(rng, 25);
    const double c = chamfer(x, y);
    EXPECT_EQ(c, chamfer(y, x));
    EXPECT_GE(c, 0.0);
    const Eigen::Matrix3d r = Eigen::AngleAxisd(0.3 + t, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    const Vec3 s(0.5, -1.0, 2.0);
    std::vector<Vec3> xr, yr;
    for (const Vec3& p : x) xr.push_back(r * p + s);
    for (const Vec3& p : y) yr.push_back(r * p + s);
    EXPECT_NEAR(chamfer(xr, yr), c, 1e-9);
  }
}

TEST(SetMetrics, HandExamples) {
  // d(A,B) = 2, d(A,C) = 5 as a generated x reference matrix.
  EXPECT_EQ(mmd(DistanceMatrix{{2.0}, {5.0}}), 2.0);
  EXPECT_EQ(coverage(DistanceMatrix{{0.0, 1.0}}), 50.0);
  EXPECT_EQ(coverage(DistanceMatrix{{0.0, 1.0}, {1.0, 0.0}}), 100.0);
  EXPECT_THROW(coverage(DistanceMatrix{}), std::invalid_argument);
  EXPECT_THROW(mmd(DistanceMatrix{{}}), std::invalid_argument);
}

TEST(SetMetrics, MatchBruteForceOnRandomSets) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> size(1, 10);
  for (int t = 0; t < 50; ++t) {
    std::vector<PointCloud> gen(static_cast<std::size_t>(size(rng))), ref(static_cast<std::size_t>(size(rng)));
    for (auto& c : gen) c.points = random_cloud(rng, 12);
    for (auto& c : ref) c.points = random_cloud(rng, 12);
    std::vector<std::vector<double>> d(gen.size(), std::vector<double>(ref.size()));
    for (std::size_t g = 0; g < gen.size(); ++g)
      for (std::size_t r = 0; r < ref.size(); ++r) d[g][r] = chamfer(gen[g].points, ref[r].points);
    EXPECT_EQ(coverage(gen, ref, chamfer_distance()), oracle_coverage(d));
    EXPECT_EQ(mmd(gen, ref, chamfer_distance()), oracle_mmd(d));
  }
}

TEST(SetMetrics, SubsetAndIdentity) {
  std::mt19937_64 rng(8);
  std::vector<PointCloud> ref(4);
  for (auto& c : ref) c.points = random_cloud(rng, 10);
  std::vector<PointCloud> gen = ref;
  gen.push_back({random_cloud(rng, 10), 9});
  EXPECT_EQ(mmd(gen, ref, chamfer_distance()), 0.0);
  EXPECT_EQ(coverage(ref, ref, chamfer_distance()), 100.0);
}

TEST(EvalReport, IdentitySetsAndNormalization) {
  const std::vector<SurfaceMesh> ref{shape_mesh(Vec3(0.9, 0.5, 0.6)), shape_mesh(Vec3(0.6, 0.6, 0.4), ShapeFamily::kBox)};
  EvalConfig cfg;
  cfg.points = 256;
  const EvalReport same = eval_report(ref, ref, cfg);
  EXPECT_EQ(same.cov_cd, 100.0);
  EXPECT_LT(same.mmd_cd, 1e-3);
  ASSERT_EQ(same.warnings.size(), 1u);

  std::vector<SurfaceMesh> gen;
  for (int i = 0; i < 10; ++i) gen.push_back(shape_mesh(Vec3(0.5 + 0.05 * i, 0.5, 0.4 + 0.03 * i)));
  const EvalReport base = eval_report(gen, ref, cfg);
  EXPECT_TRUE(base.warnings.empty());

  std::vector<SurfaceMesh> moved = ref;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (auto& m : moved) {
    const Vec3 off(u(rng), u(rng), u(rng));
    const double s = 1.0 + 0.5 * std::abs(u(rng));
    for (Vec3& v : m.vertices) v = s * v + off;
  }
  const EvalReport shifted = eval_report(gen, moved, cfg);
  EXPECT_EQ(shifted.cov_cd, base.cov_cd);
  EXPECT_NEAR(shifted.mmd_cd, base.mmd_cd, 1e-9);
}

TEST(EvalReport, EmptyInputsRejected) {
  const std::vector<SurfaceMesh> ref{shape_mesh(Vec3(0.9, 0.5, 0.6))};
  EXPECT_THROW(eval_report({}, ref), std::invalid_argument);
  EXPECT_THROW(eval_report(ref, {}), std::invalid_argument);
  const std::vector<SurfaceMesh> bad{SurfaceMesh{}};
  EXPECT_THROW(eval_report(bad, ref), std::invalid_argument);
}
