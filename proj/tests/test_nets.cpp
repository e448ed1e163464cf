#include <gtest/gtest.h>

#include <map>
#include <random>

#include "pf3d/nets.hpp"

using namespace pf3d;

namespace {

Tensor randn(Shape s, unsigned seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  return normal_tensor(std::move(s), sd, rng);
}

bool watertight(const SurfaceMesh& m) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
  for (const Tri& t : m.triangles)
    for (int k = 0; k < 3; ++k) ++directed[{t[k], t[(k + 1) % 3]}];
  for (const auto& [e, n] : directed) {
    if (n != 1) return false;
    auto it = directed.find({e.second, e.first});
    if (it == directed.end() || it->second != 1) return false;
  }
  return !m.triangles.empty();
}

}  // namespace

TEST(MappingNet, ZeroWeightsGiveZero) {
  MappingNet net("m", 8, 16, 4);
  ParamStore s;
  std::mt19937_64 rng(1);
  net.init(s, block::kGenerator, rng);
  for (Param& p : s.params()) p.value = Tensor(p.value.shape(), 0.0);
  Graph g;
  Var w = net(bind_all(g, s), g.constant(randn(Shape{3, 8}, 2)));
  for (double v : w.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(MappingNet, DeterministicAndDifferentiable) {
  MappingNet net("m", 8, 16, 4);
  ParamStore s;
  std::mt19937_64 rng(1);
  net.init(s, block::kGenerator, rng);
  const Tensor z = randn(Shape{2, 8}, 5);
  Graph g;
  const Bound p = bind_all(g, s);
  EXPECT_EQ(net(p, g.constant(z)).value().values(), net(p, g.constant(z)).value().values());

  Tensor zz = z;
  zz.requires_grad = true;
  ScalarFn fn = [&](Graph& gg, const NamedVars& in) {
    Var w = net(Bound(gg, s, [](const std::string&) { return false; }), in.at("z"));
    return sum(square(w));
  };
  EXPECT_LT(finite_diff_check(fn, {{"z", zz}}, 1e-6), 1e-6);
  EXPECT_THROW(net(p, g.constant(Tensor(Shape{2, 7}))), ShapeError);
}

TEST(FieldGenerator, FreshGeneratorYieldsWatertightNearSphere) {
  ModelConfig mc;
  Model model(mc);
  const ParamStore s = model.init(4);
  const TetGrid grid = build_grid(12, CubeBounds::symmetric(1.6));
  for (unsigned seed : {1u, 2u, 3u}) {
    const FieldEvaluation ev =
        generate_fields(model.generator, s, grid, randn(Shape{mc.w_dim}, seed), randn(Shape{mc.w_dim}, seed + 9));
    const Extraction ex = extract_surface(grid, ev.fields, ev.colors);
    ASSERT_TRUE(watertight(ex.mesh));
    const double r0 = 0.6 * 1.6;
    for (const Vec3& v : ex.mesh.vertices) EXPECT_NEAR(v.norm(), r0, 0.3 * r0);
    for (const Vec3& c : ex.mesh.colors) {
      EXPECT_GE(c.minCoeff(), 0.0);
      EXPECT_LE(c.maxCoeff(), 1.0);
    }
  }
}

TEST(FieldGenerator, DeformationIsBounded) {
  ModelConfig mc;
  mc.field.hidden = 32;
  Model model(mc);
  ParamStore s = model.init(7);
  for (Param& p : s.params())
    if (p.name.rfind("shape.", 0) == 0) p.value = randn(p.value.shape(), 11, 5.0);
  const TetGrid grid = build_grid(6, CubeBounds::symmetric(1.6));
  const FieldEvaluation ev = generate_fields(model.generator, s, grid, randn(Shape{mc.w_dim}, 3), randn(Shape{mc.w_dim}, 4));
  for (const Vec3& d : ev.fields.deformation) EXPECT_LE(d.cwiseAbs().maxCoeff(), grid.max_deformation() + 1e-15);
}

TEST(FieldGenerator, SurfaceColorsMatchFullGridInterpolation) {
  ModelConfig mc;
  mc.field.hidden = 32;
  Model model(mc);
  const ParamStore s = model.init(2);
  const TetGrid grid = build_grid(6, CubeBounds::symmetric(1.6));
  Graph g;
  const Bound p = bind_all(g, s);
  Var pe = g.constant(model.generator.encoding(grid));
  Var w1 = g.constant(randn(Shape{mc.w_dim}, 1)), w2 = g.constant(randn(Shape{mc.w_dim}, 2));
  const GeneratedFields f = model.generator.shape_fields(p, grid, pe, w1);
  const DiffSurface surf = extract_surface(grid, f.sdf, f.positions);
  std::vector<std::size_t> all(grid.vertices.size());
  std::iota(all.begin(), all.end(), 0);
  const Var full = interpolate_on_surface(surf, model.generator.colors_at(p, pe, all, w2));
  const Var sparse = model.generator.surface_colors(p, pe, surf, w2);
  ASSERT_EQ(full.shape(), sparse.shape());
  for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(full.value()[i], sparse.value()[i], 1e-14);
}

TEST(FieldGenerator, GenerationIsDeterministic) {
  ModelConfig mc;
  mc.field.hidden = 32;
  Model model(mc);
  const ParamStore s = model.init(2);
  const TetGrid grid = build_grid(5, CubeBounds::symmetric(1.6));
  const Tensor w1 = randn(Shape{mc.w_dim}, 1), w2 = randn(Shape{mc.w_dim}, 2);
  const auto a = generate_fields(model.generator, s, grid, w1, w2);
  const auto b = generate_fields(model.generator, s, grid, w1, w2);
  EXPECT_EQ(a.fields.sdf, b.fields.sdf);
}

namespace {

// Direct 3×3 stride-2 pad-1 convolution on NCHW, weights laid out as
// [(ky, kx, cin), cout].
std::vector<double> direct_conv(const std::vector<double>& x, std::size_t b, std::size_t c, std::size_t side,
                                const Tensor& w, const Tensor& bias, std::size_t cout) {
  const std::size_t os = (side + 1) / 2;
  std::vector<double> y(b * cout * os * os);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t oy = 0; oy < os; ++oy)
        for (std::size_t ox = 0; ox < os; ++ox) {
          double acc = bias[o];
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long iy = 2 * long(oy) + ky - 1, ix = 2 * long(ox) + kx - 1;
              if (iy < 0 || ix < 0 || iy >= long(side) || ix >= long(side)) continue;
              for (std::size_t ci = 0; ci < c; ++ci)
                acc += x[((n * c + ci) * side + iy) * side + ix] * w[((ky * 3 + kx) * c + ci) * cout + o];
            }
          y[((n * cout + o) * os + oy) * os + ox] = acc > 0 ? acc : 0.2 * acc;
        }
  return y;
}

}  // namespace

TEST(Discriminator, MatchesDirectConvolutionOracle) {
  Discriminator d("d", DiscConfig{2, 9, {3, 4}});
  ParamStore s;
  std::mt19937_64 rng(3);
  d.init(s, block::kDiscRgb, rng);
  for (Param& p : s.params()) p.value = randn(p.value.shape(), 77 + p.value.numel(), 0.5);
  const Tensor img = randn(Shape{2, 2, 9, 9}, 8);

  std::vector<double> h = img.values();
  std::size_t side = 9, c = 2;
  const std::vector<std::size_t> widths{3, 4};
  for (std::size_t i = 0; i < 2; ++i) {
    h = direct_conv(h, 2, c, side, s.get("d.conv" + std::to_string(i) + ".w"), s.get("d.conv" + std::to_string(i) + ".b"),
                    widths[i]);
    side = (side + 1) / 2;
    c = widths[i];
  }
  // FC consumes NHWC order.
  const Tensor& fw = s.get("d.fc.w");
  std::vector<double> expect(2, s.get("d.fc.b")[0]);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          expect[n] += h[((n * c + ch) * side + y) * side + x] * fw[(y * side + x) * c + ch];

  Graph g;
  Var logits = d(bind_all(g, s), g.constant(img));
  ASSERT_EQ(logits.shape(), Shape{2});
  EXPECT_NEAR(logits.value()[0], expect[0], 1e-12);
  EXPECT_NEAR(logits.value()[1], expect[1], 1e-12);
}

TEST(Discriminator, ZeroWeightsGiveZeroLogit) {
  Discriminator d("d", DiscConfig{3, 8, {4, 4}});
  ParamStore s;
  std::mt19937_64 rng(3);
  d.init(s, block::kDiscRgb, rng);
  for (Param& p : s.params()) p.value = Tensor(p.value.shape(), 0.0);
  Graph g;
  for (double v : d(bind_all(g, s), g.constant(randn(Shape{3, 3, 8, 8}, 1))).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Discriminator, ImageGradientPassesFiniteDifferences) {
  Discriminator d("d", DiscConfig{3, 8, {4, 6, 8}});
  ParamStore s;
  std::mt19937_64 rng(3);
  d.init(s, block::kDiscRgb, rng);
  Tensor img = randn(Shape{1, 3, 8, 8}, 4, 0.5);
  img.requires_grad = true;
  ScalarFn fn = [&](Graph& g, const NamedVars& in) {
    return sum(d(Bound(g, s, [](const std::string&) { return false; }), in.at("x")));
  };
  EXPECT_LT(finite_diff_check(fn, {{"x", img}}, 1e-6), 1e-5);
}

TEST(Discriminator, ConstantOutputHasZeroImageGradient) {
  Discriminator d("d", DiscConfig{1, 8, {4}});
  ParamStore s;
  std::mt19937_64 rng(3);
  d.init(s, block::kDiscMask, rng);
  for (Param& p : s.params()) p.value = Tensor(p.value.shape(), 0.0);
  s.get("d.fc.b")[0] = 2.5;
  Graph g;
  Var x = g.input(randn(Shape{2, 1, 8, 8}, 1), true);
  Var out = sum(d(bind_all(g, s), x));
  const Var gx = g.gradients(out, std::span<const Var>(&x, 1))[0];
  for (double v : gx.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Discriminator, RejectsWrongChannels) {
  Discriminator d("d", DiscConfig{3, 8, {4}});
  ParamStore s;
  std::mt19937_64 rng(3);
  d.init(s, block::kDiscRgb, rng);
  Graph g;
  EXPECT_THROW(d(bind_all(g, s), g.constant(Tensor(Shape{1, 1, 8, 8}))), ShapeError);
}

TEST(Checkpoint, RoundTripAndShapeValidation) {
  ModelConfig mc;
  mc.field.hidden = 16;
  Model model(mc);
  const ParamStore s = model.init(9);
  Checkpoint ck;
  ck.meta = R"({"iteration": 5})";
  store_params(ck, s);
  const auto path = std::filesystem::temp_directory_path() / "pf3d_ckpt_test.bin";
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.meta, ck.meta);
  ParamStore fresh = model.init(10);
  restore_params(back, fresh);
  for (std::size_t i = 0; i < s.params().size(); ++i)
    EXPECT_EQ(fresh.params()[i].value.values(), s.params()[i].value.values());

  ModelConfig other = mc;
  other.field.hidden = 24;
  ParamStore mismatched = Model(other).init(1);
  EXPECT_THROW(restore_params(back, mismatched), ShapeError);

  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage";
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
