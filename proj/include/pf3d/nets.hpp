#pragma once

// Small networks: latent mapping MLPs, the camera head, coordinate field
// generators for shape and texture, and two strided-conv image discriminators.
// Parameters live in a ParamStore and are bound into a Graph per step.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pf3d/autodiff.hpp"
#include "pf3d/camera.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

// Parameter blocks: a phase freezes or trains whole blocks.
namespace block {
inline const std::string kGenerator = "generator";
inline const std::string kCamera = "camera";
inline const std::string kDiscRgb = "d_rgb";
inline const std::string kDiscMask = "d_mask";
}  // namespace block

struct Param {
  std::string name;
  std::string block;
  Tensor value;
};

class ParamStore {
 public:
  Tensor& add(const std::string& name, const std::string& blk, Tensor init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back({name, blk, std::move(init)});
    return params_.back().value;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& get(const std::string& name) { return params_.at(lookup(name)).value; }
  const Tensor& get(const std::string& name) const { return params_.at(lookup(name)).value; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t count(const std::string& blk) const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.block == blk ? p.value.numel() : 0;
    return n;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

// Parameters placed on a graph. Blocks for which `trainable` is false are
// bound as constants.
class Bound {
 public:
  Bound() = default;
  Bound(Graph& g, const ParamStore& store, const std::function<bool(const std::string&)>& trainable) : g_(&g) {
    for (const Param& p : store.params()) vars_[p.name] = g.input(p.value, trainable(p.block), p.name);
  }
  const Var& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("parameter not bound: " + name);
    return it->second;
  }
  Graph& graph() const { return *g_; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  Graph* g_ = nullptr;
  std::map<std::string, Var> vars_;
};

inline Bound bind_all(Graph& g, const ParamStore& store) {
  return Bound(g, store, [](const std::string&) { return true; });
}

inline Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, stddev);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// y = x·W + b with x [N, in].
struct Linear {
  std::string name;
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(std::string n, std::size_t i, std::size_t o) : name(std::move(n)), in(i), out(o) {}

  void init(ParamStore& s, const std::string& blk, std::mt19937_64& rng, double gain = std::sqrt(2.0)) const {
    s.add(name + ".w", blk, normal_tensor(Shape{in, out}, gain / std::sqrt(static_cast<double>(in)), rng));
    s.add(name + ".b", blk, Tensor(Shape{out}));
  }
  Var operator()(const Bound& p, const Var& x) const { return matmul(x, p(name + ".w")) + p(name + ".b"); }
};

inline constexpr double kLeakySlope = 0.2;

// z [B, z_dim] -> w [B, w_dim] through two hidden layers.
struct MappingNet {
  Linear l0, l1, l2;

  MappingNet() = default;
  MappingNet(const std::string& name, std::size_t z_dim, std::size_t hidden, std::size_t w_dim)
      : l0(name + ".0", z_dim, hidden), l1(name + ".1", hidden, hidden), l2(name + ".2", hidden, w_dim) {}

  void init(ParamStore& s, const std::string& blk, std::mt19937_64& rng) const {
    l0.init(s, blk, rng);
    l1.init(s, blk, rng);
    l2.init(s, blk, rng, 1.0);
  }
  std::size_t z_dim() const { return l0.in; }
  std::size_t w_dim() const { return l2.out; }

  Var operator()(const Bound& p, const Var& z) const {
    if (z.shape().size() != 2 || z.shape()[1] != z_dim())
      throw ShapeError("map_latent: expected [B," + std::to_string(z_dim()) + "], got " + shape_str(z.shape()));
    return l2(p, leaky_relu(l1(p, leaky_relu(l0(p, z), kLeakySlope)), kLeakySlope));
  }
};

// z3 -> w3 -> 12 raw camera parameters (decoded by the camera module).
struct CameraNet {
  MappingNet mapping;
  Linear head;

  CameraNet() = default;
  CameraNet(std::size_t z_dim, std::size_t hidden, std::size_t w_dim)
      : mapping("cam_map", z_dim, hidden, w_dim), head("cam_head", w_dim, 2 * kCameraDims) {}

  void init(ParamStore& s, std::mt19937_64& rng) const {
    mapping.init(s, block::kCamera, rng);
    head.init(s, block::kCamera, rng, 1e-2);
  }
  Var raw(const Bound& p, const Var& z) const { return head(p, mapping(p, z)); }
};

// Positional encoding of u = v / half_width: [u, sin(2^l π u), cos(2^l π u)].
inline Tensor positional_encoding(std::span<const Vec3> pts, double half_width, int bands) {
  const std::size_t dim = 3 + 6 * static_cast<std::size_t>(bands);
  Tensor t(Shape{pts.size(), dim});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double* row = t.data().data() + i * dim;
    const Vec3 u = pts[i] / half_width;
    for (int c = 0; c < 3; ++c) row[c] = u[c];
    for (int l = 0; l < bands; ++l) {
      const double f = std::ldexp(kPi, l);
      for (int c = 0; c < 3; ++c) {
        row[3 + 6 * l + c] = std::sin(f * u[c]);
        row[6 + 6 * l + c] = std::cos(f * u[c]);
      }
    }
  }
  return t;
}

// MLP over (PE(v) ⊕ w). The first layer is split so the latent part is
// computed once per shape and broadcast over vertices.
struct FieldNet {
  std::string name;
  std::size_t pe_dim = 0, w_dim = 0, hidden = 0, out = 0;
  int layers = 4;

  FieldNet() = default;
  FieldNet(std::string n, std::size_t pe, std::size_t w, std::size_t h, int nl, std::size_t o)
      : name(std::move(n)), pe_dim(pe), w_dim(w), hidden(h), out(o), layers(nl) {}

  void init(ParamStore& s, const std::string& blk, std::mt19937_64& rng, double out_gain) const {
    const double g0 = std::sqrt(2.0 / static_cast<double>(pe_dim + w_dim));
    s.add(name + ".in_pe", blk, normal_tensor(Shape{pe_dim, hidden}, g0, rng));
    s.add(name + ".in_w", blk, normal_tensor(Shape{w_dim, hidden}, g0, rng));
    s.add(name + ".in_b", blk, Tensor(Shape{hidden}));
    for (int l = 1; l < layers; ++l) Linear(name + ".h" + std::to_string(l), hidden, hidden).init(s, blk, rng);
    Linear(name + ".out", hidden, out).init(s, blk, rng, out_gain);
  }

  // pe [N, pe_dim], w [w_dim] -> [N, out]
  Var operator()(const Bound& p, const Var& pe, const Var& w) const {
    if (w.shape() != Shape{w_dim}) throw ShapeError(name + ": latent must be [" + std::to_string(w_dim) + "]");
    Var lat = reshape(matmul(reshape(w, Shape{1, w_dim}), p(name + ".in_w")), Shape{hidden});
    Var h = leaky_relu(matmul(pe, p(name + ".in_pe")) + (lat + p(name + ".in_b")), kLeakySlope);
    for (int l = 1; l < layers; ++l) h = leaky_relu(Linear(name + ".h" + std::to_string(l), hidden, hidden)(p, h), kLeakySlope);
    return Linear(name + ".out", hidden, out)(p, h);
  }
};

struct FieldConfig {
  std::size_t w_dim = 32;
  std::size_t hidden = 128;
  int layers = 4;
  int pe_bands = 4;
  double sphere_fraction = 0.6;  // prior SDF radius as a fraction of the grid half-width
};

// Differentiable generated fields on a grid.
struct GeneratedFields {
  Var sdf;        // [V]
  Var positions;  // [V, 3] deformed vertex positions
  Var deformation;
};

struct FieldGenerator {
  FieldConfig cfg;
  FieldNet shape, texture;

  FieldGenerator() = default;
  explicit FieldGenerator(const FieldConfig& c)
      : cfg(c),
        shape("shape", 3 + 6 * static_cast<std::size_t>(c.pe_bands), c.w_dim, c.hidden, c.layers, 4),
        texture("texture", 3 + 6 * static_cast<std::size_t>(c.pe_bands), c.w_dim, c.hidden, c.layers, 3) {}

  void init(ParamStore& s, std::mt19937_64& rng) const {
    shape.init(s, block::kGenerator, rng, 0.1);
    texture.init(s, block::kGenerator, rng, 1.0);
  }

  static double half_width(const TetGrid& grid) { return 0.5 * grid.extent.size().maxCoeff(); }

  // Prior sphere SDF ‖v − centre‖ − r0 around the grid centre.
  Tensor prior_sdf(const TetGrid& grid) const {
    const Vec3 centre = 0.5 * (grid.extent.lo + grid.extent.hi);
    const double r = cfg.sphere_fraction * half_width(grid);
    Tensor t(Shape{grid.vertices.size()});
    for (std::size_t i = 0; i < grid.vertices.size(); ++i) t[i] = (grid.vertices[i] - centre).norm() - r;
    return t;
  }

  Tensor encoding(const TetGrid& grid) const { return positional_encoding(grid.vertices, half_width(grid), cfg.pe_bands); }

  // s = prior + residual; Δv = δ_max·tanh(·).
  GeneratedFields shape_fields(const Bound& p, const TetGrid& grid, const Var& pe, const Var& w1) const {
    Graph& g = p.graph();
    const std::size_t v = grid.vertices.size();
    Var out = shape(p, pe, w1);
    Var s_res = gather(out, make_column_index(v, 4, 0), Shape{v});
    GeneratedFields f;
    f.sdf = s_res + g.constant(prior_sdf(grid));
    f.deformation = scale(tanh(slice_cols(out, 1, 4)), grid.max_deformation());
    f.positions = f.deformation + g.constant(from_points(grid.vertices));
    return f;
  }

  // rgb in [0,1] at the listed grid vertices (original coordinates).
  Var colors_at(const Bound& p, const Var& pe, const std::vector<std::size_t>& vertex_ids, const Var& w2) const {
    Var sub = gather_rows(pe, make_index(vertex_ids));
    return sigmoid(texture(p, sub, w2));
  }

  // Texture evaluated only at the endpoints of surface-crossing edges, then
  // interpolated with the same weights as the vertex positions.
  Var surface_colors(const Bound& p, const Var& pe, const DiffSurface& surf, const Var& w2) const {
    const auto& edges = surf.topology.crossing_edges;
    if (edges.empty()) return p.graph().constant(Tensor(Shape{0, 3}));
    std::map<std::size_t, std::size_t> slot;
    std::vector<std::size_t> ids;
    for (const auto& e : edges)
      for (auto v : e)
        if (slot.emplace(v, ids.size()).second) ids.push_back(v);
    Var rgb = colors_at(p, pe, ids, w2);
    std::vector<std::size_t> ia, ib;
    for (const auto& [a, b] : edges) {
      ia.push_back(slot.at(a));
      ib.push_back(slot.at(b));
    }
    return surf.weight_a * gather_rows(rgb, make_index(std::move(ia))) +
           surf.weight_b * gather_rows(rgb, make_index(std::move(ib)));
  }

  static detail::Index make_column_index(std::size_t rows, std::size_t width, std::size_t col) {
    std::vector<std::size_t> idx(rows);
    for (std::size_t r = 0; r < rows; ++r) idx[r] = r * width + col;
    return make_index(std::move(idx));
  }

  static Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
    const std::size_t rows = x.shape()[0], width = x.shape()[1], w = end - begin;
    std::vector<std::size_t> idx;
    idx.reserve(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = begin; c < end; ++c) idx.push_back(r * width + c);
    return gather(x, make_index(std::move(idx)), Shape{rows, w});
  }
};

// Plain evaluation: per-vertex fields plus per-vertex colors on the whole grid.
struct FieldEvaluation {
  FieldSample fields;
  std::vector<Vec3> colors;
};

inline FieldEvaluation generate_fields(const FieldGenerator& gen, const ParamStore& store, const TetGrid& grid,
                                       const Tensor& w1, const Tensor& w2) {
  Graph g;
  Graph::NoGradGuard ng(g);
  Bound p(g, store, [](const std::string&) { return false; });
  Var pe = g.constant(gen.encoding(grid));
  const GeneratedFields f = gen.shape_fields(p, grid, pe, g.constant(w1));
  std::vector<std::size_t> all(grid.vertices.size());
  std::iota(all.begin(), all.end(), 0);
  const Var rgb = gen.colors_at(p, pe, all, g.constant(w2));
  FieldEvaluation out;
  out.fields.sdf = f.sdf.value().values();
  out.fields.deformation = to_points(f.deformation.value());
  out.colors = to_points(rgb.value());
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

struct DiscConfig {
  std::size_t channels = 3;
  std::size_t size = 32;  // square input side
  std::vector<std::size_t> widths = {16, 32, 64};
};

// 3×3 stride-2 convolutions (padding 1) via index gather + matmul, NHWC inside.
struct Discriminator {
  std::string name;
  DiscConfig cfg;

  Discriminator() = default;
  Discriminator(std::string n, DiscConfig c) : name(std::move(n)), cfg(std::move(c)) {
    if (cfg.widths.empty()) throw std::invalid_argument("discriminator needs at least one conv layer");
    std::size_t s = cfg.size;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      if (s < 2) throw std::invalid_argument("discriminator: input too small for the number of stages");
      s = (s + 1) / 2;
    }
  }

  std::size_t final_side() const {
    std::size_t s = cfg.size;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) s = (s + 1) / 2;
    return s;
  }

  void init(ParamStore& st, const std::string& blk, std::mt19937_64& rng) const {
    std::size_t cin = cfg.channels;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      Linear(name + ".conv" + std::to_string(i), 9 * cin, cfg.widths[i]).init(st, blk, rng);
      cin = cfg.widths[i];
    }
    const std::size_t s = final_side();
    Linear(name + ".fc", s * s * cin, 1).init(st, blk, rng, 1.0);
  }

  // Patch index for one conv over NHWC input of the given sizes; `pad` is the
  // flat index of an appended zero.
  static detail::Index conv_index(std::size_t batch, std::size_t side, std::size_t cin, std::size_t& out_side) {
    out_side = (side + 1) / 2;
    const std::size_t pad = batch * side * side * cin;
    std::vector<std::size_t> idx;
    idx.reserve(batch * out_side * out_side * 9 * cin);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oy = 0; oy < out_side; ++oy)
        for (std::size_t ox = 0; ox < out_side; ++ox)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long iy = 2 * static_cast<long>(oy) + ky - 1, ix = 2 * static_cast<long>(ox) + kx - 1;
              const bool in = iy >= 0 && ix >= 0 && iy < static_cast<long>(side) && ix < static_cast<long>(side);
              for (std::size_t c = 0; c < cin; ++c)
                idx.push_back(in ? ((b * side + iy) * side + ix) * cin + c : pad);
            }
    return make_index(std::move(idx));
  }

  // images [B, C, H, W] -> logits [B]
  Var operator()(const Bound& p, const Var& images) const {
    const Shape& sh = images.shape();
    if (sh.size() != 4 || sh[1] != cfg.channels || sh[2] != cfg.size || sh[3] != cfg.size)
      throw ShapeError(name + ": expected [B," + std::to_string(cfg.channels) + "," + std::to_string(cfg.size) + "," +
                       std::to_string(cfg.size) + "], got " + shape_str(sh));
    Graph& g = images.graph();
    const std::size_t batch = sh[0], side = cfg.size, c0 = cfg.channels;
    // NCHW -> NHWC
    std::vector<std::size_t> perm;
    perm.reserve(images.numel());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          for (std::size_t c = 0; c < c0; ++c) perm.push_back(((b * c0 + c) * side + y) * side + x);
    Var h = gather(reshape(images, Shape{images.numel()}), make_index(std::move(perm)), Shape{images.numel()});
    std::size_t s = side, cin = c0;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      std::size_t os = 0;
      auto idx = conv_index(batch, s, cin, os);
      Var padded = concat({h, g.constant(Tensor(Shape{1}))});
      Var patches = gather(padded, idx, Shape{batch * os * os, 9 * cin});
      h = leaky_relu(Linear(name + ".conv" + std::to_string(i), 9 * cin, cfg.widths[i])(p, patches), kLeakySlope);
      h = reshape(h, Shape{h.numel()});
      s = os;
      cin = cfg.widths[i];
    }
    Var flat = reshape(h, Shape{batch, s * s * cin});
    return reshape(Linear(name + ".fc", s * s * cin, 1)(p, flat), Shape{batch});
  }
};

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t z_dim = 32;
  std::size_t map_hidden = 64;
  std::size_t w_dim = 32;
  FieldConfig field;
  std::size_t image_size = 32;
  std::vector<std::size_t> disc_widths = {16, 32, 64};
};

struct Model {
  ModelConfig cfg;
  MappingNet map_shape, map_texture;
  CameraNet camera;
  FieldGenerator generator;
  Discriminator d_rgb, d_mask;

  explicit Model(const ModelConfig& c)
      : cfg(c),
        map_shape("map_shape", c.z_dim, c.map_hidden, c.w_dim),
        map_texture("map_texture", c.z_dim, c.map_hidden, c.w_dim),
        camera(c.z_dim, c.map_hidden, c.w_dim),
        generator([&] {
          FieldConfig f = c.field;
          f.w_dim = c.w_dim;
          return f;
        }()),
        d_rgb("d_rgb", DiscConfig{3, c.image_size, c.disc_widths}),
        d_mask("d_mask", DiscConfig{1, c.image_size, c.disc_widths}) {}

  ParamStore init(std::uint64_t seed) const {
    ParamStore s;
    std::mt19937_64 rng(seed);
    map_shape.init(s, block::kGenerator, rng);
    map_texture.init(s, block::kGenerator, rng);
    generator.init(s, rng);
    camera.init(s, rng);
    d_rgb.init(s, block::kDiscRgb, rng);
    d_mask.init(s, block::kDiscMask, rng);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'P', 'F', '3', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string meta;  // free-form JSON
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {
template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T take(std::istream& i) {
  T v;
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
inline void put_string(std::ostream& o, const std::string& s) {
  put<std::uint64_t>(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string take_string(std::istream& i) {
  const auto n = take<std::uint64_t>(i);
  if (n > (1ull << 32)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  i.read(s.data(), static_cast<std::streamsize>(n));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot open " + path.string() + " for writing");
  o.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(o, kCheckpointVersion);
  detail::put_string(o, ck.meta);
  detail::put<std::uint64_t>(o, ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    detail::put_string(o, name);
    detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(o, d);
    o.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!o) throw std::runtime_error("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  i.read(magic, sizeof magic);
  if (!i || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error("not a pf3d checkpoint: " + path.string());
  const auto version = detail::take<std::uint32_t>(i);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = detail::take_string(i);
  const auto n = detail::take<std::uint64_t>(i);
  for (std::uint64_t k = 0; k < n; ++k) {
    std::string name = detail::take_string(i);
    const auto rank = detail::take<std::uint32_t>(i);
    if (rank > 8) throw std::runtime_error("checkpoint: corrupt rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::take<std::uint64_t>(i);
    Tensor t(shape);
    i.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!i) throw std::runtime_error("checkpoint: truncated tensor " + name);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

inline void store_params(Checkpoint& ck, const ParamStore& s, const std::string& prefix = "param/") {
  for (const Param& p : s.params()) ck.tensors.emplace_back(prefix + p.name, p.value);
}

// Copies tensors into an existing store; every parameter must be present with
// an identical shape.
inline void restore_params(const Checkpoint& ck, ParamStore& s, const std::string& prefix = "param/") {
  for (Param& p : s.params()) {
    const Tensor* t = ck.find(prefix + p.name);
    if (!t) throw std::runtime_error("checkpoint is missing parameter " + p.name);
    if (t->shape() != p.value.shape())
      throw ShapeError("checkpoint shape mismatch for " + p.name + ": file has " + shape_str(t->shape()) +
                       ", model expects " + shape_str(p.value.shape()));
    p.value = *t;
    p.value.requires_grad = false;
  }
}

}  // namespace pf3d
