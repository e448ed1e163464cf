#pragma once

// Phased adversarial training: one discriminator update followed by one
// generator/camera update per iteration, Adam on the trainable blocks, lazy
// R1 and a frozen camera distribution for the final phase.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pf3d/camera.hpp"
#include "pf3d/datagen.hpp"
#include "pf3d/losses.hpp"
#include "pf3d/nets.hpp"
#include "pf3d/render.hpp"
#include "pf3d/schedule.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

struct TrainConfig {
  std::int64_t total_iterations = 10000;
  PhaseBoundaries phase_boundaries = kDefaultPhaseBoundaries;
  std::size_t batch_size = 32;
  double learning_rate = 0.0002;
  double camera_learning_rate = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double r1_gamma = 80.0;
  std::int64_t r1_interval = 16;
  LossWeights weights;
  double c0 = 1.0;
  int grid_resolution = 16;
  double grid_half_width = 1.6;
  double tau = 1e-4;
  std::size_t snapshot_probes = 1024;
  std::uint64_t seed = 0;
  CameraPoseDistribution camera_init = initial_camera_distribution();
  FixedSampler fixed_sampler;
  ModelConfig model;

  void validate() const {
    validate_boundaries(phase_boundaries);
    if (total_iterations < 1) throw std::invalid_argument("train: total_iterations must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !(camera_learning_rate >= 0.0))
      throw std::invalid_argument("train: learning rates must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("train: Adam betas must lie in [0, 1)");
    if (!(r1_gamma >= 0.0)) throw std::invalid_argument("train: r1_gamma must be >= 0");
    if (r1_interval < 1) throw std::invalid_argument("train: r1_interval must be >= 1");
    if (!(c0 > 0.0)) throw std::invalid_argument("train: c0 must be positive");
    if (grid_resolution < 2) throw std::invalid_argument("train: grid_resolution must be >= 2");
    if (!(grid_half_width > 0.0)) throw std::invalid_argument("train: grid_half_width must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be positive");
    if (snapshot_probes < 1) throw std::invalid_argument("train: snapshot_probes must be >= 1");
    for (double v : camera_init.stddev)
      if (!(v > 0.0)) throw std::invalid_argument("train: camera init sigma must be positive");
    if (!(fixed_sampler.theta_hi >= fixed_sampler.theta_lo && fixed_sampler.phi_hi >= fixed_sampler.phi_lo))
      throw std::invalid_argument("train: fixed sampler ranges need lo <= hi");
  }

  RenderOptions render_options() const {
    RenderOptions o;
    o.intrinsics.width = o.intrinsics.height = static_cast<int>(model.image_size);
    o.tau = tau;
    return o;
  }
};

struct AdamSlot {
  Tensor m, v;
  std::int64_t t = 0;
};

struct TrainState {
  std::int64_t iteration = 0;
  std::mt19937_64 rng;
  ParamStore params;
  std::map<std::string, AdamSlot> adam;
  std::optional<CameraPoseDistribution> frozen_cameras;
  std::vector<std::string> diagnostics;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& why, LossReport r)
      : std::runtime_error(why + " [" + LossReport::csv_header() + "] [" + r.csv_row() + "]"), report(std::move(r)) {}
  LossReport report;
};

inline void adam_update(Tensor& param, const Tensor& grad, AdamSlot& s, double lr, double b1, double b2, double eps) {
  if (s.m.shape() != param.shape()) {
    s.m = Tensor(param.shape());
    s.v = Tensor(param.shape());
    s.t = 0;
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = grad[i];
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
    param[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
  }
}

// Sampled latents and camera noise for one batch.
struct LatentBatch {
  Tensor z1, z2, z3;                   // [B, z]
  std::vector<std::array<double, 6>> eps;
  std::vector<Camera6D> fixed;         // phase 1 draws
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), model_(cfg_.model) {
    cfg_.validate();
    grid_ = build_grid(cfg_.grid_resolution, CubeBounds::symmetric(cfg_.grid_half_width));
    pe_ = model_.generator.encoding(grid_);
    state_.params = model_.init(cfg_.seed);
    state_.rng.seed(cfg_.seed ^ 0x5eedf00dULL);
  }

  const TrainConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  const TetGrid& grid() const { return grid_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }

  PhaseFlags current_phase() const {
    return phase_of(std::min(state_.iteration, cfg_.total_iterations - 1), cfg_.total_iterations,
                    cfg_.phase_boundaries);
  }

  // One decoded Gaussian per probe latent; the learned camera distribution
  // is their equal-weight mixture.
  std::vector<CameraPoseDistribution> learned_components(std::size_t probes = 1024,
                                                         std::uint64_t probe_seed = 7) const {
    Graph g;
    Graph::NoGradGuard ng(g);
    Bound p(g, state_.params, [](const std::string&) { return false; });
    std::mt19937_64 rng(probe_seed);
    const Var raw = model_.camera.raw(p, g.constant(normal_tensor(Shape{probes, cfg_.model.z_dim}, 1.0, rng)));
    std::vector<CameraPoseDistribution> comps;
    comps.reserve(probes);
    for (std::size_t b = 0; b < probes; ++b) {
      auto row = raw.value().data().subspan(b * 2 * kCameraDims, 2 * kCameraDims);
      comps.push_back(decode_distribution(row, cfg_.camera_init));
    }
    return comps;
  }

  CameraPoseDistribution learned_distribution(std::size_t probes = 1024, std::uint64_t probe_seed = 7) const {
    return mixture_moments(learned_components(probes, probe_seed));
  }

  LossReport step(const Batch& real) {
    if (real.images.rank() != 4 || real.images.dim(0) == 0) throw std::invalid_argument("train_step: empty batch");
    const std::size_t side = cfg_.model.image_size;
    if (real.images.shape() != (Shape{real.size(), 3, side, side}) ||
        real.masks.shape() != (Shape{real.size(), 1, side, side}))
      throw ShapeError("train_step: batch does not match the model image size");
    if (state_.iteration >= cfg_.total_iterations) throw std::out_of_range("train_step: schedule already finished");

    const PhaseFlags flags = phase_of(state_.iteration, cfg_.total_iterations, cfg_.phase_boundaries);
    if (flags.camera_distribution_frozen && !state_.frozen_cameras)
      state_.frozen_cameras = learned_distribution(cfg_.snapshot_probes);
    const bool r1_now = is_r1_iteration(state_.iteration, cfg_.r1_interval) && cfg_.r1_gamma > 0.0;
    const std::size_t batch = real.size();
    const LatentBatch lat = draw_latents(batch, flags);

    LossReport rep;
    rep.iteration = state_.iteration;
    rep.phase = flags.phase;

    // Generator forward; its graph is kept for the generator update.
    Graph gg;
    auto g_trainable = [&](const std::string& blk) {
      if (blk == block::kGenerator) return flags.generator_trainable;
      if (blk == block::kCamera) return flags.camera_trainable;
      return false;
    };
    Bound pg(gg, state_.params, g_trainable);
    const Fakes fakes = generate(gg, pg, lat, flags);
    rep.collapsed = static_cast<int>(batch - fakes.valid.size());
    if (fakes.valid.empty()) throw TrainingAborted("every generated shape collapsed", rep);
    if (2 * static_cast<std::size_t>(rep.collapsed) > batch)
      state_.diagnostics.push_back("iteration " + std::to_string(state_.iteration) + ": " +
                                   std::to_string(rep.collapsed) + " of " + std::to_string(batch) +
                                   " generated shapes collapsed");

    discriminator_update(real, fakes, r1_now, rep);
    generator_update(gg, pg, fakes, flags, batch, rep);

    LossWeights w = effective_weights(flags);
    try {
      rep = total_loss(rep, w, flags, r1_now);
    } catch (const NonFiniteError&) {
      throw TrainingAborted("non-finite loss", rep);
    }
    ++state_.iteration;
    return rep;
  }

  // Phase 2 optimizes the adversarial terms only.
  LossWeights effective_weights(const PhaseFlags& flags) const {
    LossWeights w = cfg_.weights;
    if (!flags.generator_trainable) w.mu1 = 0.0;
    return w;
  }

  // Plain generation of one shape from explicit latents.
  FieldEvaluation evaluate_fields(const Tensor& z1, const Tensor& z2) const {
    Graph g;
    Graph::NoGradGuard ng(g);
    Bound p(g, state_.params, [](const std::string&) { return false; });
    const Tensor w1 = model_.map_shape(p, g.constant(reshape_latent(z1))).value();
    const Tensor w2 = model_.map_texture(p, g.constant(reshape_latent(z2))).value();
    return generate_fields(model_.generator, state_.params, grid_, flatten(w1), flatten(w2));
  }

  SurfaceMesh generate_mesh(const Tensor& z1, const Tensor& z2) const {
    const FieldEvaluation fe = evaluate_fields(z1, z2);
    return extract_surface(grid_, fe.fields, fe.colors).mesh;
  }

  SurfaceMesh sample_mesh(std::mt19937_64& rng) const {
    const Tensor z1 = normal_tensor(Shape{cfg_.model.z_dim}, 1.0, rng);
    const Tensor z2 = normal_tensor(Shape{cfg_.model.z_dim}, 1.0, rng);
    return generate_mesh(z1, z2);
  }

  // Camera draw used for previews and area statistics: the frozen snapshot if
  // present, otherwise the learned distribution.
  Camera6D sample_preview_camera(std::mt19937_64& rng, const CameraPoseDistribution& dist) const {
    std::normal_distribution<double> n(0.0, 1.0);
    std::array<double, 6> e{};
    for (double& v : e) v = n(rng);
    return sample_camera(dist, e);
  }

  // Mean mask coverage of n rendered samples.
  double mean_silhouette_area(std::size_t n, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const CameraPoseDistribution dist = state_.frozen_cameras ? *state_.frozen_cameras : learned_distribution();
    const RenderOptions opts = cfg_.render_options();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const SurfaceMesh m = sample_mesh(rng);
      const Camera6D cam = sample_preview_camera(rng, dist);
      if (m.empty()) continue;
      const RenderedPair r = render(m, cam, opts);
      double a = 0.0;
      for (double v : r.mask.data()) a += v;
      acc += a / static_cast<double>(r.mask.numel());
    }
    return acc / static_cast<double>(n);
  }

  // ---- checkpoints ----

  Checkpoint checkpoint(const nlohmann::json& extra = nlohmann::json::object()) const {
    Checkpoint ck;
    nlohmann::json meta = extra;
    meta["iteration"] = state_.iteration;
    std::ostringstream rng;
    rng << state_.rng;
    meta["rng"] = rng.str();
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& [name, slot] : state_.adam) steps[name] = slot.t;
    meta["adam_steps"] = steps;
    if (state_.frozen_cameras) meta["frozen_cameras"] = distribution_to_json(*state_.frozen_cameras);
    ck.meta = meta.dump();
    store_params(ck, state_.params);
    for (const auto& [name, slot] : state_.adam) {
      ck.tensors.emplace_back("adam_m/" + name, slot.m);
      ck.tensors.emplace_back("adam_v/" + name, slot.v);
    }
    return ck;
  }

  void restore(const Checkpoint& ck) {
    restore_params(ck, state_.params);
    const auto meta = nlohmann::json::parse(ck.meta);
    state_.iteration = meta.at("iteration").get<std::int64_t>();
    std::istringstream rng(meta.at("rng").get<std::string>());
    rng >> state_.rng;
    if (!rng) throw std::runtime_error("checkpoint: corrupt RNG state");
    state_.adam.clear();
    for (const auto& [name, t] : meta.at("adam_steps").items()) {
      const Tensor* m = ck.find("adam_m/" + name);
      const Tensor* v = ck.find("adam_v/" + name);
      if (!m || !v) throw std::runtime_error("checkpoint: missing optimizer state for " + name);
      state_.adam[name] = AdamSlot{*m, *v, t.get<std::int64_t>()};
    }
    state_.frozen_cameras.reset();
    if (meta.contains("frozen_cameras")) state_.frozen_cameras = distribution_from_json(meta.at("frozen_cameras"));
  }

 private:
  struct Fakes {
    std::vector<std::size_t> valid;  // batch slots that produced a surface
    Var rgb;                         // [Bv, 3, H, W]
    Var mask;                        // [Bv, 1, H, W]
    Var l_reg;                       // mean over the batch
    Var l_align;                     // mean over valid slots
  };

  static Tensor reshape_latent(const Tensor& z) { return Tensor(Shape{1, z.numel()}, z.values()); }
  static Tensor flatten(const Tensor& t) { return Tensor(Shape{t.numel()}, t.values()); }

  LatentBatch draw_latents(std::size_t batch, const PhaseFlags& flags) {
    LatentBatch l;
    const std::size_t z = cfg_.model.z_dim;
    l.z1 = normal_tensor(Shape{batch, z}, 1.0, state_.rng);
    l.z2 = normal_tensor(Shape{batch, z}, 1.0, state_.rng);
    l.z3 = normal_tensor(Shape{batch, z}, 1.0, state_.rng);
    std::normal_distribution<double> n(0.0, 1.0);
    l.eps.resize(batch);
    for (auto& e : l.eps)
      for (double& v : e) v = n(state_.rng);
    if (flags.use_fixed_uniform_sampler) {
      for (std::size_t b = 0; b < batch; ++b) l.fixed.push_back(cfg_.fixed_sampler.sample(state_.rng));
    }
    return l;
  }

  Var camera_for(Graph& g, const Bound& p, const Var& raw, const LatentBatch& lat, std::size_t b,
                 const PhaseFlags& flags) const {
    if (flags.use_fixed_uniform_sampler) return camera_var(g, lat.fixed[b]);
    if (flags.camera_distribution_frozen) return camera_var(g, sample_camera(*state_.frozen_cameras, lat.eps[b]));
    (void)p;
    const Var row = reshape(slice_rows(raw, b, b + 1), Shape{2 * kCameraDims});
    return sample_camera(decode_distribution(row, cfg_.camera_init), lat.eps[b]);
  }

  Fakes generate(Graph& g, const Bound& p, const LatentBatch& lat, const PhaseFlags& flags) const {
    const std::size_t batch = lat.z1.dim(0);
    const Var pe = g.constant(pe_);
    const Var w1 = model_.map_shape(p, g.constant(lat.z1));
    const Var w2 = model_.map_texture(p, g.constant(lat.z2));
    const bool learned = !flags.use_fixed_uniform_sampler && !flags.camera_distribution_frozen;
    const Var raw = learned ? model_.camera.raw(p, g.constant(lat.z3)) : Var();
    const RenderOptions opts = cfg_.render_options();

    Fakes f;
    std::vector<Var> images, regs, aligns;
    for (std::size_t b = 0; b < batch; ++b) {
      const Var w1b = reshape(slice_rows(w1, b, b + 1), Shape{cfg_.model.w_dim});
      const Var w2b = reshape(slice_rows(w2, b, b + 1), Shape{cfg_.model.w_dim});
      const GeneratedFields fields = model_.generator.shape_fields(p, grid_, pe, w1b);
      regs.push_back(sdf_reg_loss(grid_, fields.sdf));
      const Var cam = camera_for(g, p, raw, lat, b, flags);
      auto color_fn = [&](const DiffSurface& s) { return model_.generator.surface_colors(p, pe, s, w2b); };
      try {
        GeneratedRender r = render_generated(grid_, fields.sdf, fields.positions, color_fn, cam, opts,
                                             flags.compensation_active, cfg_.c0);
        images.push_back(reshape(r.image, Shape{r.image.numel()}));
        aligns.push_back(align_loss(r.stats, cfg_.c0));
        f.valid.push_back(b);
      } catch (const CollapsedShapeError&) {
      }
    }
    f.l_reg = scale(sum(concat(reshape_all(regs))), 1.0 / static_cast<double>(batch));
    if (f.valid.empty()) return f;
    f.l_align = scale(sum(concat(reshape_all(aligns))), 1.0 / static_cast<double>(f.valid.size()));

    const std::size_t side = cfg_.model.image_size, np = side * side, nv = f.valid.size();
    const Var flat = concat(images);
    std::vector<std::size_t> irgb, imask;
    for (std::size_t k = 0; k < nv; ++k) {
      for (std::size_t i = 0; i < 3 * np; ++i) irgb.push_back(k * 4 * np + i);
      for (std::size_t i = 0; i < np; ++i) imask.push_back(k * 4 * np + 3 * np + i);
    }
    f.rgb = gather(flat, make_index(std::move(irgb)), Shape{nv, 3, side, side});
    f.mask = gather(flat, make_index(std::move(imask)), Shape{nv, 1, side, side});
    return f;
  }

  static std::vector<Var> reshape_all(const std::vector<Var>& xs) {
    std::vector<Var> out;
    out.reserve(xs.size());
    for (const Var& x : xs) out.push_back(reshape(x, Shape{1}));
    return out;
  }

  void apply_gradients(const Bound& p, const std::vector<Var>& grads, const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const Tensor& gr = grads[i].value();
      if (!gr.all_finite()) throw NonFiniteError("gradient:" + names[i], grads[i].id());
      Param* prm = find_param(names[i]);
      const double lr = prm->block == block::kCamera ? cfg_.camera_learning_rate : cfg_.learning_rate;
      adam_update(prm->value, gr, state_.adam[names[i]], lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
    }
    (void)p;
  }

  Param* find_param(const std::string& name) {
    for (Param& q : state_.params.params())
      if (q.name == name) return &q;
    throw std::out_of_range("unknown parameter " + name);
  }

  static void collect(const Bound& p, const std::function<bool(const std::string&)>& pick, const ParamStore& store,
                      std::vector<Var>& vars, std::vector<std::string>& names) {
    for (const Param& q : store.params())
      if (pick(q.block)) {
        vars.push_back(p(q.name));
        names.push_back(q.name);
      }
  }

  void discriminator_update(const Batch& real, const Fakes& fakes, bool r1_now, LossReport& rep) {
    Graph g;
    auto is_disc = [](const std::string& blk) { return blk == block::kDiscRgb || blk == block::kDiscMask; };
    Bound p(g, state_.params, is_disc);
    const Var real_rgb = g.input(real.images, r1_now, "real_rgb");
    const Var real_mask = g.input(real.masks, r1_now, "real_mask");
    const Var fake_rgb = g.constant(fakes.rgb.value());
    const Var fake_mask = g.constant(fakes.mask.value());
    const Var d_rgb = discriminator_adv_loss(model_.d_rgb(p, real_rgb), model_.d_rgb(p, fake_rgb));
    const Var d_mask = discriminator_adv_loss(model_.d_mask(p, real_mask), model_.d_mask(p, fake_mask));
    rep.d_rgb = d_rgb.item();
    rep.d_mask = d_mask.item();
    Var total = d_rgb + d_mask;
    if (r1_now) {
      const Var r1r = r1_penalty([&](const Var& x) { return model_.d_rgb(p, x); }, real_rgb, cfg_.r1_gamma);
      const Var r1m = r1_penalty([&](const Var& x) { return model_.d_mask(p, x); }, real_mask, cfg_.r1_gamma);
      rep.r1_rgb = r1r.item();
      rep.r1_mask = r1m.item();
      // Lazy regularization: the penalty is scaled by the interval.
      total = total + scale(r1r + r1m, static_cast<double>(cfg_.r1_interval));
    }
    if (!std::isfinite(total.item())) throw TrainingAborted("non-finite discriminator loss", rep);
    std::vector<Var> vars;
    std::vector<std::string> names;
    collect(p, is_disc, state_.params, vars, names);
    apply_gradients(p, g.gradients(total, vars), names);
  }

  void generator_update(Graph& g, const Bound& pg, const Fakes& fakes, const PhaseFlags& flags, std::size_t batch,
                        LossReport& rep) {
    // Discriminators with their freshly updated weights, as constants.
    Bound pd(g, state_.params, [](const std::string&) { return false; });
    auto adv = [&](const Var& logits) {
      // Collapsed slots count as the worst per-sample loss in the batch.
      const Var per = softplus(neg(logits));
      double worst = 0.0;
      for (double v : per.value().data()) worst = std::max(worst, v);
      const double penalty = worst * static_cast<double>(batch - fakes.valid.size());
      return scale(sum(per) + penalty, 1.0 / static_cast<double>(batch));
    };
    const Var g_rgb = adv(model_.d_rgb(pd, fakes.rgb));
    const Var g_mask = adv(model_.d_mask(pd, fakes.mask));
    rep.g_adv_rgb = g_rgb.item();
    rep.g_adv_mask = g_mask.item();
    rep.l_reg = fakes.l_reg.item();
    rep.l_align = fakes.l_align.item();
    if (!flags.generator_trainable && !flags.camera_trainable) return;
    const Var total = generator_total(g_rgb, g_mask, fakes.l_reg, fakes.l_align, effective_weights(flags), flags);
    if (!std::isfinite(total.item())) throw TrainingAborted("non-finite generator loss", rep);
    auto pick = [&](const std::string& blk) {
      return (blk == block::kGenerator && flags.generator_trainable) || (blk == block::kCamera && flags.camera_trainable);
    };
    std::vector<Var> vars;
    std::vector<std::string> names;
    collect(pg, pick, state_.params, vars, names);
    apply_gradients(pg, g.gradients(total, vars), names);
  }

  TrainConfig cfg_;
  Model model_;
  TetGrid grid_;
  Tensor pe_;
  TrainState state_;
};

// Full run over a loader; `on_step` sees every report (logging, checkpoints).
template <class OnStep>
void train(Trainer& trainer, const DatasetLoader& loader, OnStep&& on_step) {
  const std::int64_t total = trainer.config().total_iterations;
  while (trainer.state().iteration < total) {
    const std::int64_t it = trainer.state().iteration;
    const Batch b = loader.batch_at(static_cast<std::uint64_t>(it));
    const LossReport r = trainer.step(b);
    on_step(r);
  }
}

}  // namespace pf3d
