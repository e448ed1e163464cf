#pragma once

// Training objectives: non-saturating logistic GAN losses, R1, the SDF sign
// regularizer over surface-crossing grid edges, and the align loss.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>

#include "pf3d/autodiff.hpp"
#include "pf3d/schedule.hpp"
#include "pf3d/tetgrid.hpp"

namespace pf3d {

inline void require_nonempty_finite(const Var& v, const char* what) {
  if (v.numel() == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
  if (!v.value().all_finite()) throw NonFiniteError(what, v.id());
}

// mean softplus(−fake)
inline Var generator_adv_loss(const Var& logits_fake) {
  require_nonempty_finite(logits_fake, "generator_adv_loss");
  return mean(softplus(neg(logits_fake)));
}

// mean softplus(−real) + mean softplus(fake)
inline Var discriminator_adv_loss(const Var& logits_real, const Var& logits_fake) {
  require_nonempty_finite(logits_real, "discriminator_adv_loss");
  require_nonempty_finite(logits_fake, "discriminator_adv_loss");
  return mean(softplus(neg(logits_real))) + mean(softplus(logits_fake));
}

struct AdversarialLosses {
  Var g_loss;
  Var d_loss;
};

inline AdversarialLosses adversarial_losses(const Var& logits_real, const Var& logits_fake) {
  return {generator_adv_loss(logits_fake), discriminator_adv_loss(logits_real, logits_fake)};
}

// (γ/2)·mean_b ‖∂D(x_b)/∂x_b‖². `real` must be a graph input that requires
// grad; the result is differentiable w.r.t. the discriminator parameters.
inline Var r1_penalty(const std::function<Var(const Var&)>& disc, const Var& real, double gamma) {
  if (!(gamma >= 0.0)) throw std::invalid_argument("r1_penalty: gamma must be non-negative");
  if (!real.requires_grad()) throw std::invalid_argument("r1_penalty: real images must require grad");
  Graph& g = real.graph();
  const Var logits = disc(real);
  const Var grad = g.gradients(sum(logits), std::span<const Var>(&real, 1), true)[0];
  if (!grad.value().all_finite()) throw NonFiniteError("r1_penalty", grad.id());
  const double batch = real.shape().empty() ? 1.0 : static_cast<double>(real.shape()[0]);
  return scale(sum(square(grad)), 0.5 * gamma / batch);
}

// Grid edges whose endpoint signs disagree (zero counts as outside).
inline std::vector<std::array<std::uint32_t, 2>> sign_crossing_edges(const TetGrid& grid, std::span<const double> sdf) {
  if (sdf.size() != grid.vertices.size()) throw ShapeError("sign_crossing_edges: sdf size does not match grid");
  std::vector<std::array<std::uint32_t, 2>> out;
  for (const auto& e : grid.edges)
    if (is_inside(sdf[e[0]]) != is_inside(sdf[e[1]])) out.push_back(e);
  return out;
}

// Binary cross-entropy pushing each crossing edge's endpoint toward the
// other endpoint's sign, averaged over crossing edges. Zero without crossings.
inline Var sdf_reg_loss(const TetGrid& grid, const Var& sdf) {
  if (sdf.shape() != Shape{grid.vertices.size()}) throw ShapeError("sdf_reg_loss: sdf must be [V]");
  const auto edges = sign_crossing_edges(grid, sdf.value().data());
  Graph& g = sdf.graph();
  if (edges.empty()) return g.scalar(0.0);
  std::vector<std::size_t> ia, ib;
  Tensor ta(Shape{edges.size()}), tb(Shape{edges.size()});
  for (std::size_t i = 0; i < edges.size(); ++i) {
    ia.push_back(edges[i][0]);
    ib.push_back(edges[i][1]);
    // BCE-with-logits target is the other endpoint's "outside" bit.
    ta[i] = is_inside(sdf.value()[edges[i][1]]) ? -1.0 : 1.0;
    tb[i] = is_inside(sdf.value()[edges[i][0]]) ? -1.0 : 1.0;
  }
  const Shape es{edges.size()};
  Var sa = gather(sdf, make_index(std::move(ia)), es);
  Var sb = gather(sdf, make_index(std::move(ib)), es);
  // target 1 -> softplus(−x); target 0 -> softplus(x); i.e. softplus(−t·x) with t = ±1.
  Var la = softplus(neg(sa * g.constant(ta)));
  Var lb = softplus(neg(sb * g.constant(tb)));
  return scale(sum(la + lb), 1.0 / static_cast<double>(edges.size()));
}

inline double align_loss(const ShapeStats& s, double c0) { return std::abs(s.contraction - c0) + s.translation.norm(); }

inline Var align_loss(const DiffStats& s, double c0) { return abs(s.contraction - c0) + norm(s.translation); }

struct LossReport {
  std::int64_t iteration = 0;
  int phase = 1;
  double g_adv_rgb = 0, g_adv_mask = 0;
  double d_rgb = 0, d_mask = 0;
  double r1_rgb = 0, r1_mask = 0;
  double l_reg = 0, l_align = 0;
  double g_total = 0, d_total = 0;
  double total = 0;
  int collapsed = 0;

  static std::string csv_header() {
    return "iteration,phase,g_adv_rgb,g_adv_mask,d_rgb,d_mask,r1_rgb,r1_mask,l_reg,l_align,g_total,d_total,total,"
           "collapsed";
  }
  std::string csv_row() const {
    std::ostringstream o;
    o.precision(17);
    o << iteration << ',' << phase << ',' << g_adv_rgb << ',' << g_adv_mask << ',' << d_rgb << ',' << d_mask << ','
      << r1_rgb << ',' << r1_mask << ',' << l_reg << ',' << l_align << ',' << g_total << ',' << d_total << ','
      << total << ',' << collapsed;
    return o.str();
  }
  bool all_finite() const {
    for (double v : {g_adv_rgb, g_adv_mask, d_rgb, d_mask, r1_rgb, r1_mask, l_reg, l_align, g_total, d_total, total})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct LossWeights {
  double mu1 = 0.01;  // L_reg
  double mu2 = 0.1;   // L_align
};

// Generator-side total: both adversarial heads + μ1·L_reg + μ2·L_align, the
// align term only when the phase enables it.
inline Var generator_total(const Var& g_rgb, const Var& g_mask, const Var& l_reg, const Var& l_align,
                           const LossWeights& w, const PhaseFlags& flags) {
  Var t = g_rgb + g_mask + scale(l_reg, w.mu1);
  if (flags.align_loss_active && w.mu2 != 0.0) t = t + scale(l_align, w.mu2);
  return t;
}

// Scalar form used for reporting; mirrors generator_total.
inline double generator_total(const LossReport& r, const LossWeights& w, const PhaseFlags& flags) {
  double t = r.g_adv_rgb + r.g_adv_mask + w.mu1 * r.l_reg;
  if (flags.align_loss_active && w.mu2 != 0.0) t += w.mu2 * r.l_align;
  return t;
}

// Fills g_total, d_total and total; R1 only counts on lazy iterations.
inline LossReport total_loss(LossReport r, const LossWeights& w, const PhaseFlags& flags, bool r1_iteration) {
  if (!r1_iteration) r.r1_rgb = r.r1_mask = 0.0;
  r.g_total = generator_total(r, w, flags);
  r.d_total = r.d_rgb + r.d_mask + r.r1_rgb + r.r1_mask;
  r.total = r.g_total + r.d_total;
  if (!r.all_finite()) throw NonFiniteError("total_loss", -1);
  return r;
}

}  // namespace pf3d
