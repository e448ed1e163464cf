#pragma once

// Four-phase training schedule.
//   1: generator trains against a fixed uniform camera sampler.
//   2: generator frozen, camera sampler trains, compensation on.
//   3: both train, compensation and align loss on.
//   4: generator trains, camera distribution frozen, compensation and align off.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pf3d {

struct PhaseFlags {
  int phase = 1;
  bool generator_trainable = true;
  bool camera_trainable = false;
  bool use_fixed_uniform_sampler = true;
  bool compensation_active = false;
  bool align_loss_active = false;
  bool camera_distribution_frozen = false;

  bool operator==(const PhaseFlags&) const = default;
};

inline PhaseFlags flags_for_phase(int phase) {
  switch (phase) {
    case 1: return {1, true, false, true, false, false, false};
    case 2: return {2, false, true, false, true, false, false};
    case 3: return {3, true, true, false, true, true, false};
    case 4: return {4, true, false, false, false, false, true};
    default: throw std::out_of_range("phase id must be 1..4, got " + std::to_string(phase));
  }
}

using PhaseBoundaries = std::array<double, 3>;
inline constexpr PhaseBoundaries kDefaultPhaseBoundaries = {0.2, 0.3, 0.4};

inline void validate_boundaries(const PhaseBoundaries& b) {
  if (!(b[0] > 0.0 && b[0] < b[1] && b[1] < b[2] && b[2] < 1.0))
    throw std::invalid_argument("phase boundaries must be strictly increasing inside (0, 1)");
}

// First iteration belonging to each of phases 2, 3 and 4. Integer arithmetic
// on the boundary keeps the split exact for round fractions.
inline std::array<std::int64_t, 3> phase_starts(std::int64_t total, const PhaseBoundaries& b) {
  std::array<std::int64_t, 3> s{};
  for (int i = 0; i < 3; ++i) s[i] = static_cast<std::int64_t>(std::ceil(b[i] * static_cast<double>(total) - 1e-9));
  return s;
}

inline PhaseFlags phase_of(std::int64_t iteration, std::int64_t total,
                           const PhaseBoundaries& b = kDefaultPhaseBoundaries) {
  validate_boundaries(b);
  if (total <= 0) throw std::out_of_range("total iterations must be positive");
  if (iteration < 0 || iteration >= total)
    throw std::out_of_range("iteration " + std::to_string(iteration) + " outside [0, " + std::to_string(total) + ")");
  const auto s = phase_starts(total, b);
  int phase = 1;
  for (int i = 0; i < 3; ++i)
    if (iteration >= s[i]) phase = i + 2;
  return flags_for_phase(phase);
}

inline bool is_r1_iteration(std::int64_t iteration, std::int64_t interval) {
  if (interval <= 0) return false;
  return iteration % interval == 0;
}

}  // namespace pf3d
