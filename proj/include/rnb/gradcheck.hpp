#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rnb/autodiff.hpp"

namespace rnb {

struct GradCheckReport {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  int num_compared = 0;
  int num_skipped_nonsmooth = 0;
};

struct GradCheckOptions {
  int probe_count = 64;
  double h = 1e-4;
  // A probe is skipped when either perturbed evaluation lands closer than
  // this to a hard decision surface (in addition to any actual flip).
  double smooth_margin = 0.0;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, zero_floor).
  double zero_floor = 1e-8;
};

using LossBuilder = std::function<Var(Tape&, std::span<const Var> leaves)>;

/// Compares the tape gradient of `build` at `leaves` against central
/// differences on deterministically sampled coordinates. Perturbed
/// evaluations replay the base tape's frozen values, so the reference is the
/// derivative of the loss with every stop-gradient quantity held fixed.
/// Coordinates whose perturbation changes any registered hard decision are
/// counted as skipped.
GradCheckReport gradcheck(const LossBuilder& build, const std::vector<ScalarField>& leaves,
                          const GradCheckOptions& options);

}  // namespace rnb
