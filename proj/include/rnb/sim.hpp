#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rnb/attention.hpp"
#include "rnb/autodiff.hpp"
#include "rnb/config.hpp"
#include "rnb/energy.hpp"

namespace rnb {

/// Problem definition: simulator shape, grounded concepts and guidance
/// hyperparameters.
struct Scene {
  std::uint64_t seed = 0;
  int n_tokens = 4;
  int dim = 4;
  int base_h = 16;
  int base_w = 16;
  std::vector<int> layer_factors{1, 2};
  int agg_h = 16;
  int agg_w = 16;
  std::vector<ConceptSpec> concepts;
  GuidanceConfig config;

  /// Throws ValidationError naming the first violated invariant.
  void validate() const;
};

/// Fixed "denoiser" weights: token keys and a positional feature field.
struct SimModel {
  int n_tokens = 0;
  int dim = 0;
  int base_h = 0;
  int base_w = 0;
  std::vector<int> layer_factors;
  ScalarField keys;        // n_tokens x dim, seeded standard normal
  ScalarField positional;  // (base_h*base_w) x dim, sinusoidal

  static SimModel make(const Scene& scene);
};

/// Latent query offsets, (base_h*base_w) x dim.
struct SimLatent {
  ScalarField z;
  std::uint64_t seed = 0;

  /// Standard normal draw scaled by sigma_q, from the scene seed.
  static SimLatent initial(const Scene& scene, double sigma_q);
};

/// Layer l sees avg_pool2^k(positional + z) (factor 2^k) and attends to the
/// keys through cross_attention.
AttentionStack render_attention(Var z, const SimModel& model);

/// A fully built guidance graph on its own tape.
struct GuidanceGraph {
  std::unique_ptr<Tape> tape;
  Var z;
  AttentionStack stack;
  std::vector<ConceptMaps> maps;
  LossBreakdown breakdown;  // region/boundary terms under the active variant
  Var energy;               // what the update descends
};

/// Builds onto z's tape; `tape` of the result stays empty. Throws
/// NonFiniteGradient for a non-finite latent.
GuidanceGraph build_guidance_graph(Var z, const SimModel& model, const Scene& scene,
                                   const GuidanceConfig& config);
/// Builds on a fresh tape owned by the result.
GuidanceGraph build_guidance_graph(const ScalarField& z, const SimModel& model, const Scene& scene,
                                   const GuidanceConfig& config);

struct StepReport {
  int step = 0;
  double g = 0.0;
  double lr = 0.0;
  double lb = 0.0;
  std::vector<double> iou;
  std::vector<double> tau;

  double mean_iou() const;
};

StepReport summarize(int step, const GuidanceGraph& graph);

struct GuidanceStepResult {
  SimLatent latent;
  StepReport report;  // evaluated at the incoming latent
  double grad_norm = 0.0;
};

/// One update z <- z - eta_g * grad g. Throws NonFiniteGradient.
GuidanceStepResult guidance_step(const SimLatent& latent, const SimModel& model, const Scene& scene,
                                 const GuidanceConfig& config);

struct Trajectory {
  std::vector<StepReport> steps;  // initial evaluation plus one row per step
  SimLatent final_latent;
  std::vector<BinaryMask> final_mbr;
  std::vector<BinaryMask> gt;
};

/// Called once per evaluated row with the graph it came from.
using StepObserver = std::function<void(int step, const GuidanceGraph& graph)>;

/// Guided for steps 1..G, identity (plus optional noise) for G+1..T.
/// NonFiniteGradient is rethrown with the failing step index.
Trajectory run_sampling(const Scene& scene, const GuidanceConfig& config,
                        const StepObserver& observer = {});

}  // namespace rnb
