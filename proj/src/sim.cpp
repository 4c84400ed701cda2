#include "rnb/sim.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "rnb/error.hpp"

namespace rnb {
namespace {

constexpr std::uint64_t kKeyStream = 0x6b657973ULL;     // "keys"
constexpr std::uint64_t kLatentStream = 0x6c61746eULL;  // "latn"
constexpr std::uint64_t kNoiseStream = 0x6e6f6973ULL;   // "nois"

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int pool_count(int factor) {
  int k = 0;
  while ((1 << k) < factor) ++k;
  return k;
}

void fail(const std::string& what) { throw Error(Errc::ValidationError, what); }

double l2_norm(const ScalarField& f) {
  double s = 0.0;
  for (double v : f.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

void Scene::validate() const {
  if (n_tokens < 1) fail("n_tokens must be >= 1");
  if (dim < 1) fail("dim must be >= 1");
  if (!is_power_of_two(base_h) || !is_power_of_two(base_w) || base_h < 8 || base_w < 8) {
    fail("base_resolution entries must be powers of two >= 8");
  }
  if (layer_factors.empty()) fail("layer_factors must not be empty");
  for (int f : layer_factors) {
    if (!is_power_of_two(f) || f > base_h || f > base_w) {
      fail("layer_factors must be powers of two no larger than the base resolution");
    }
    if (agg_h < base_h / f || agg_w < base_w / f) {
      fail("agg_resolution must be at least every layer resolution");
    }
  }
  if (agg_h < 3 || agg_w < 3) fail("agg_resolution must be at least 3x3");
  if (concepts.empty()) fail("at least one concept is required");
  std::set<int> seen;
  std::set<std::string> names;
  for (const ConceptSpec& c : concepts) {
    if (c.name.empty()) fail("concept name must not be empty");
    if (!names.insert(c.name).second) fail("concept names must be unique: " + c.name);
    if (c.tokens.empty()) fail("concept '" + c.name + "' has no tokens");
    for (int t : c.tokens) {
      if (t < 0 || t >= n_tokens) fail("concept '" + c.name + "' has a token index out of range");
      if (!seen.insert(t).second) fail("token sets of different concepts must be disjoint");
    }
    NormBox::make(c.box.x0, c.box.y0, c.box.x1, c.box.y1);
    rasterize_box(c.box, agg_h, agg_w);
    for (int f : layer_factors) rasterize_box(c.box, base_h / f, base_w / f);
  }
  config.validate();
}

SimModel SimModel::make(const Scene& scene) {
  SimModel m;
  m.n_tokens = scene.n_tokens;
  m.dim = scene.dim;
  m.base_h = scene.base_h;
  m.base_w = scene.base_w;
  m.layer_factors = scene.layer_factors;

  m.keys = ScalarField(scene.n_tokens, scene.dim);
  auto rng = stream(scene.seed, kKeyStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : m.keys.values()) v = normal(rng);

  // Even channels vary along rows, odd channels along columns, with the
  // frequency rising every two channels.
  m.positional = ScalarField(scene.base_h * scene.base_w, scene.dim);
  for (int h = 0; h < scene.base_h; ++h) {
    for (int w = 0; w < scene.base_w; ++w) {
      for (int c = 0; c < scene.dim; ++c) {
        const double k = c / 2 + 1;
        const double v = c % 2 == 0
                             ? std::sin(std::numbers::pi * k * (h + 0.5) / scene.base_h)
                             : std::cos(std::numbers::pi * k * (w + 0.5) / scene.base_w);
        m.positional.at(h * scene.base_w + w, c) = v;
      }
    }
  }
  return m;
}

SimLatent SimLatent::initial(const Scene& scene, double sigma_q) {
  SimLatent l;
  l.seed = scene.seed;
  l.z = ScalarField(scene.base_h * scene.base_w, scene.dim);
  auto rng = stream(scene.seed, kLatentStream);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : l.z.values()) v = sigma_q * normal(rng);
  return l;
}

AttentionStack render_attention(Var z, const SimModel& model) {
  Tape& t = z.tape();
  Var features = ad::add(t.constant(model.positional), z);
  AttentionStack stack;
  stack.n_tokens = model.n_tokens;
  for (int factor : model.layer_factors) {
    Var q = features;
    int h = model.base_h;
    int w = model.base_w;
    for (int k = pool_count(factor); k > 0; --k) {
      q = ad::avg_pool2_channels(q, h, w);
      h /= 2;
      w /= 2;
    }
    stack.layers.push_back(AttentionLayer{h, w, cross_attention(q, model.keys)});
  }
  return stack;
}

GuidanceGraph build_guidance_graph(Var z, const SimModel& model, const Scene& scene,
                                   const GuidanceConfig& config) {
  if (!z.value().all_finite()) {
    throw Error(Errc::NonFiniteGradient, "non-finite latent values");
  }
  GuidanceGraph g;
  g.z = z;
  g.stack = render_attention(z, model);
  for (const ConceptSpec& c : scene.concepts) {
    g.maps.push_back(build_concept_maps(g.stack, c, scene.agg_h, scene.agg_w, config));
  }
  g.breakdown = total_energy(g.maps, config);
  switch (config.variant.baseline) {
    case Baseline::kLayoutGuidance:
      g.energy = layout_guidance_energy(g.stack, scene.concepts);
      break;
    case Baseline::kZest:
      g.energy = zest_energy(g.maps);
      break;
    case Baseline::kRnb:
      g.energy = g.breakdown.g_node;
      break;
  }
  return g;
}

GuidanceGraph build_guidance_graph(const ScalarField& z, const SimModel& model, const Scene& scene,
                                   const GuidanceConfig& config) {
  auto tape = std::make_unique<Tape>();
  Var zv = tape->leaf(z);
  GuidanceGraph g = build_guidance_graph(zv, model, scene, config);
  g.tape = std::move(tape);
  return g;
}

double StepReport::mean_iou() const {
  if (iou.empty()) return 0.0;
  double s = 0.0;
  for (double v : iou) s += v;
  return s / static_cast<double>(iou.size());
}

StepReport summarize(int step, const GuidanceGraph& graph) {
  StepReport r;
  r.step = step;
  r.g = graph.energy.scalar();
  r.lr = graph.breakdown.sum_region();
  r.lb = graph.breakdown.sum_boundary();
  for (std::size_t i = 0; i < graph.maps.size(); ++i) {
    r.iou.push_back(graph.breakdown.concepts[i].iou);
    r.tau.push_back(graph.maps[i].tau);
  }
  return r;
}

namespace {

// Descends the energy of an already built graph.
GuidanceStepResult descend(GuidanceGraph& graph, const SimLatent& latent,
                           const GuidanceConfig& config, int step) {
  graph.tape->backward(graph.energy);
  ScalarField grad = graph.z.grad();
  if (!grad.all_finite()) {
    std::ostringstream os;
    os << "non-finite latent gradient at step " << step;
    throw Error(Errc::NonFiniteGradient, os.str());
  }
  GuidanceStepResult out;
  out.grad_norm = l2_norm(grad);
  double scale = config.eta_g;
  if (config.grad_clip_norm && out.grad_norm > *config.grad_clip_norm) {
    scale *= *config.grad_clip_norm / out.grad_norm;
  }
  out.latent = latent;
  for (std::size_t i = 0; i < grad.size(); ++i) out.latent.z[i] -= scale * grad[i];
  out.report = summarize(step, graph);
  return out;
}

}  // namespace

GuidanceStepResult guidance_step(const SimLatent& latent, const SimModel& model, const Scene& scene,
                                 const GuidanceConfig& config) {
  GuidanceGraph graph = build_guidance_graph(latent.z, model, scene, config);
  return descend(graph, latent, config, 0);
}

Trajectory run_sampling(const Scene& scene, const GuidanceConfig& config,
                        const StepObserver& observer) {
  config.validate();
  const SimModel model = SimModel::make(scene);
  SimLatent latent = SimLatent::initial(scene, config.sigma_q);
  auto noise_rng = stream(scene.seed, kNoiseStream);
  std::normal_distribution<double> normal(0.0, 1.0);

  Trajectory traj;
  GuidanceGraph graph = build_guidance_graph(latent.z, model, scene, config);
  traj.steps.push_back(summarize(0, graph));
  if (observer) observer(0, graph);

  for (int t = 1; t <= config.total_steps; ++t) {
    bool changed = false;
    if (t <= config.guidance_steps) {
      latent = descend(graph, latent, config, t).latent;
      changed = true;
    } else if (config.noise_scale > 0.0) {
      for (double& v : latent.z.values()) v += config.noise_scale * normal(noise_rng);
      changed = true;
    }
    if (changed) graph = build_guidance_graph(latent.z, model, scene, config);
    traj.steps.push_back(summarize(t, graph));
    if (observer) observer(t, graph);
  }

  traj.final_latent = latent;
  for (const ConceptMaps& cm : graph.maps) {
    traj.final_mbr.push_back(cm.mbr);
    traj.gt.push_back(cm.gt_mask);
  }
  return traj;
}

}  // namespace rnb
