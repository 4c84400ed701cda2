#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "rnb/error.hpp"
#include "rnb/harness.hpp"
#include "rnb/sim.hpp"
#include "support.hpp"

using namespace rnb;
using rnb::test::fixture_dir;
using rnb::test::max_abs_diff;

namespace {

Scene one_concept_scene(std::uint64_t seed, NormBox box) {
  Scene s;
  s.seed = seed;
  s.base_h = s.base_w = 8;
  s.agg_h = s.agg_w = 8;
  s.layer_factors = {1};
  s.concepts.push_back({"a", {0}, box});
  return s;
}

nlohmann::json calibration() {
  std::ifstream in(fixture_dir() / "calibration.json");
  return nlohmann::json::parse(in);
}

// Normalized box covering the pixel rectangle of a mask.
NormBox box_of(const BinaryMask& m) {
  int r0 = m.height(), r1 = -1, c0 = m.width(), c1 = -1;
  for (int h = 0; h < m.height(); ++h) {
    for (int w = 0; w < m.width(); ++w) {
      if (!m.at(h, w)) continue;
      r0 = std::min(r0, h);
      r1 = std::max(r1, h);
      c0 = std::min(c0, w);
      c1 = std::max(c1, w);
    }
  }
  return NormBox::make(static_cast<double>(c0) / m.width(), static_cast<double>(r0) / m.height(),
                       static_cast<double>(c1 + 1) / m.width(),
                       static_cast<double>(r1 + 1) / m.height());
}

}  // namespace

TEST_CASE("scene validation") {
  Scene s = random_scene(3);
  CHECK_NOTHROW(s.validate());

  Scene bad = s;
  bad.concepts[1].tokens = {0};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.base_h = 12;
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.layer_factors = {3};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.concepts[0].tokens = {4};
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.config.lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.config.guidance_steps = bad.config.total_steps + 1;
  CHECK_THROWS_AS(bad.validate(), Error);

  bad = s;
  bad.config.eta_g = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("model and latent are functions of the seed") {
  const Scene s = random_scene(5);
  const SimModel a = SimModel::make(s);
  const SimModel b = SimModel::make(s);
  CHECK(a.keys == b.keys);
  CHECK(a.positional == b.positional);
  CHECK(SimLatent::initial(s, 1.0).z == SimLatent::initial(s, 1.0).z);

  Scene other = s;
  other.seed = 6;
  CHECK_FALSE(SimModel::make(other).keys == a.keys);
  CHECK(SimModel::make(other).positional == a.positional);
}

TEST_CASE("render_attention") {
  const Scene s = random_scene(7);
  const SimModel model = SimModel::make(s);

  Tape t1;
  Tape t2;
  const ScalarField zero(s.base_h * s.base_w, s.dim, 0.0);
  const AttentionStack a = render_attention(t1.leaf(zero), model);
  const AttentionStack b = render_attention(t2.leaf(zero), model);
  REQUIRE(a.layers.size() == 2);
  CHECK(a.layers[0].height == 8);
  CHECK(a.layers[1].height == 4);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].attention.value() == b.layers[l].attention.value());
    const ScalarField& att = a.layers[l].attention.value();
    for (int i = 0; i < att.height(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < att.width(); ++j) sum += att.at(i, j);
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }

  // A constant shift c of every query: recompute layer 0 directly.
  const double c[] = {0.3, -0.7, 1.1, 0.05};
  ScalarField shifted(s.base_h * s.base_w, s.dim);
  for (int i = 0; i < shifted.height(); ++i) {
    for (int d = 0; d < s.dim; ++d) shifted.at(i, d) = c[d];
  }
  Tape t3;
  const ScalarField got = render_attention(t3.leaf(shifted), model).layers[0].attention.value();
  for (int i = 0; i < got.height(); ++i) {
    std::vector<double> logits(model.n_tokens);
    double mx = -1e300;
    for (int j = 0; j < model.n_tokens; ++j) {
      double dot = 0.0;
      for (int d = 0; d < s.dim; ++d) dot += (model.positional.at(i, d) + c[d]) * model.keys.at(j, d);
      logits[j] = dot / std::sqrt(static_cast<double>(s.dim));
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (int j = 0; j < model.n_tokens; ++j) {
      CHECK(std::abs(got.at(i, j) - std::exp(logits[j] - mx) / z) < 1e-14);
    }
  }
}

TEST_CASE("perfect alignment is a fixed point of the guidance step") {
  int found = 0;
  for (std::uint64_t seed = 0; seed < 40 && found < 3; ++seed) {
    // Iterate box <- MBR(box) until the initial MBR reproduces the box.
    Scene s = one_concept_scene(seed, NormBox::make(0.25, 0.25, 0.75, 0.75));
    bool fixed = false;
    for (int it = 0; it < 20 && !fixed; ++it) {
      const GuidanceGraph g =
          build_guidance_graph(SimLatent::initial(s, 1.0).z, SimModel::make(s), s, s.config);
      const BinaryMask& mbr = g.maps[0].mbr;
      if (mbr == g.maps[0].gt_mask) {
        fixed = true;
      } else {
        s.concepts[0].box = box_of(mbr);
      }
    }
    if (!fixed) continue;
    ++found;
    const SimModel model = SimModel::make(s);
    const SimLatent latent = SimLatent::initial(s, 1.0);
    const GuidanceStepResult r = guidance_step(latent, model, s, s.config);
    CHECK(r.report.g == 0.0);
    CHECK(r.report.iou[0] == 1.0);
    CHECK(r.latent.z == latent.z);
  }
  CHECK(found >= 1);
}

TEST_CASE("with both terms ablated the update is the identity") {
  Scene s = random_scene(9);
  const SimModel model = SimModel::make(s);
  const SimLatent latent = SimLatent::initial(s, 1.0);
  GuidanceConfig cfg = s.config;
  cfg.eta_g = 1000.0;
  cfg.variant = parse_variant("no_region+no_boundary");
  const GuidanceStepResult r = guidance_step(latent, model, s, cfg);
  CHECK(r.report.g == 0.0);
  CHECK(r.latent.z == latent.z);

  cfg.variant = parse_variant("no_region");
  CHECK_FALSE(guidance_step(latent, model, s, cfg).latent.z == latent.z);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  Scene s = random_scene(11);
  const SimModel model = SimModel::make(s);
  const SimLatent latent = SimLatent::initial(s, 1.0);
  GuidanceConfig cfg = s.config;
  cfg.eta_g = 1.0;
  const GuidanceStepResult free = guidance_step(latent, model, s, cfg);
  REQUIRE(free.grad_norm > 0.0);
  cfg.grad_clip_norm = free.grad_norm / 4.0;
  const GuidanceStepResult clipped = guidance_step(latent, model, s, cfg);
  double moved = 0.0;
  for (std::size_t i = 0; i < latent.z.size(); ++i) {
    const double d = clipped.latent.z[i] - latent.z[i];
    moved += d * d;
  }
  CHECK(std::sqrt(moved) == doctest::Approx(free.grad_norm / 4.0).epsilon(1e-12));
}

TEST_CASE("run_sampling row counts and determinism") {
  Scene s = random_scene(13);
  GuidanceConfig cfg = s.config;
  cfg.eta_g = 500.0;
  cfg.total_steps = 0;
  cfg.guidance_steps = 0;
  CHECK(run_sampling(s, cfg).steps.size() == 1);

  cfg.total_steps = 12;
  cfg.guidance_steps = 4;
  const Trajectory a = run_sampling(s, cfg);
  const Trajectory b = run_sampling(s, cfg);
  CHECK(a.steps.size() == 13);
  CHECK(a.final_latent.z == b.final_latent.z);
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].g == b.steps[i].g);
    CHECK(a.steps[i].iou == b.steps[i].iou);
  }
  // Identity steps after the guided window leave the rows unchanged.
  for (std::size_t i = 5; i < a.steps.size(); ++i) CHECK(a.steps[i].g == a.steps[4].g);

  cfg.noise_scale = 0.05;
  const Trajectory n1 = run_sampling(s, cfg);
  const Trajectory n2 = run_sampling(s, cfg);
  CHECK(n1.final_latent.z == n2.final_latent.z);
  CHECK_FALSE(n1.final_latent.z == a.final_latent.z);
}

TEST_CASE("a non-finite latent surfaces NonFiniteGradient") {
  Scene s = random_scene(15);
  SimLatent latent = SimLatent::initial(s, 1.0);
  latent.z[3] = std::nan("");
  try {
    guidance_step(latent, SimModel::make(s), s, s.config);
    FAIL("expected NonFiniteGradient");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonFiniteGradient);
  }
}

TEST_CASE("huge step sizes saturate instead of diverging") {
  Scene s = random_scene(15);
  GuidanceConfig cfg = s.config;
  cfg.eta_g = 1e300;
  cfg.total_steps = 10;
  const Trajectory traj = run_sampling(s, cfg);
  for (const StepReport& r : traj.steps) CHECK(std::isfinite(r.g));
  CHECK(traj.final_latent.z.all_finite());
}

TEST_CASE("fixture scenes: one step below the step threshold lowers the energy") {
  const nlohmann::json cal = calibration();
  for (const auto& path : list_scenes(fixture_dir() / "suite")) {
    const Scene s = load_scene(path);
    const double threshold = cal["step_thresholds"][path.stem().string()].get<double>();
    REQUIRE(threshold > 0.0);
    const SimModel model = SimModel::make(s);
    const SimLatent latent = SimLatent::initial(s, 1.0);
    for (double eta : {threshold, std::min(threshold, s.config.eta_g)}) {
      GuidanceConfig cfg = s.config;
      cfg.eta_g = eta;
      const GuidanceStepResult r = guidance_step(latent, model, s, cfg);
      const GuidanceGraph after = build_guidance_graph(r.latent.z, model, s, cfg);
      CHECK(after.energy.scalar() < r.report.g);
    }
  }
}

TEST_CASE("fixture scenes: energy is non-increasing below the window threshold") {
  const nlohmann::json cal = calibration();
  for (const auto& path : list_scenes(fixture_dir() / "suite")) {
    const Scene s = load_scene(path);
    GuidanceConfig cfg = s.config;
    cfg.eta_g = cal["window_thresholds"][path.stem().string()].get<double>();
    REQUIRE(cfg.eta_g > 0.0);
    cfg.total_steps = cfg.guidance_steps;
    const Trajectory traj = run_sampling(s, cfg);
    const std::size_t window = std::min<std::size_t>(10, cfg.guidance_steps);
    for (std::size_t t = 1; t <= window; ++t) CHECK(traj.steps[t].g <= traj.steps[t - 1].g);
  }
}

TEST_CASE("fixture scenes: median IoU trend is eventually non-decreasing") {
  std::vector<std::vector<double>> ious;
  for (const auto& path : list_scenes(fixture_dir() / "suite")) {
    const Scene s = load_scene(path);
    std::vector<double> row;
    for (const StepReport& r : run_sampling(s, s.config).steps) row.push_back(r.mean_iou());
    ious.push_back(row);
  }
  REQUIRE(!ious.empty());
  std::vector<double> median;
  for (std::size_t t = 0; t < ious[0].size(); ++t) {
    std::vector<double> col;
    for (const auto& r : ious) col.push_back(r[t]);
    std::nth_element(col.begin(), col.begin() + col.size() / 2, col.end());
    median.push_back(col[col.size() / 2]);
  }
  // Window means over 5 steps, compared from the first guided window on.
  std::vector<double> windows;
  for (std::size_t t = 0; t + 5 <= median.size(); t += 5) {
    double m = 0.0;
    for (std::size_t k = t; k < t + 5; ++k) m += median[k];
    windows.push_back(m / 5.0);
  }
  for (std::size_t w = 1; w < windows.size(); ++w) CHECK(windows[w] >= windows[w - 1]);
}
