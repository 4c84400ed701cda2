// rnb_calibrate: one-shot step size calibration for a fixture directory.
//
// 1. eta_g grid: quarter-decade log grid, full R&B energy, mean final mIoU
//    over the directory. The calibrated eta is the grid argmax (smallest on
//    ties).
// 2. Per-scene thresholds, by bisection in log space: the boundary below
//    which one guidance step from the initial latent strictly lowers the
//    energy, and the boundary below which the energy is non-increasing over
//    the whole guided window.
//
// Writes the results to --report; with --write the calibrated eta is also
// stored in every scene's config.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rnb/error.hpp"
#include "rnb/harness.hpp"

namespace {

bool step_decreases(const rnb::Scene& scene, const rnb::SimModel& model,
                    const rnb::SimLatent& latent, double eta) {
  rnb::GuidanceConfig cfg = scene.config;
  cfg.eta_g = eta;
  const rnb::GuidanceStepResult r = rnb::guidance_step(latent, model, scene, cfg);
  const rnb::GuidanceGraph after = rnb::build_guidance_graph(r.latent.z, model, scene, cfg);
  return after.energy.scalar() < r.report.g;
}

bool window_non_increasing(const rnb::Scene& scene, double eta) {
  rnb::GuidanceConfig cfg = scene.config;
  cfg.eta_g = eta;
  cfg.total_steps = cfg.guidance_steps;
  const rnb::Trajectory traj = rnb::run_sampling(scene, cfg);
  for (std::size_t t = 1; t < traj.steps.size(); ++t) {
    if (traj.steps[t].g > traj.steps[t - 1].g) return false;
  }
  return true;
}

// Largest bracket point known to satisfy `ok`; 0 when even `lo` fails.
template <typename Pred>
double bisect(Pred ok, double lo, double hi, int iterations) {
  if (!ok(lo)) return 0.0;
  if (ok(hi)) return hi;
  for (int i = 0; i < iterations; ++i) {
    const double mid = std::sqrt(lo * hi);
    (ok(mid) ? lo : hi) = mid;
  }
  return lo;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrate eta_g on a fixture directory"};
  std::string scenes_dir;
  std::string report_path;
  int grid_lo = 4;
  int grid_hi = 20;
  double lo = 1e-2;
  double hi = 1e6;
  int iterations = 40;
  bool write = false;
  app.add_option("--scenes", scenes_dir, "Directory of scene JSON files")->required();
  app.add_option("--report", report_path, "Calibration JSON output path")->required();
  app.add_option("--grid-lo", grid_lo, "Smallest grid exponent k of 10^(k/4)");
  app.add_option("--grid-hi", grid_hi, "Largest grid exponent k of 10^(k/4)");
  app.add_option("--lo", lo, "Lower end of the bisection bracket");
  app.add_option("--hi", hi, "Upper end of the bisection bracket");
  app.add_option("--iterations", iterations, "Bisection iterations");
  app.add_flag("--write", write, "Store the calibrated eta_g in every scene file");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto paths = rnb::list_scenes(scenes_dir);
    if (paths.empty()) throw rnb::Error(rnb::Errc::Io, "no scenes in " + scenes_dir);
    std::vector<rnb::Scene> scenes;
    for (const auto& p : paths) scenes.push_back(rnb::load_scene(p));

    nlohmann::json out;
    out["grid"] = nlohmann::json::array();
    double best_eta = 0.0;
    double best_miou = -1.0;
    for (int k = grid_lo; k <= grid_hi; ++k) {
      const double eta = std::pow(10.0, k / 4.0);
      double total = 0.0;
      for (rnb::Scene s : scenes) {
        s.config.eta_g = eta;
        s.config.variant = rnb::Variant{};
        total += rnb::run_scene(s, {}).final_miou;
      }
      const double miou = total / static_cast<double>(scenes.size());
      std::printf("eta=%-12.6g mean_miou=%.6f\n", eta, miou);
      out["grid"].push_back({{"eta_g", eta}, {"mean_miou", miou}});
      if (miou > best_miou) {
        best_miou = miou;
        best_eta = eta;
      }
    }
    std::printf("calibrated eta_g=%.6g mean_miou=%.6f\n", best_eta, best_miou);
    out["eta_g"] = best_eta;
    out["mean_miou"] = best_miou;

    out["step_thresholds"] = nlohmann::json::object();
    out["window_thresholds"] = nlohmann::json::object();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const rnb::Scene& scene = scenes[i];
      const rnb::SimModel model = rnb::SimModel::make(scene);
      const rnb::SimLatent latent = rnb::SimLatent::initial(scene, scene.config.sigma_q);
      const double step = bisect(
          [&](double eta) { return step_decreases(scene, model, latent, eta); }, lo, hi,
          iterations);
      const double window = bisect(
          [&](double eta) { return window_non_increasing(scene, eta); }, lo, hi, iterations);
      const std::string name = paths[i].stem().string();
      std::printf("%s step_threshold=%.6g window_threshold=%.6g\n", name.c_str(), step, window);
      out["step_thresholds"][name] = step;
      out["window_thresholds"][name] = window;
    }

    rnb::write_file_atomic(report_path, out.dump(2) + "\n");
    if (write) {
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        scenes[i].config.eta_g = best_eta;
        rnb::write_file_atomic(paths[i], rnb::scene_json(scenes[i]));
      }
    }
  } catch (const rnb::Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", rnb::errc_name(e.code()), e.what());
    return e.code() == rnb::Errc::Io ? 4 : 2;
  }
  return 0;
}
