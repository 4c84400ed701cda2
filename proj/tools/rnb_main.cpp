// rnb: command line front end for the guidance library.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rnb/error.hpp"
#include "rnb/gradcheck.hpp"
#include "rnb/harness.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

int exit_code(rnb::Errc code) {
  switch (code) {
    case rnb::Errc::NonFiniteGradient:
      return kExitNumerical;
    case rnb::Errc::Io:
      return kExitIo;
    default:
      return kExitValidation;
  }
}

std::vector<rnb::Variant> parse_variants(const std::string& list) {
  std::vector<rnb::Variant> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(rnb::parse_variant(item));
  }
  if (out.empty()) throw rnb::Error(rnb::Errc::ValidationError, "no variants given");
  return out;
}

void print_run(const rnb::RunReport& r) {
  std::printf("scene=%s variant=%s rows=%zu final_miou=%.6f", r.scene_name.c_str(),
              rnb::variant_name(r.config.variant).c_str(), r.rows.size(), r.final_miou);
  if (r.steps_to_iou_half) std::printf(" steps_to_iou_0_5=%d", *r.steps_to_iou_half);
  std::printf(" wall=%.3fs\n", r.wall_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region and boundary attention guidance on a synthetic denoiser"};
  app.require_subcommand(1);

  rnb::RunOptions run_opts;
  std::string scene_path;
  std::string out_dir;
  std::string ablate;

  auto* run = app.add_subcommand("run", "Run guided sampling on one scene");
  run->add_option("--scene", scene_path, "Scene JSON file")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_flag("--dump-maps", run_opts.dump_maps, "Write per-step PGM maps");
  run->add_option("--ablate", ablate,
                  "Variant tag: layout_guidance, zest, or ablation flags joined by '+' "
                  "(no_ste, fixed_threshold, no_region, no_boundary)");
  run->add_flag("--grad-through-tau", run_opts.grad_through_tau,
                "Let gradients flow through the threshold and normalization extremes");

  std::uint64_t gc_seed = 0;
  int gc_probes = 64;
  double gc_tol = 1e-3;
  double gc_h = 1e-4;
  bool gc_through_tau = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the energy gradient");
  gc->add_option("--seed", gc_seed, "Random scene seed")->required();
  gc->add_option("--probes", gc_probes, "Number of probed latent coordinates");
  gc->add_option("--step", gc_h, "Central difference step");
  gc->add_option("--tol", gc_tol, "Maximum relative error");
  gc->add_flag("--grad-through-tau", gc_through_tau, "Check the undetached threshold path");

  std::string param;
  std::vector<double> values;
  auto* sw = app.add_subcommand("sweep", "Final mIoU over a list of parameter values");
  sw->add_option("--scene", scene_path, "Scene JSON file")->required();
  sw->add_option("--param", param, "GuidanceConfig field name")->required();
  sw->add_option("--values", values, "Comma separated values")->required()->delimiter(',');
  sw->add_option("--out", out_dir, "Write sweep.csv here instead of stdout");
  sw->add_option("--ablate", ablate, "Variant to sweep");

  std::string scenes_dir;
  std::string variants = "rnb,no_ste,layout_guidance,zest";
  auto* suite = app.add_subcommand("suite", "Run every scene of a directory under each variant");
  suite->add_option("--scenes", scenes_dir, "Directory of scene JSON files")->required();
  suite->add_option("--out", out_dir, "Output directory")->required();
  suite->add_option("--variants", variants, "Comma separated variant tags");

  std::uint64_t ns_seed = 0;
  rnb::RandomSceneSpec ns_spec;
  double ns_eta = -1.0;
  auto* ns = app.add_subcommand("new-scene", "Print a random two-box scene as JSON");
  ns->add_option("--seed", ns_seed, "Scene seed")->required();
  ns->add_option("--base", ns_spec.base, "Base resolution");
  ns->add_option("--concepts", ns_spec.concepts, "Number of boxes");
  ns->add_option("--eta", ns_eta, "Guidance step size written into the config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!ablate.empty()) run_opts.variant = rnb::parse_variant(ablate);

    if (*run) {
      print_run(rnb::run_experiment(scene_path, out_dir, run_opts));
    } else if (*gc) {
      rnb::Scene scene = rnb::random_scene(gc_seed);
      rnb::GuidanceConfig cfg = scene.config;
      cfg.grad_through_tau = gc_through_tau;
      rnb::GradCheckOptions opts;
      opts.probe_count = gc_probes;
      opts.h = gc_h;
      opts.seed = gc_seed;
      const rnb::GradCheckReport rep = rnb::check_energy_gradient(scene, cfg, opts);
      const bool ok = rep.num_compared > 0 && rep.max_rel_error <= gc_tol;
      std::printf("seed=%llu compared=%d skipped_nonsmooth=%d max_abs=%.3e max_rel=%.3e %s\n",
                  static_cast<unsigned long long>(gc_seed), rep.num_compared,
                  rep.num_skipped_nonsmooth, rep.max_abs_error, rep.max_rel_error,
                  ok ? "ok" : "FAILED");
      return ok ? 0 : kExitNumerical;
    } else if (*sw) {
      const rnb::Scene scene = rnb::load_scene(scene_path);
      const auto rows = rnb::sweep(scene, param, values, run_opts);
      const std::string csv = rnb::sweep_csv(param, rows);
      if (out_dir.empty()) {
        std::cout << csv;
      } else {
        rnb::write_file_atomic(std::filesystem::path(out_dir) / "sweep.csv", csv);
      }
    } else if (*suite) {
      const auto vs = parse_variants(variants);
      const auto entries = rnb::run_suite(scenes_dir, out_dir, vs, run_opts);
      for (rnb::Variant v : vs) {
        std::printf("%s mean_miou=%.6f\n", rnb::variant_name(v).c_str(),
                    rnb::suite_mean_miou(entries, v));
      }
    } else if (*ns) {
      rnb::Scene scene = rnb::random_scene(ns_seed, ns_spec);
      if (ns_eta > 0.0) scene.config.eta_g = ns_eta;
      std::cout << rnb::scene_json(scene);
    }
  } catch (const rnb::Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", rnb::errc_name(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error [Io]: %s\n", e.what());
    return kExitIo;
  }
  return 0;
}
