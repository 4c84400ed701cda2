#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rnb/attention.hpp"
#include "rnb/config.hpp"
#include "rnb/field.hpp"
#include "rnb/gradcheck.hpp"
#include "rnb/sim.hpp"

namespace rnb {

/// Parses the JSON scene schema. Unknown keys are rejected. Throws
/// ParseError (with line/column or field path) for malformed input and
/// ValidationError for well-formed scenes that break an invariant.
Scene parse_scene(std::string_view text);
Scene load_scene(const std::filesystem::path& path);

/// Mean over concepts of box_iou(mbr, gt). Throws MissingRun when empty.
double miou_metric(std::span<const ConceptMaps> maps);
double miou_from_masks(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt);
/// mIoU of the trajectory's final masks. Throws MissingRun when empty.
double final_miou(const Trajectory& trajectory);

struct RunOptions {
  bool dump_maps = false;
  std::optional<Variant> variant;  // overrides the scene's config
  bool grad_through_tau = false;
};

struct RunReport {
  std::string scene_name;
  std::vector<std::string> concept_names;
  GuidanceConfig config;
  std::vector<StepReport> rows;
  double final_miou = 0.0;
  std::optional<int> steps_to_iou_half;
  double wall_seconds = 0.0;  // not part of report.json
};

GuidanceConfig effective_config(const Scene& scene, const RunOptions& options);

/// Runs the sampler and assembles the report without touching the disk.
RunReport run_scene(const Scene& scene, const RunOptions& options, const StepObserver& observer = {});

/// Writes metrics.csv, report.json and (with dump_maps) maps/*.pgm into
/// out_dir. Nothing is written unless the run succeeds.
RunReport run_experiment(const Scene& scene, const std::filesystem::path& out_dir,
                         const RunOptions& options, std::string_view scene_name = {});
RunReport run_experiment(const std::filesystem::path& scene_path,
                         const std::filesystem::path& out_dir, const RunOptions& options);

std::string metrics_csv(const RunReport& report);
std::string report_json(const RunReport& report);

/// Binary P5, maxval 255, values min-max scaled (constant field -> zeros).
std::string pgm_bytes(const ScalarField& field);
void dump_pgm(const ScalarField& field, const std::filesystem::path& path);
/// Reads a P5 file back as integer levels 0..255.
ScalarField read_pgm(const std::filesystem::path& path);

/// Sets a numeric GuidanceConfig field by its scene-schema name. Throws
/// UnknownParam.
void set_param(GuidanceConfig& config, std::string_view name, double value);

struct SweepRow {
  double value = 0.0;
  double final_miou = 0.0;
};

std::vector<SweepRow> sweep(const Scene& scene, std::string_view param,
                            std::span<const double> values, const RunOptions& options = {});
std::string sweep_csv(std::string_view param, std::span<const SweepRow> rows);

struct SuiteEntry {
  std::string scene;
  Variant variant;
  RunReport report;
};

/// Scene files (*.json) of a directory in lexicographic order.
std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& dir);

/// Runs every scene under every variant; writes out/<scene>/<variant>/ and
/// out/suite.csv when out_dir is non-empty.
std::vector<SuiteEntry> run_suite(const std::filesystem::path& scenes_dir,
                                  const std::filesystem::path& out_dir,
                                  std::span<const Variant> variants,
                                  const RunOptions& options = {});
std::string suite_csv(std::span<const SuiteEntry> entries);
/// Mean final mIoU per variant over the suite's scenes.
double suite_mean_miou(std::span<const SuiteEntry> entries, Variant variant);

struct RandomSceneSpec {
  int base = 8;
  int n_tokens = 4;
  int dim = 4;
  int concepts = 2;
};

/// Random scene with pairwise disjoint boxes snapped to the coarsest layer
/// grid; concept i owns token i.
Scene random_scene(std::uint64_t seed, const RandomSceneSpec& spec = {});
/// Serializes a scene in the schema parse_scene reads.
std::string scene_json(const Scene& scene);

/// Gradient check of the scene's guidance energy with respect to the
/// initial latent.
GradCheckReport check_energy_gradient(const Scene& scene, const GuidanceConfig& config,
                                      const GradCheckOptions& options);

/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace rnb
