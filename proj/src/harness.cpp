#include "rnb/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <random>
#include <sstream>

#include "json.hpp"
#include "rnb/energy.hpp"
#include "rnb/error.hpp"

namespace rnb {
namespace {

using nlohmann::json;

[[noreturn]] void parse_fail(const std::string& path, const std::string& what) {
  throw Error(Errc::ParseError, "field '" + path + "': " + what);
}

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& path) {
  if (!obj.is_object()) parse_fail(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || item.key() == k;
    if (!ok) parse_fail(join_path(path, item.key()), "unknown key");
  }
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) parse_fail(path, "expected a number");
  return v.get<double>();
}

long long as_integer(const json& v, const std::string& path) {
  if (!v.is_number_integer()) parse_fail(path, "expected an integer");
  return v.get<long long>();
}

int as_int(const json& v, const std::string& path) {
  const long long x = as_integer(v, path);
  if (x < -(1LL << 31) || x >= (1LL << 31)) parse_fail(path, "integer out of range");
  return static_cast<int>(x);
}

std::vector<int> as_int_list(const json& v, const std::string& path) {
  if (!v.is_array()) parse_fail(path, "expected an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(as_int(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

std::pair<int, int> as_resolution(const json& v, const std::string& path) {
  const auto xs = as_int_list(v, path);
  if (xs.size() != 2) parse_fail(path, "expected [height, width]");
  return {xs[0], xs[1]};
}

void parse_config(const json& obj, GuidanceConfig& cfg) {
  check_keys(obj,
             {"lambda", "lambda_s", "lambda_a", "eta_g", "sharpness", "total_steps",
              "guidance_steps", "noise_scale", "grad_clip_norm"},
             "config");
  const auto num = [&](const char* key, double& dst) {
    if (obj.contains(key)) dst = as_number(obj.at(key), join_path("config", key));
  };
  const auto integer = [&](const char* key, int& dst) {
    if (obj.contains(key)) dst = as_int(obj.at(key), join_path("config", key));
  };
  num("lambda", cfg.lambda);
  num("lambda_s", cfg.lambda_s);
  num("lambda_a", cfg.lambda_a);
  num("eta_g", cfg.eta_g);
  num("sharpness", cfg.sharpness);
  integer("total_steps", cfg.total_steps);
  integer("guidance_steps", cfg.guidance_steps);
  num("noise_scale", cfg.noise_scale);
  if (obj.contains("grad_clip_norm")) {
    const json& v = obj.at("grad_clip_norm");
    if (v.is_null()) {
      cfg.grad_clip_norm.reset();
    } else {
      cfg.grad_clip_norm = as_number(v, "config.grad_clip_norm");
    }
  }
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json config_json(const GuidanceConfig& c) {
  json j;
  j["lambda"] = c.lambda;
  j["lambda_s"] = c.lambda_s;
  j["lambda_a"] = c.lambda_a;
  j["eta_g"] = c.eta_g;
  j["sharpness"] = c.sharpness;
  j["total_steps"] = c.total_steps;
  j["guidance_steps"] = c.guidance_steps;
  j["noise_scale"] = c.noise_scale;
  j["grad_clip_norm"] = c.grad_clip_norm ? json(*c.grad_clip_norm) : json(nullptr);
  j["sigma_q"] = c.sigma_q;
  j["grad_through_tau"] = c.grad_through_tau;
  if (c.variant.fixed_threshold) j["fixed_threshold"] = c.fixed_threshold;
  return j;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

Scene parse_scene(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    std::size_t col = 1;
    const std::size_t stop = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::ostringstream os;
    os << "line " << line << ", column " << col << ": malformed JSON";
    throw Error(Errc::ParseError, os.str());
  }

  check_keys(doc,
             {"seed", "n_tokens", "dim", "base_resolution", "layer_factors", "agg_resolution",
              "concepts", "config"},
             "");
  Scene s;
  if (doc.contains("seed")) {
    const long long seed = as_integer(doc.at("seed"), "seed");
    if (seed < 0) parse_fail("seed", "must be non-negative");
    s.seed = static_cast<std::uint64_t>(seed);
  }
  if (doc.contains("n_tokens")) s.n_tokens = as_int(doc.at("n_tokens"), "n_tokens");
  if (doc.contains("dim")) s.dim = as_int(doc.at("dim"), "dim");
  if (doc.contains("base_resolution")) {
    std::tie(s.base_h, s.base_w) = as_resolution(doc.at("base_resolution"), "base_resolution");
  }
  s.agg_h = s.base_h;
  s.agg_w = s.base_w;
  if (doc.contains("layer_factors")) {
    s.layer_factors = as_int_list(doc.at("layer_factors"), "layer_factors");
  }
  if (doc.contains("agg_resolution")) {
    std::tie(s.agg_h, s.agg_w) = as_resolution(doc.at("agg_resolution"), "agg_resolution");
  }
  if (!doc.contains("concepts")) parse_fail("concepts", "required");
  const json& concepts = doc.at("concepts");
  if (!concepts.is_array()) parse_fail("concepts", "expected an array");
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    const std::string path = "concepts[" + std::to_string(i) + "]";
    const json& c = concepts[i];
    check_keys(c, {"name", "tokens", "box"}, path);
    for (const char* key : {"name", "tokens", "box"}) {
      if (!c.contains(key)) parse_fail(join_path(path, key), "required");
    }
    ConceptSpec spec;
    if (!c.at("name").is_string()) parse_fail(path + ".name", "expected a string");
    spec.name = c.at("name").get<std::string>();
    spec.tokens = as_int_list(c.at("tokens"), path + ".tokens");
    const json& box = c.at("box");
    if (!box.is_array() || box.size() != 4) parse_fail(path + ".box", "expected [x0,y0,x1,y1]");
    double b[4];
    for (int k = 0; k < 4; ++k) {
      b[k] = as_number(box[static_cast<std::size_t>(k)],
                       path + ".box[" + std::to_string(k) + "]");
    }
    spec.box = NormBox::make(b[0], b[1], b[2], b[3]);
    s.concepts.push_back(std::move(spec));
  }
  if (doc.contains("config")) parse_config(doc.at("config"), s.config);
  s.validate();
  return s;
}

Scene load_scene(const std::filesystem::path& path) { return parse_scene(read_text(path)); }

double miou_from_masks(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt) {
  if (pred.empty()) throw Error(Errc::MissingRun, "no concepts to score");
  if (pred.size() != gt.size()) throw Error(Errc::ShapeMismatch, "mask list lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += box_iou(pred[i], gt[i]);
  return s / static_cast<double>(pred.size());
}

double miou_metric(std::span<const ConceptMaps> maps) {
  std::vector<BinaryMask> pred;
  std::vector<BinaryMask> gt;
  for (const ConceptMaps& cm : maps) {
    pred.push_back(cm.mbr);
    gt.push_back(cm.gt_mask);
  }
  return miou_from_masks(pred, gt);
}

double final_miou(const Trajectory& trajectory) {
  if (trajectory.steps.empty()) throw Error(Errc::MissingRun, "empty trajectory");
  return miou_from_masks(trajectory.final_mbr, trajectory.gt);
}

GuidanceConfig effective_config(const Scene& scene, const RunOptions& options) {
  GuidanceConfig cfg = scene.config;
  if (options.variant) cfg.variant = *options.variant;
  if (options.grad_through_tau) cfg.grad_through_tau = true;
  return cfg;
}

RunReport run_scene(const Scene& scene, const RunOptions& options, const StepObserver& observer) {
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.config = effective_config(scene, options);
  for (const auto& c : scene.concepts) report.concept_names.push_back(c.name);
  const Trajectory traj = run_sampling(scene, report.config, observer);
  report.rows = traj.steps;
  report.final_miou = final_miou(traj);
  for (const StepReport& r : traj.steps) {
    if (r.mean_iou() >= 0.5) {
      report.steps_to_iou_half = r.step;
      break;
    }
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

RunReport run_experiment(const Scene& scene, const std::filesystem::path& out_dir,
                         const RunOptions& options, std::string_view scene_name) {
  std::vector<std::pair<std::string, std::string>> dumps;
  StepObserver observer;
  if (options.dump_maps) {
    observer = [&](int step, const GuidanceGraph& graph) {
      char prefix[32];
      std::snprintf(prefix, sizeof prefix, "step_%03d_", step);
      for (std::size_t i = 0; i < graph.maps.size(); ++i) {
        const std::string base = prefix + scene.concepts[i].name;
        dumps.emplace_back(base + "_mnorm.pgm", pgm_bytes(graph.maps[i].m_norm.value()));
        dumps.emplace_back(base + "_mbr.pgm", pgm_bytes(graph.maps[i].mbr.to_field()));
      }
    };
  }
  RunReport report = run_scene(scene, options, observer);
  report.scene_name = std::string(scene_name);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::Io, "cannot create " + out_dir.string() + ": " + ec.message());
  write_file_atomic(out_dir / "metrics.csv", metrics_csv(report));
  write_file_atomic(out_dir / "report.json", report_json(report));
  if (!dumps.empty()) {
    const auto maps_dir = out_dir / "maps";
    std::filesystem::create_directories(maps_dir, ec);
    if (ec) throw Error(Errc::Io, "cannot create " + maps_dir.string() + ": " + ec.message());
    for (const auto& [name, bytes] : dumps) write_file_atomic(maps_dir / name, bytes);
  }
  return report;
}

RunReport run_experiment(const std::filesystem::path& scene_path,
                         const std::filesystem::path& out_dir, const RunOptions& options) {
  return run_experiment(load_scene(scene_path), out_dir, options, scene_path.stem().string());
}

std::string metrics_csv(const RunReport& report) {
  std::string out = "step,g,lr,lb";
  for (const auto& name : report.concept_names) out += ",iou_" + name + ",tau_" + name;
  out += '\n';
  for (const StepReport& r : report.rows) {
    out += std::to_string(r.step) + ',' + fmt_double(r.g) + ',' + fmt_double(r.lr) + ',' +
           fmt_double(r.lb);
    for (std::size_t i = 0; i < r.iou.size(); ++i) {
      out += ',' + fmt_double(r.iou[i]) + ',' + fmt_double(r.tau[i]);
    }
    out += '\n';
  }
  return out;
}

std::string report_json(const RunReport& report) {
  json j;
  j["scene"] = report.scene_name;
  j["variant"] = variant_name(report.config.variant);
  j["concepts"] = report.concept_names;
  j["rows"] = report.rows.size();
  j["final_miou"] = report.final_miou;
  j["steps_to_iou_0_5"] =
      report.steps_to_iou_half ? json(*report.steps_to_iou_half) : json(nullptr);
  json final_iou = json::object();
  if (!report.rows.empty()) {
    const StepReport& last = report.rows.back();
    for (std::size_t i = 0; i < report.concept_names.size(); ++i) {
      final_iou[report.concept_names[i]] = last.iou[i];
    }
    j["final_energy"] = last.g;
  }
  j["final_iou"] = final_iou;
  j["config"] = config_json(report.config);
  j["metric_protocol"] =
      "IoU between the minimum bounding rectangle of the thresholded aggregated attention map "
      "and the rasterized target box (stands in for detector-based box IoU)";
  return j.dump(2) + "\n";
}

std::string pgm_bytes(const ScalarField& field) {
  std::string out = "P5\n" + std::to_string(field.width()) + " " +
                    std::to_string(field.height()) + "\n255\n";
  const double lo = field.min();
  const double range = field.max() - lo;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double scaled = range < kDegenerateRange ? 0.0 : (field[i] - lo) / range * 255.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
  }
  return out;
}

void dump_pgm(const ScalarField& field, const std::filesystem::path& path) {
  write_file_atomic(path, pgm_bytes(field));
}

ScalarField read_pgm(const std::filesystem::path& path) {
  const std::string data = read_text(path);
  std::istringstream in(data);
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || width < 1 || height < 1 || maxval != 255) {
    throw Error(Errc::Io, "not an 8-bit P5 file: " + path.string());
  }
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (data.size() < offset + static_cast<std::size_t>(width) * height) {
    throw Error(Errc::Io, "truncated PGM: " + path.string());
  }
  ScalarField f(height, width);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = static_cast<unsigned char>(data[offset + i]);
  }
  return f;
}

void set_param(GuidanceConfig& config, std::string_view name, double value) {
  const auto as_steps = [&](int& dst) {
    if (value != std::floor(value)) {
      throw Error(Errc::ValidationError, std::string(name) + " must be an integer");
    }
    dst = static_cast<int>(value);
  };
  if (name == "lambda") config.lambda = value;
  else if (name == "lambda_s") config.lambda_s = value;
  else if (name == "lambda_a") config.lambda_a = value;
  else if (name == "eta_g") config.eta_g = value;
  else if (name == "sharpness") config.sharpness = value;
  else if (name == "noise_scale") config.noise_scale = value;
  else if (name == "grad_clip_norm") config.grad_clip_norm = value;
  else if (name == "total_steps") as_steps(config.total_steps);
  else if (name == "guidance_steps") as_steps(config.guidance_steps);
  else throw Error(Errc::UnknownParam, "unknown sweep parameter '" + std::string(name) + "'");
}

std::vector<SweepRow> sweep(const Scene& scene, std::string_view param,
                            std::span<const double> values, const RunOptions& options) {
  GuidanceConfig probe = scene.config;
  set_param(probe, param, 0.0);  // rejects unknown names before any run
  std::vector<SweepRow> rows;
  for (double v : values) {
    Scene s = scene;
    set_param(s.config, param, v);
    s.config.validate();
    rows.push_back({v, run_scene(s, options).final_miou});
  }
  return rows;
}

std::string sweep_csv(std::string_view param, std::span<const SweepRow> rows) {
  std::string out = std::string(param) + ",final_miou\n";
  for (const SweepRow& r : rows) out += fmt_double(r.value) + ',' + fmt_double(r.final_miou) + '\n';
  return out;
}

std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw Error(Errc::Io, "not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SuiteEntry> run_suite(const std::filesystem::path& scenes_dir,
                                  const std::filesystem::path& out_dir,
                                  std::span<const Variant> variants, const RunOptions& options) {
  const auto paths = list_scenes(scenes_dir);
  std::vector<std::pair<std::string, Scene>> scenes;
  for (const auto& p : paths) scenes.emplace_back(p.stem().string(), load_scene(p));

  std::vector<SuiteEntry> entries;
  for (const auto& [name, scene] : scenes) {
    for (Variant v : variants) {
      RunOptions opts = options;
      opts.variant = v;
      SuiteEntry e;
      e.scene = name;
      e.variant = v;
      if (out_dir.empty()) {
        e.report = run_scene(scene, opts);
        e.report.scene_name = name;
      } else {
        const auto dir = out_dir / name / variant_name(v);
        e.report = run_experiment(scene, dir, opts, name);
      }
      entries.push_back(std::move(e));
    }
  }
  if (!out_dir.empty()) write_file_atomic(out_dir / "suite.csv", suite_csv(entries));
  return entries;
}

std::string suite_csv(std::span<const SuiteEntry> entries) {
  std::string out = "scene,variant,final_miou\n";
  for (const SuiteEntry& e : entries) {
    out += e.scene + ',' + variant_name(e.variant) + ',' +
           fmt_double(e.report.final_miou) + '\n';
  }
  return out;
}

double suite_mean_miou(std::span<const SuiteEntry> entries, Variant variant) {
  double s = 0.0;
  int n = 0;
  for (const SuiteEntry& e : entries) {
    if (e.variant != variant) continue;
    s += e.report.final_miou;
    ++n;
  }
  if (n == 0) throw Error(Errc::MissingRun, "no runs for variant " + variant_name(variant));
  return s / n;
}

Scene random_scene(std::uint64_t seed, const RandomSceneSpec& spec) {
  Scene s;
  s.seed = seed;
  s.n_tokens = spec.n_tokens;
  s.dim = spec.dim;
  s.base_h = s.base_w = spec.base;
  s.agg_h = s.agg_w = spec.base;
  s.layer_factors = {1, 2};
  if (spec.concepts < 1 || spec.concepts > spec.n_tokens) {
    throw Error(Errc::ValidationError, "random_scene: concept count must be in [1, n_tokens]");
  }

  // Boxes live on the coarse (base/2) grid so every layer can rasterize them.
  const int grid = spec.base / 2;
  std::mt19937_64 rng(seed ^ 0x73636e65ULL);
  const auto uniform = [&rng](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  struct Cell {
    int r0, c0, r1, c1;  // half-open, grid units
  };
  std::vector<Cell> placed;
  const auto overlaps = [&placed](const Cell& a) {
    for (const Cell& b : placed) {
      if (a.r0 < b.r1 && b.r0 < a.r1 && a.c0 < b.c1 && b.c0 < a.c1) return true;
    }
    return false;
  };
  for (int k = 0; k < spec.concepts; ++k) {
    Cell cell{};
    bool found = false;
    for (int attempt = 0; attempt < 1000 && !found; ++attempt) {
      const int hgt = uniform(std::max(1, grid / 4), std::max(1, grid / 2));
      const int wid = uniform(std::max(1, grid / 4), std::max(1, grid / 2));
      const int r0 = uniform(0, grid - hgt);
      const int c0 = uniform(0, grid - wid);
      cell = {r0, c0, r0 + hgt, c0 + wid};
      found = !overlaps(cell);
    }
    if (!found) throw Error(Errc::ValidationError, "random_scene: could not place disjoint boxes");
    placed.push_back(cell);
    ConceptSpec c;
    c.name = "c" + std::to_string(k);
    c.tokens = {k};
    c.box = NormBox::make(static_cast<double>(cell.c0) / grid, static_cast<double>(cell.r0) / grid,
                          static_cast<double>(cell.c1) / grid, static_cast<double>(cell.r1) / grid);
    s.concepts.push_back(std::move(c));
  }
  s.validate();
  return s;
}

std::string scene_json(const Scene& scene) {
  json j;
  j["seed"] = scene.seed;
  j["n_tokens"] = scene.n_tokens;
  j["dim"] = scene.dim;
  j["base_resolution"] = {scene.base_h, scene.base_w};
  j["layer_factors"] = scene.layer_factors;
  j["agg_resolution"] = {scene.agg_h, scene.agg_w};
  json concepts = json::array();
  for (const ConceptSpec& c : scene.concepts) {
    concepts.push_back(
        {{"name", c.name}, {"tokens", c.tokens}, {"box", {c.box.x0, c.box.y0, c.box.x1, c.box.y1}}});
  }
  j["concepts"] = concepts;
  json cfg = config_json(scene.config);
  cfg.erase("sigma_q");
  cfg.erase("grad_through_tau");
  cfg.erase("fixed_threshold");
  j["config"] = cfg;
  return j.dump(2) + "\n";
}

GradCheckReport check_energy_gradient(const Scene& scene, const GuidanceConfig& config,
                                      const GradCheckOptions& options) {
  const SimModel model = SimModel::make(scene);
  const SimLatent latent = SimLatent::initial(scene, config.sigma_q);
  const LossBuilder build = [&](Tape&, std::span<const Var> leaves) {
    return build_guidance_graph(leaves[0], model, scene, config).energy;
  };
  return gradcheck(build, {latent.z}, options);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(Errc::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::Io, "cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace rnb
