#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "rnb/error.hpp"
#include "rnb/harness.hpp"
#include "support.hpp"

using namespace rnb;
using rnb::test::rect;
using rnb::test::scratch_dir;

namespace {

constexpr const char* kMinimal = R"({
  "base_resolution": [8, 8],
  "layer_factors": [1, 2],
  "concepts": [{"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}]
})";

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return Errc::Io;
}

Scene small_scene() {
  Scene s = random_scene(3);
  s.config.eta_g = 300.0;
  s.config.total_steps = 12;
  s.config.guidance_steps = 4;
  return s;
}

}  // namespace

TEST_CASE("parse_scene fills defaults") {
  const Scene s = parse_scene(kMinimal);
  CHECK(s.config.lambda == 0.4);
  CHECK(s.config.lambda_s == 1.5);
  CHECK(s.config.lambda_a == 1.0);
  CHECK(s.config.total_steps == 50);
  CHECK(s.config.guidance_steps == 10);
  CHECK_FALSE(s.config.grad_clip_norm.has_value());
  CHECK(s.agg_h == 8);
  CHECK(s.agg_w == 8);
  REQUIRE(s.concepts.size() == 1);
  CHECK(s.concepts[0].box.x1 == 0.5);
}

TEST_CASE("parse_scene rejects bad input") {
  SUBCASE("overlapping tokens") {
    const char* text = R"({"base_resolution": [8, 8], "concepts": [
      {"name": "a", "tokens": [0, 1], "box": [0.0, 0.0, 0.5, 0.5]},
      {"name": "b", "tokens": [1], "box": [0.5, 0.5, 1.0, 1.0]}]})";
    CHECK(code_of([&] { parse_scene(text); }) == Errc::ValidationError);
  }
  SUBCASE("inverted box") {
    const char* text = R"({"base_resolution": [8, 8], "concepts": [
      {"name": "a", "tokens": [0], "box": [0.2, 0.2, 0.1, 0.9]}]})";
    CHECK(code_of([&] { parse_scene(text); }) == Errc::ValidationError);
  }
  SUBCASE("unknown key") {
    const char* text = R"({"base_resolution": [8, 8], "colour": 1, "concepts": [
      {"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}]})";
    CHECK(code_of([&] { parse_scene(text); }) == Errc::ParseError);
  }
  SUBCASE("unknown config key") {
    const char* text = R"({"base_resolution": [8, 8], "config": {"eta": 3}, "concepts": [
      {"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}]})";
    CHECK(code_of([&] { parse_scene(text); }) == Errc::ParseError);
  }
  SUBCASE("malformed JSON reports a position") {
    try {
      parse_scene("{\n  \"seed\": 1,\n  oops\n}");
      FAIL("expected ParseError");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ParseError);
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SUBCASE("wrong type") {
    const char* text = R"({"base_resolution": [8, 8], "config": {"total_steps": 2.5},
      "concepts": [{"name": "a", "tokens": [0], "box": [0.0, 0.0, 0.5, 0.5]}]})";
    CHECK(code_of([&] { parse_scene(text); }) == Errc::ParseError);
  }
  SUBCASE("missing concepts") {
    CHECK(code_of([&] { parse_scene(R"({"seed": 1})"); }) == Errc::ParseError);
  }
}

TEST_CASE("scene_json round-trips") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Scene a = random_scene(seed);
    const Scene b = parse_scene(scene_json(a));
    CHECK(scene_json(b) == scene_json(a));
    CHECK(b.seed == a.seed);
    REQUIRE(b.concepts.size() == a.concepts.size());
    for (std::size_t i = 0; i < a.concepts.size(); ++i) {
      CHECK(b.concepts[i].tokens == a.concepts[i].tokens);
      CHECK(b.concepts[i].box.x0 == a.concepts[i].box.x0);
      CHECK(b.concepts[i].box.y1 == a.concepts[i].box.y1);
    }
  }
}

TEST_CASE("random_scene boxes are disjoint") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scene s = random_scene(seed, {.base = 16, .concepts = 3});
    s.validate();
    std::vector<BinaryMask> masks;
    for (const auto& c : s.concepts) masks.push_back(rasterize_box(c.box, s.agg_h, s.agg_w));
    for (std::size_t i = 0; i < masks.size(); ++i) {
      CHECK(masks[i].count() > 0);
      for (std::size_t j = i + 1; j < masks.size(); ++j) {
        for (std::size_t k = 0; k < masks[i].size(); ++k) CHECK_FALSE((masks[i][k] && masks[j][k]));
      }
    }
  }
}

TEST_CASE("miou examples") {
  const BinaryMask a = rect(8, 8, 0, 0, 4, 4);
  const BinaryMask b = rect(8, 8, 0, 0, 4, 7);
  const std::vector<BinaryMask> same{a};
  CHECK(miou_from_masks(same, same) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<BinaryMask> pred{a};
  const std::vector<BinaryMask> gt{b};
  CHECK(miou_from_masks(pred, gt) == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
  const std::vector<BinaryMask> two_pred{a, a};
  const std::vector<BinaryMask> two_gt{a, b};
  CHECK(miou_from_masks(two_pred, two_gt) == doctest::Approx((1.0 + 4.0 / 7.0) / 2).epsilon(1e-15));
  CHECK(code_of([] { miou_from_masks({}, {}); }) == Errc::MissingRun);
  CHECK(code_of([] { final_miou(Trajectory{}); }) == Errc::MissingRun);
}

TEST_CASE("run_experiment writes one row per step and is deterministic") {
  Scene s = random_scene(7);
  s.config.eta_g = 300.0;
  s.config.total_steps = 50;
  s.config.guidance_steps = 10;
  const auto dir1 = scratch_dir("harness_run1");
  const auto dir2 = scratch_dir("harness_run2");
  const RunReport r = run_experiment(s, dir1, {}, "demo");
  run_experiment(s, dir2, {}, "demo");
  CHECK(r.rows.size() == 51);

  const std::string csv = slurp(dir1 / "metrics.csv");
  CHECK(csv == slurp(dir2 / "metrics.csv"));
  CHECK(slurp(dir1 / "report.json") == slurp(dir2 / "report.json"));
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  CHECK(lines == 52);
  CHECK(csv.rfind("step,g,lr,lb,iou_c0,tau_c0,iou_c1,tau_c1\n", 0) == 0);

  const auto report = nlohmann::json::parse(slurp(dir1 / "report.json"));
  CHECK(report["scene"] == "demo");
  CHECK(report["variant"] == "rnb");
  CHECK(report["rows"] == 51);
  CHECK(report["final_miou"].get<double>() == doctest::Approx(r.final_miou));
  CHECK_FALSE(report.contains("wall_seconds"));
}

TEST_CASE("run_experiment records the variant override") {
  const auto dir = scratch_dir("harness_ablate");
  RunOptions opts;
  opts.variant = parse_variant("no_ste");
  run_experiment(small_scene(), dir, opts, "x");
  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(report["variant"] == "no_ste");
}

TEST_CASE("run_experiment dumps maps on request") {
  const auto dir = scratch_dir("harness_maps");
  const Scene s = small_scene();
  RunOptions opts;
  opts.dump_maps = true;
  run_experiment(s, dir, opts, "x");
  const auto maps = dir / "maps";
  REQUIRE(std::filesystem::is_directory(maps));
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(maps)) ++n;
  // two maps per concept per recorded step
  CHECK(n == 2 * s.concepts.size() * static_cast<std::size_t>(s.config.total_steps + 1));
  const ScalarField mbr = read_pgm(maps / "step_000_c0_mbr.pgm");
  CHECK(mbr.height() == s.agg_h);
  for (double v : mbr.values()) CHECK((v == 0.0 || v == 255.0));
}

TEST_CASE("invalid scene leaves no output") {
  const auto dir = scratch_dir("harness_invalid") / "out";
  const auto scene_path = scratch_dir("harness_invalid_src") / "bad.json";
  {
    std::ofstream f(scene_path);
    f << R"({"base_resolution": [8, 8], "concepts": [
      {"name": "a", "tokens": [0], "box": [0.2, 0.2, 0.1, 0.9]}]})";
  }
  CHECK(code_of([&] { run_experiment(scene_path, dir, {}); }) == Errc::ValidationError);
  CHECK_FALSE(std::filesystem::exists(dir));
  CHECK(code_of([&] { run_experiment(scene_path.parent_path() / "missing.json", dir, {}); }) ==
        Errc::Io);
}

TEST_CASE("pgm encoding") {
  const ScalarField f(2, 2, {0.0, 1.0, 1.0, 0.0});
  const std::string expected = std::string("P5\n2 2\n255\n") + '\0' + '\xff' + '\xff' + '\0';
  CHECK(pgm_bytes(f) == expected);

  const std::string flat = pgm_bytes(ScalarField(2, 3, 0.7));
  CHECK(flat.substr(0, 11) == "P5\n3 2\n255\n");
  for (std::size_t i = 11; i < flat.size(); ++i) CHECK(flat[i] == '\0');
  CHECK(flat.size() == 11 + 6);

  const auto path = scratch_dir("harness_pgm") / "f.pgm";
  const ScalarField g = rnb::test::random_field(5, 7, 11, 0.0, 1.0);
  dump_pgm(g, path);
  const ScalarField back = read_pgm(path);
  REQUIRE(back.height() == 5);
  REQUIRE(back.width() == 7);
  const double lo = g.min();
  const double range = g.max() - lo;
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(std::abs(back[i] - (g[i] - lo) / range * 255.0) <= 0.5);
  }
}

TEST_CASE("set_param") {
  GuidanceConfig c;
  set_param(c, "lambda", 0.25);
  set_param(c, "eta_g", 5.0);
  set_param(c, "total_steps", 20);
  set_param(c, "grad_clip_norm", 2.0);
  CHECK(c.lambda == 0.25);
  CHECK(c.eta_g == 5.0);
  CHECK(c.total_steps == 20);
  CHECK(c.grad_clip_norm == 2.0);
  CHECK(code_of([&] { set_param(c, "learning_rate", 1.0); }) == Errc::UnknownParam);
  CHECK(code_of([&] { set_param(c, "total_steps", 2.5); }) == Errc::ValidationError);
}

TEST_CASE("sweep") {
  const Scene s = small_scene();
  SUBCASE("single value matches a plain run") {
    const std::vector<double> v{s.config.eta_g};
    const auto rows = sweep(s, "eta_g", v);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].final_miou == run_scene(s, {}).final_miou);
  }
  SUBCASE("lambda sweep is finite and deterministic") {
    const std::vector<double> v{0.0, 0.25, 0.5, 0.75, 1.0};
    const auto a = sweep(s, "lambda", v);
    const auto b = sweep(s, "lambda", v);
    REQUIRE(a.size() == v.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].value == v[i]);
      CHECK(std::isfinite(a[i].final_miou));
      CHECK(a[i].final_miou >= 0.0);
      CHECK(a[i].final_miou <= 1.0);
      CHECK(a[i].final_miou == b[i].final_miou);
    }
  }
  SUBCASE("csv") {
    const std::vector<SweepRow> rows{{0.5, 0.25}, {1.0, 1.0}};
    CHECK(sweep_csv("lambda", rows) == "lambda,final_miou\n0.5,0.25\n1,1\n");
  }
  SUBCASE("unknown param") {
    const std::vector<double> v{1.0};
    CHECK(code_of([&] { sweep(s, "gamma", v); }) == Errc::UnknownParam);
  }
}

TEST_CASE("suite writes per-variant directories") {
  const auto scenes = scratch_dir("harness_suite_in");
  for (std::uint64_t seed : {1, 2}) {
    Scene s = small_scene();
    s.seed = seed;
    write_file_atomic(scenes / ("s" + std::to_string(seed) + ".json"), scene_json(s));
  }
  const auto out = scratch_dir("harness_suite_out");
  const std::vector<Variant> vs{parse_variant("rnb"), parse_variant("zest")};
  const auto entries = run_suite(scenes, out, vs);
  REQUIRE(entries.size() == 4);
  CHECK(std::filesystem::exists(out / "suite.csv"));
  CHECK(std::filesystem::exists(out / "s1" / "rnb" / "metrics.csv"));
  CHECK(std::filesystem::exists(out / "s2" / "zest" / "report.json"));
  double manual = 0.0;
  for (const auto& e : entries) {
    if (e.variant == vs[0]) manual += e.report.final_miou / 2.0;
  }
  CHECK(suite_mean_miou(entries, vs[0]) == doctest::Approx(manual).epsilon(1e-15));
  CHECK(code_of([&] { run_suite(scenes / "nope", out, vs); }) == Errc::Io);
}
