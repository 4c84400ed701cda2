#include "rnb/config.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

#include "rnb/error.hpp"

namespace rnb {
namespace {

struct Flag {
  bool Variant::*member;
  std::string_view name;
};

constexpr std::array<Flag, 4> kFlags{{
    {&Variant::no_ste, "no_ste"},
    {&Variant::fixed_threshold, "fixed_threshold"},
    {&Variant::no_region, "no_region"},
    {&Variant::no_boundary, "no_boundary"},
}};

void check(bool ok, const char* what) {
  if (!ok) throw Error(Errc::ValidationError, what);
}

}  // namespace

std::string variant_name(const Variant& v) {
  std::string out;
  switch (v.baseline) {
    case Baseline::kLayoutGuidance:
      out = "layout_guidance";
      break;
    case Baseline::kZest:
      out = "zest";
      break;
    case Baseline::kRnb:
      break;
  }
  for (const Flag& f : kFlags) {
    if (!(v.*f.member)) continue;
    if (!out.empty()) out += '+';
    out += f.name;
  }
  return out.empty() ? "rnb" : out;
}

Variant parse_variant(std::string_view tag) {
  const auto unknown = [&] {
    return Error(Errc::ValidationError, "unknown variant '" + std::string(tag) + "'");
  };
  Variant v;
  bool baseline_set = false;
  std::size_t start = 0;
  while (start <= tag.size()) {
    const std::size_t end = std::min(tag.find('+', start), tag.size());
    const std::string_view part = tag.substr(start, end - start);
    start = end + 1;
    if (part == "rnb" || part == "layout_guidance" || part == "zest") {
      if (baseline_set) throw unknown();
      baseline_set = true;
      v.baseline = part == "rnb"               ? Baseline::kRnb
                   : part == "layout_guidance" ? Baseline::kLayoutGuidance
                                               : Baseline::kZest;
      continue;
    }
    const Flag* flag = nullptr;
    for (const Flag& f : kFlags) {
      if (f.name == part) flag = &f;
    }
    if (flag == nullptr || v.*(flag->member)) throw unknown();
    v.*(flag->member) = true;
  }
  if (v.baseline != Baseline::kRnb && v.ablated()) {
    throw Error(Errc::ValidationError,
                "ablation flags apply to the rnb energy only: '" + std::string(tag) + "'");
  }
  return v;
}

void GuidanceConfig::validate() const {
  check(std::isfinite(lambda) && lambda >= 0.0 && lambda <= 1.0, "config.lambda must lie in [0,1]");
  check(std::isfinite(lambda_s) && lambda_s >= 0.0, "config.lambda_s must be >= 0");
  check(std::isfinite(lambda_a) && lambda_a >= 0.0, "config.lambda_a must be >= 0");
  check(std::isfinite(eta_g) && eta_g > 0.0, "config.eta_g must be > 0");
  check(std::isfinite(sharpness) && sharpness > 0.0, "config.sharpness must be > 0");
  check(total_steps >= 0, "config.total_steps must be >= 0");
  check(guidance_steps >= 0, "config.guidance_steps must be >= 0");
  check(guidance_steps <= total_steps, "config.guidance_steps must not exceed total_steps");
  check(std::isfinite(noise_scale) && noise_scale >= 0.0, "config.noise_scale must be >= 0");
  check(!grad_clip_norm || (std::isfinite(*grad_clip_norm) && *grad_clip_norm > 0.0),
        "config.grad_clip_norm must be > 0 when set");
  check(std::isfinite(sigma_q) && sigma_q >= 0.0, "sigma_q must be >= 0");
  check(variant.baseline == Baseline::kRnb || !variant.ablated(),
        "ablation flags apply to the rnb energy only");
  check(fixed_threshold >= 0.0 && fixed_threshold <= 1.0, "fixed threshold must lie in [0,1]");
}

}  // namespace rnb
