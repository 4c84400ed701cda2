#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace rnb {

/// Which energy drives the latent update.
enum class Baseline {
  kRnb,             // region + boundary, straight-through boxes
  kLayoutGuidance,  // per-token in-box attention ratio
  kZest,            // per-pixel BCE
};

/// Energy choice plus the R&B ablations, which combine freely.
struct Variant {
  Baseline baseline = Baseline::kRnb;
  bool no_ste = false;           // soft maps in place of the straight-through boxes
  bool fixed_threshold = false;  // constant threshold instead of the dynamic one
  bool no_region = false;
  bool no_boundary = false;

  bool ablated() const noexcept { return no_ste || fixed_threshold || no_region || no_boundary; }
  friend bool operator==(const Variant&, const Variant&) = default;
};

/// "rnb", "layout_guidance", "zest", or the ablation flags joined by '+'
/// in a fixed order (e.g. "no_region+no_boundary").
std::string variant_name(const Variant& v);
/// Inverse of variant_name; flags may come in any order. Throws
/// ValidationError for unknown tags or flags combined with a baseline.
Variant parse_variant(std::string_view tag);

struct GuidanceConfig {
  double lambda = 0.4;
  double lambda_s = 1.5;
  double lambda_a = 1.0;
  // SD-latent scale default; simulator runs override it per scene.
  double eta_g = 70.0;
  double sharpness = 10.0;
  int total_steps = 50;
  int guidance_steps = 10;
  double noise_scale = 0.0;
  std::optional<double> grad_clip_norm;
  double sigma_q = 1.0;

  Variant variant;
  double fixed_threshold = 0.5;
  // Differentiate through the dynamic threshold and the min-max extremes
  // instead of treating them as constants.
  bool grad_through_tau = false;

  /// Throws ValidationError naming the violated constraint.
  void validate() const;
};

}  // namespace rnb
