#pragma once

#include <span>
#include <vector>

#include "rnb/attention.hpp"
#include "rnb/autodiff.hpp"
#include "rnb/config.hpp"
#include "rnb/field.hpp"

namespace rnb {

struct ConceptLoss {
  double iou = 0.0;
  Var region;
  Var boundary;
  double l_r = 0.0;
  double l_b = 0.0;
};

struct LossBreakdown {
  std::vector<ConceptLoss> concepts;
  Var g_node;
  double g = 0.0;

  double sum_region() const;
  double sum_boundary() const;
};

/// |pred & gt| / (|pred| + |~pred & gt|). Throws ZeroUnion if both are empty.
double box_iou(const BinaryMask& pred, const BinaryMask& gt);

/// (1 - IoU) * [ls * (1 - <b_shape,gt>/sum b_shape) + la * (1 - <b_appear,gt>/sum b_appear)]
/// with the (1 - IoU) factor held constant.
Var region_loss(const ConceptMaps& cm, double lambda_s, double lambda_a);

/// Analytic d(region_loss)/d(m_appear) of the lambda_a term:
/// -c * (gt/m - n/m^2) with m = |mbr|, n = |mbr & gt|, c = la * (1 - IoU).
ScalarField closed_form_region_grad(const ConceptMaps& cm, double lambda_a);

inline constexpr double kStructurelessEdgeSum = 1e-8;

/// (1 - IoU) * (1 - <E,gt>/sum E) with E the Sobel magnitude of m_agg. A map
/// whose edge energy (above the sqrt(eps) floor) sums below
/// kStructurelessEdgeSum gets the full (1 - IoU) penalty.
Var boundary_loss(const ConceptMaps& cm);

/// Sum over concepts of region + boundary terms, in concept order. The
/// kNoRegion / kNoBoundary variants drop the corresponding term.
LossBreakdown total_energy(std::span<const ConceptMaps> maps, const GuidanceConfig& config);

/// Sum over concepts of the mean over (layer, token) of
/// (1 - in-box attention / total attention)^2, at each layer's resolution.
Var layout_guidance_energy(const AttentionStack& stack, std::span<const ConceptSpec> concepts);

inline constexpr double kBceClamp = 1e-6;

/// Sum over concepts of BCE(m_norm, gt) + BCE(m_norm / max m_norm, gt).
Var zest_energy(std::span<const ConceptMaps> maps);

}  // namespace rnb
