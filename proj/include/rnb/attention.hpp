#pragma once

#include <string>
#include <vector>

#include "rnb/autodiff.hpp"
#include "rnb/config.hpp"
#include "rnb/field.hpp"

namespace rnb {

struct ConceptSpec {
  std::string name;
  std::vector<int> tokens;
  NormBox box;
};

/// One cross-attention layer: (height*width) rows, one column per token.
struct AttentionLayer {
  int height = 0;
  int width = 0;
  Var attention;
};

struct AttentionStack {
  int n_tokens = 0;
  std::vector<AttentionLayer> layers;
};

/// Everything derived from one spec's aggregated map during a guidance
/// step. Nodes live on the tape that built them.
struct ConceptMaps {
  Var m_agg;
  Var m_norm;
  Var m_shape;
  Var m_appear;
  Var tau_node;
  double tau = 0.0;
  BinaryMask fg_mask;
  BinaryMask mbr;
  Var b_shape;
  Var b_appear;
  BinaryMask gt_mask;
};

/// softmax(Q K^T / sqrt(d)) per row. `queries` is (locations x d), `keys` is
/// (tokens x d).
Var cross_attention(Var queries, const ScalarField& keys);

/// Layer-averaged, token-summed attention of one spec, each layer
/// bilinearly upsampled to agg_h x agg_w first.
Var aggregate(const AttentionStack& stack, const ConceptSpec& spec, int agg_h, int agg_w);

/// Min-max normalization. With `detach_extremes` the min and max enter as
/// constants; a range below kDegenerateRange yields the zero map.
Var minmax_normalize(Var x, bool detach_extremes = true);

struct ThresholdResult {
  Var tau_node;
  double tau = 0.0;
  BinaryMask fg;
};

/// tau = lambda * mean(inside gt) + (1 - lambda) * mean(outside gt), with
/// empty means taken as 0; fg = m_norm >= tau.
ThresholdResult dynamic_threshold(Var m_norm, const BinaryMask& gt, double lambda,
                                  bool differentiable = false);

/// Filled rectangle spanning the row/column extent of all foreground pixels.
/// Throws EmptyMask when there are none.
BinaryMask minimum_bounding_rectangle(const BinaryMask& fg);

/// normalize(sigmoid(s * (m_norm - tau))).
Var shape_variant(Var m_norm, Var tau, double sharpness, bool detach_extremes = true);

/// Min-max normalized m_agg, as its own node.
Var appearance_variant(Var m_agg, bool detach_extremes = true);

ConceptMaps build_concept_maps(const AttentionStack& stack, const ConceptSpec& spec, int agg_h,
                               int agg_w, const GuidanceConfig& config);

}  // namespace rnb
