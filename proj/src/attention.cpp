#include "rnb/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rnb/error.hpp"

namespace rnb {

Var cross_attention(Var queries, const ScalarField& keys) {
  if (queries.width() != keys.width() || keys.width() < 1) {
    throw Error(Errc::ShapeMismatch, "cross_attention: query and key dimensions differ");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(keys.width()));
  return ad::softmax_rows(ad::matmul_const_t(queries, keys, scale));
}

Var aggregate(const AttentionStack& stack, const ConceptSpec& spec, int agg_h, int agg_w) {
  if (stack.layers.empty()) throw Error(Errc::ShapeMismatch, "aggregate: empty attention stack");
  Var total;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const AttentionLayer& layer = stack.layers[l];
    Var map = ad::reshape(ad::column_sum(layer.attention, spec.tokens), layer.height,
                          layer.width);
    if (layer.height != agg_h || layer.width != agg_w) map = ad::upsample(map, agg_h, agg_w);
    total = l == 0 ? map : ad::add(total, map);
  }
  return ad::scale(total, 1.0 / static_cast<double>(stack.layers.size()));
}

Var minmax_normalize(Var x, bool detach_extremes) {
  Tape& t = x.tape();
  if (detach_extremes) {
    const double lo = t.freeze(x.value().min());
    const double hi = t.freeze(x.value().max());
    const bool degenerate = hi - lo < kDegenerateRange;
    t.note_decision(degenerate ? 0xdeadULL : 0xbeefULL, std::numeric_limits<double>::infinity());
    if (degenerate) return ad::scale(x, 0.0);
    const double range = hi - lo;
    return ad::affine(x, 1.0 / range, -lo / range);
  }
  Var lo = ad::min_value(x);
  Var hi = ad::max_value(x);
  Var range = ad::sub(hi, lo);
  const bool degenerate = range.scalar() < kDegenerateRange;
  t.note_decision(degenerate ? 0xdeadULL : 0xbeefULL, std::numeric_limits<double>::infinity());
  if (degenerate) return ad::scale(x, 0.0);
  return ad::div(ad::sub(x, ad::broadcast(lo, x.height(), x.width())),
                 ad::broadcast(range, x.height(), x.width()));
}

ThresholdResult dynamic_threshold(Var m_norm, const BinaryMask& gt, double lambda,
                                  bool differentiable) {
  const ScalarField& m = m_norm.value();
  if (m.height() != gt.height() || m.width() != gt.width()) {
    throw Error(Errc::ShapeMismatch, "dynamic_threshold: map and box mask shapes differ");
  }
  Tape& t = m_norm.tape();
  const BinaryMask outside = gt.complement();

  ThresholdResult r;
  if (differentiable) {
    Var tau = t.constant(0.0);
    const auto add_term = [&](const BinaryMask& region, double weight) {
      const std::size_t n = region.count();
      if (n == 0) return;
      Var s = ad::sum(ad::mul_const(m_norm, region.to_field()));
      tau = ad::add(tau, ad::scale(s, weight / static_cast<double>(n)));
    };
    add_term(gt, lambda);
    add_term(outside, 1.0 - lambda);
    r.tau_node = tau;
    r.tau = tau.scalar();
  } else {
    r.tau = t.freeze(lambda * masked_mean(m, gt) + (1.0 - lambda) * masked_mean(m, outside));
    r.tau_node = t.constant(r.tau);
  }

  r.fg = BinaryMask(m.height(), m.width());
  double margin = std::numeric_limits<double>::infinity();
  for (int h = 0; h < m.height(); ++h) {
    for (int w = 0; w < m.width(); ++w) {
      r.fg.set(h, w, m.at(h, w) >= r.tau);
      margin = std::min(margin, std::abs(m.at(h, w) - r.tau));
    }
  }
  t.note_decision(r.fg.hash(), margin);
  return r;
}

BinaryMask minimum_bounding_rectangle(const BinaryMask& fg) {
  int h0 = fg.height();
  int h1 = -1;
  int w0 = fg.width();
  int w1 = -1;
  for (int h = 0; h < fg.height(); ++h) {
    for (int w = 0; w < fg.width(); ++w) {
      if (!fg.at(h, w)) continue;
      h0 = std::min(h0, h);
      h1 = std::max(h1, h);
      w0 = std::min(w0, w);
      w1 = std::max(w1, w);
    }
  }
  if (h1 < 0) throw Error(Errc::EmptyMask, "minimum_bounding_rectangle: no foreground pixel");
  BinaryMask out(fg.height(), fg.width());
  for (int h = h0; h <= h1; ++h) {
    for (int w = w0; w <= w1; ++w) out.set(h, w, true);
  }
  return out;
}

Var shape_variant(Var m_norm, Var tau, double sharpness, bool detach_extremes) {
  Var centered = ad::sub(m_norm, ad::broadcast(tau, m_norm.height(), m_norm.width()));
  return minmax_normalize(ad::sigmoid(ad::scale(centered, sharpness)), detach_extremes);
}

Var appearance_variant(Var m_agg, bool detach_extremes) {
  return minmax_normalize(m_agg, detach_extremes);
}

ConceptMaps build_concept_maps(const AttentionStack& stack, const ConceptSpec& spec, int agg_h,
                               int agg_w, const GuidanceConfig& config) {
  const bool detach = !config.grad_through_tau;
  ConceptMaps cm;
  cm.gt_mask = rasterize_box(spec.box, agg_h, agg_w);
  cm.m_agg = aggregate(stack, spec, agg_h, agg_w);
  cm.m_norm = minmax_normalize(cm.m_agg, detach);

  if (config.variant.fixed_threshold) {
    Tape& t = cm.m_norm.tape();
    cm.tau = config.fixed_threshold;
    cm.tau_node = t.constant(cm.tau);
    const ScalarField& m = cm.m_norm.value();
    cm.fg_mask = BinaryMask(m.height(), m.width());
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const int h = static_cast<int>(i) / m.width();
      const int w = static_cast<int>(i) % m.width();
      cm.fg_mask.set(h, w, m[i] >= cm.tau);
      margin = std::min(margin, std::abs(m[i] - cm.tau));
    }
    t.note_decision(cm.fg_mask.hash(), margin);
    // A constant map can fall entirely below a fixed threshold.
    if (cm.fg_mask.count() == 0) cm.fg_mask = BinaryMask(m.height(), m.width(), true);
  } else {
    ThresholdResult thr = dynamic_threshold(cm.m_norm, cm.gt_mask, config.lambda, !detach);
    cm.tau = thr.tau;
    cm.tau_node = thr.tau_node;
    cm.fg_mask = std::move(thr.fg);
  }

  cm.mbr = minimum_bounding_rectangle(cm.fg_mask);
  cm.m_shape = shape_variant(cm.m_norm, cm.tau_node, config.sharpness, detach);
  cm.m_appear = appearance_variant(cm.m_agg, detach);
  if (config.variant.no_ste) {
    cm.b_shape = cm.m_shape;
    cm.b_appear = cm.m_appear;
  } else {
    cm.b_shape = ad::ste_attach(cm.mbr, cm.m_shape);
    cm.b_appear = ad::ste_attach(cm.mbr, cm.m_appear);
  }
  return cm;
}

}  // namespace rnb
