#include "rnb/energy.hpp"

#include <cmath>
#include <limits>

#include "rnb/error.hpp"

namespace rnb {
namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(Errc::ShapeMismatch, std::string(op) + ": mask shapes differ");
  }
}

// <b, gt> / sum(b); a map with no mass contributes a constant 0.
Var inside_fraction(Var b, const ScalarField& gt) {
  Tape& t = b.tape();
  Var total = ad::sum(b);
  const bool empty = total.scalar() < kDegenerateRange;
  t.note_decision(empty ? 0x51ULL : 0x52ULL, std::numeric_limits<double>::infinity());
  if (empty) return t.constant(0.0);
  return ad::div(ad::sum(ad::mul_const(b, gt)), total);
}

}  // namespace

double LossBreakdown::sum_region() const {
  double s = 0.0;
  for (const auto& c : concepts) s += c.l_r;
  return s;
}

double LossBreakdown::sum_boundary() const {
  double s = 0.0;
  for (const auto& c : concepts) s += c.l_b;
  return s;
}

double box_iou(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt, "box_iou");
  std::size_t inter = 0;
  std::size_t pred_n = 0;
  std::size_t gt_only = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i]) {
      ++pred_n;
      if (gt[i]) ++inter;
    } else if (gt[i]) {
      ++gt_only;
    }
  }
  const std::size_t uni = pred_n + gt_only;
  if (uni == 0) throw Error(Errc::ZeroUnion, "box_iou: both masks are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Var region_loss(const ConceptMaps& cm, double lambda_s, double lambda_a) {
  Tape& t = cm.b_appear.tape();
  const double c = t.freeze(1.0 - box_iou(cm.mbr, cm.gt_mask));
  const ScalarField gt = cm.gt_mask.to_field();
  Var shape_term = ad::affine(inside_fraction(cm.b_shape, gt), -lambda_s, lambda_s);
  Var appear_term = ad::affine(inside_fraction(cm.b_appear, gt), -lambda_a, lambda_a);
  return ad::scale(ad::add(shape_term, appear_term), c);
}

ScalarField closed_form_region_grad(const ConceptMaps& cm, double lambda_a) {
  require_same_shape(cm.mbr, cm.gt_mask, "closed_form_region_grad");
  const double m = static_cast<double>(cm.mbr.count());
  double n = 0.0;
  for (std::size_t i = 0; i < cm.mbr.size(); ++i) {
    if (cm.mbr[i] && cm.gt_mask[i]) n += 1.0;
  }
  const double c = lambda_a * (1.0 - box_iou(cm.mbr, cm.gt_mask));
  ScalarField out(cm.mbr.height(), cm.mbr.width());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double gt = cm.gt_mask[i] ? 1.0 : 0.0;
    out[i] = -c * (gt / m - n / (m * m));
  }
  return out;
}

Var boundary_loss(const ConceptMaps& cm) {
  Tape& t = cm.m_agg.tape();
  const double c = t.freeze(1.0 - box_iou(cm.mbr, cm.gt_mask));
  Var gx = ad::sobel_x(cm.m_agg);
  Var gy = ad::sobel_y(cm.m_agg);
  Var edges = ad::sqrt_eps(ad::add(ad::square(gx), ad::square(gy)), kSobelEps);
  Var total = ad::sum(edges);
  const double floor = static_cast<double>(edges.value().size()) * std::sqrt(kSobelEps);
  const bool structureless = total.scalar() - floor < kStructurelessEdgeSum;
  t.note_decision(structureless ? 0x61ULL : 0x62ULL, std::numeric_limits<double>::infinity());
  if (structureless) return t.constant(c);
  Var inside = ad::sum(ad::mul_const(edges, cm.gt_mask.to_field()));
  return ad::scale(ad::affine(ad::div(inside, total), -1.0, 1.0), c);
}

LossBreakdown total_energy(std::span<const ConceptMaps> maps, const GuidanceConfig& config) {
  if (maps.empty()) throw Error(Errc::ValidationError, "total_energy needs at least one spec");
  LossBreakdown out;
  for (const ConceptMaps& cm : maps) {
    Tape& t = cm.m_agg.tape();
    ConceptLoss cl;
    cl.iou = box_iou(cm.mbr, cm.gt_mask);
    cl.region = config.variant.no_region
                    ? t.constant(0.0)
                    : region_loss(cm, config.lambda_s, config.lambda_a);
    cl.boundary = config.variant.no_boundary ? t.constant(0.0) : boundary_loss(cm);
    cl.l_r = cl.region.scalar();
    cl.l_b = cl.boundary.scalar();
    Var term = ad::add(cl.region, cl.boundary);
    out.g_node = out.concepts.empty() ? term : ad::add(out.g_node, term);
    out.concepts.push_back(std::move(cl));
  }
  out.g = out.g_node.scalar();
  return out;
}

Var layout_guidance_energy(const AttentionStack& stack, std::span<const ConceptSpec> concepts) {
  if (concepts.empty()) throw Error(Errc::ValidationError, "layout guidance needs a spec");
  if (stack.layers.empty()) throw Error(Errc::ShapeMismatch, "layout guidance: empty stack");
  Var total;
  bool first_concept = true;
  for (const ConceptSpec& spec : concepts) {
    Var acc;
    int terms = 0;
    for (const AttentionLayer& layer : stack.layers) {
      const ScalarField box = rasterize_box(spec.box, layer.height, layer.width).to_field();
      for (int token : spec.tokens) {
        const int col[] = {token};
        Var a = ad::reshape(ad::column_sum(layer.attention, col), layer.height, layer.width);
        Var ratio = ad::div(ad::sum(ad::mul_const(a, box)), ad::sum(a));
        Var e = ad::square(ad::affine(ratio, -1.0, 1.0));
        acc = terms == 0 ? e : ad::add(acc, e);
        ++terms;
      }
    }
    Var mean = ad::scale(acc, 1.0 / terms);
    total = first_concept ? mean : ad::add(total, mean);
    first_concept = false;
  }
  return total;
}

Var zest_energy(std::span<const ConceptMaps> maps) {
  if (maps.empty()) throw Error(Errc::ValidationError, "zest energy needs a spec");
  Var total;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const ConceptMaps& cm = maps[i];
    Tape& t = cm.m_norm.tape();
    const ScalarField target = cm.gt_mask.to_field();
    const double peak = t.freeze(cm.m_norm.value().max());
    Var rescaled = peak > kDegenerateRange ? ad::scale(cm.m_norm, 1.0 / peak) : cm.m_norm;
    Var term = ad::add(ad::bce_mean(cm.m_norm, target, kBceClamp),
                       ad::bce_mean(rescaled, target, kBceClamp));
    total = i == 0 ? term : ad::add(total, term);
  }
  return total;
}

}  // namespace rnb
