#include "rnb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rnb/error.hpp"

namespace rnb {

const ScalarField& Var::value() const { return tape_->value(id_); }
const ScalarField& Var::grad() const { return tape_->grad(id_); }
bool Var::needs_grad() const { return tape_->needs_grad(id_); }

double Var::scalar() const {
  const ScalarField& v = value();
  if (v.size() != 1) throw Error(Errc::NonScalarLoss, "node is not 1x1");
  return v[0];
}

Var Tape::leaf(ScalarField value) {
  Node n;
  n.grad = ScalarField(value.height(), value.width());
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(ScalarField value) {
  Node n;
  n.grad = ScalarField(value.height(), value.width());
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(ScalarField value, std::initializer_list<Var> parents, Backward backward) {
  Node n;
  n.grad = ScalarField(value.height(), value.width());
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (&p.tape() != this) throw Error(Errc::ShapeMismatch, "parent node lives on another tape");
    n.parents.push_back(p.id());
    n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    std::ostringstream os;
    os << "loss must be 1x1, got " << loss.height() << "x" << loss.width();
    throw Error(Errc::NonScalarLoss, os.str());
  }
  for (Node& n : nodes_) std::fill(n.grad.values().begin(), n.grad.values().end(), 0.0);
  nodes_[loss.id()].grad[0] = 1.0;
  std::vector<ScalarField*> pg;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || !n.backward) continue;
    pg.clear();
    for (std::size_t p : n.parents) {
      pg.push_back(nodes_[p].needs_grad ? &nodes_[p].grad : nullptr);
    }
    n.backward(n.grad, pg);
  }
}

ScalarField Tape::freeze(ScalarField fresh) {
  if (!replaying_) {
    frozen_.push_back(fresh);
    return fresh;
  }
  if (replay_cursor_ >= frozen_.size() || !frozen_[replay_cursor_].same_shape(fresh)) {
    replay_mismatch_ = true;
    return fresh;
  }
  return frozen_[replay_cursor_++];
}

double Tape::freeze(double fresh) { return freeze(ScalarField::scalar(fresh))[0]; }

void Tape::start_replay(std::vector<ScalarField> frozen) {
  frozen_ = std::move(frozen);
  replay_cursor_ = 0;
  replaying_ = true;
  replay_mismatch_ = false;
}

void Tape::note_decision(std::uint64_t hash, double margin) {
  signature_ ^= hash + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  margin_ = std::min(margin_, margin);
}

namespace ad {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    std::ostringstream os;
    os << op << ": shapes " << a.height() << "x" << a.width() << " and " << b.height() << "x"
       << b.width() << " differ";
    throw Error(Errc::ShapeMismatch, os.str());
  }
}

void add_into(ScalarField* dst, const ScalarField& src) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::uint64_t index_hash(std::size_t tag, std::size_t idx) {
  return (static_cast<std::uint64_t>(tag) << 48) ^ static_cast<std::uint64_t>(idx) * 0x100000001b3ULL;
}

Var extreme(Var x, bool take_max) {
  const ScalarField& v = x.value();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (take_max ? v[i] > v[best] : v[i] < v[best]) best = i;
  }
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i != best) gap = std::min(gap, std::abs(v[best] - v[i]));
  }
  x.tape().note_decision(index_hash(take_max ? 1 : 2, best), gap);
  return x.tape().record(ScalarField::scalar(v[best]), {x},
                         [best](const ScalarField& g, std::span<ScalarField* const> pg) {
                           if (pg[0]) (*pg[0])[best] += g[0];
                         });
}

}  // namespace

Var detach(Var x) {
  Tape& t = x.tape();
  return t.constant(t.freeze(x.value()));
}

Var ste_attach(const BinaryMask& hard, Var soft) {
  const ScalarField& s = soft.value();
  if (hard.height() != s.height() || hard.width() != s.width()) {
    throw Error(Errc::ShapeMismatch, "ste_attach: hard mask and soft map shapes differ");
  }
  Tape& t = soft.tape();
  ScalarField hard_f = hard.to_field();
  ScalarField offset(s.height(), s.width());
  for (std::size_t i = 0; i < s.size(); ++i) offset[i] = hard_f[i] - s[i];
  offset = t.freeze(std::move(offset));
  ScalarField out = std::move(hard_f);
  if (t.replaying()) {
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] + offset[i];
  }
  return t.record(std::move(out), {soft},
                  [](const ScalarField& g, std::span<ScalarField* const> pg) { add_into(pg[0], g); });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  ScalarField out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(std::move(out), {a, b},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], g);
                           add_into(pg[1], g);
                         });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  ScalarField out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], g);
                           if (pg[1]) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
                           }
                         });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  const ScalarField av = a.value();
  const ScalarField bv = b.value();
  ScalarField out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [av, bv](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (pg[0]) (*pg[0])[i] += g[i] * bv[i];
                             if (pg[1]) (*pg[1])[i] += g[i] * av[i];
                           }
                         });
}

Var div(Var a, Var b) {
  require_same_shape(a, b, "div");
  const ScalarField av = a.value();
  const ScalarField bv = b.value();
  ScalarField out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [av, bv](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (pg[0]) (*pg[0])[i] += g[i] / bv[i];
                             if (pg[1]) (*pg[1])[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                           }
                         });
}

Var mul_const(Var a, const ScalarField& c) {
  if (!a.value().same_shape(c)) throw Error(Errc::ShapeMismatch, "mul_const: shapes differ");
  ScalarField out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.tape().record(std::move(out), {a},
                         [c](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * c[i];
                         });
}

Var affine(Var x, double scale, double shift) {
  ScalarField out = x.value();
  for (double& v : out.values()) v = scale * v + shift;
  return x.tape().record(std::move(out), {x},
                         [scale](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += scale * g[i];
                         });
}

Var square(Var x) {
  const ScalarField xv = x.value();
  ScalarField out = xv;
  for (double& v : out.values()) v *= v;
  return x.tape().record(std::move(out), {x},
                         [xv](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += 2.0 * xv[i] * g[i];
                         });
}

Var sigmoid(Var x) {
  ScalarField out = x.value();
  for (double& v : out.values()) v = stable_sigmoid(v);
  const ScalarField y = out;
  return x.tape().record(std::move(out), {x},
                         [y](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             (*pg[0])[i] += g[i] * y[i] * (1.0 - y[i]);
                           }
                         });
}

Var sqrt_eps(Var x, double eps) {
  ScalarField out = x.value();
  for (double& v : out.values()) v = std::sqrt(v + eps);
  const ScalarField y = out;
  return x.tape().record(std::move(out), {x},
                         [y](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / (2.0 * y[i]);
                         });
}

Var sum(Var x) {
  return x.tape().record(ScalarField::scalar(x.value().sum()), {x},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (double& v : pg[0]->values()) v += g[0];
                         });
}

Var broadcast(Var s, int height, int width) {
  if (s.value().size() != 1) throw Error(Errc::ShapeMismatch, "broadcast: source is not 1x1");
  return s.tape().record(ScalarField(height, width, s.value()[0]), {s},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           (*pg[0])[0] += g.sum();
                         });
}

Var reshape(Var x, int height, int width) {
  return x.tape().record(x.value().reshaped(height, width), {x},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                         });
}

Var max_value(Var x) { return extreme(x, true); }
Var min_value(Var x) { return extreme(x, false); }

Var upsample(Var x, int out_h, int out_w) {
  const int in_h = x.height();
  const int in_w = x.width();
  return x.tape().record(bilinear_upsample(x.value(), out_h, out_w), {x},
                         [in_h, in_w](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], bilinear_upsample_adjoint(g, in_h, in_w));
                         });
}

Var avg_pool2(Var x) {
  return x.tape().record(rnb::avg_pool2(x.value()), {x},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], avg_pool2_adjoint(g));
                         });
}

Var upsample_channels(Var x, int height, int width, int out_h, int out_w) {
  return x.tape().record(
      bilinear_upsample_channels(x.value(), height, width, out_h, out_w), {x},
      [=](const ScalarField& g, std::span<ScalarField* const> pg) {
        add_into(pg[0], bilinear_upsample_channels_adjoint(g, height, width, out_h, out_w));
      });
}

Var avg_pool2_channels(Var x, int height, int width) {
  return x.tape().record(rnb::avg_pool2_channels(x.value(), height, width), {x},
                         [=](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], avg_pool2_channels_adjoint(g, height, width));
                         });
}

Var sobel_x(Var x) {
  return x.tape().record(rnb::sobel_x(x.value()), {x},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], sobel_x_adjoint(g));
                         });
}

Var sobel_y(Var x) {
  return x.tape().record(rnb::sobel_y(x.value()), {x},
                         [](const ScalarField& g, std::span<ScalarField* const> pg) {
                           add_into(pg[0], sobel_y_adjoint(g));
                         });
}

Var matmul_const_t(Var x, const ScalarField& k, double scale) {
  const ScalarField& xv = x.value();
  if (xv.width() != k.width()) {
    throw Error(Errc::ShapeMismatch, "matmul_const_t: feature dimensions differ");
  }
  const int rows = xv.height();
  const int d = xv.width();
  const int n = k.height();
  ScalarField out(rows, n);
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += xv.at(r, c) * k.at(j, c);
      out.at(r, j) = scale * acc;
    }
  }
  return x.tape().record(std::move(out), {x},
                         [k, scale, rows, d, n](const ScalarField& g,
                                                std::span<ScalarField* const> pg) {
                           ScalarField& gx = *pg[0];
                           for (int r = 0; r < rows; ++r) {
                             for (int c = 0; c < d; ++c) {
                               double acc = 0.0;
                               for (int j = 0; j < n; ++j) acc += g.at(r, j) * k.at(j, c);
                               gx.at(r, c) += scale * acc;
                             }
                           }
                         });
}

Var softmax_rows(Var x) {
  const ScalarField& xv = x.value();
  ScalarField out(xv.height(), xv.width());
  for (int r = 0; r < xv.height(); ++r) {
    double mx = xv.at(r, 0);
    for (int j = 1; j < xv.width(); ++j) mx = std::max(mx, xv.at(r, j));
    double z = 0.0;
    for (int j = 0; j < xv.width(); ++j) {
      out.at(r, j) = std::exp(xv.at(r, j) - mx);
      z += out.at(r, j);
    }
    for (int j = 0; j < xv.width(); ++j) out.at(r, j) /= z;
  }
  const ScalarField y = out;
  return x.tape().record(std::move(out), {x},
                         [y](const ScalarField& g, std::span<ScalarField* const> pg) {
                           ScalarField& gx = *pg[0];
                           for (int r = 0; r < y.height(); ++r) {
                             double dot = 0.0;
                             for (int j = 0; j < y.width(); ++j) dot += g.at(r, j) * y.at(r, j);
                             for (int j = 0; j < y.width(); ++j) {
                               gx.at(r, j) += y.at(r, j) * (g.at(r, j) - dot);
                             }
                           }
                         });
}

Var column_sum(Var x, std::span<const int> columns) {
  const ScalarField& xv = x.value();
  std::vector<int> cols(columns.begin(), columns.end());
  for (int c : cols) {
    if (c < 0 || c >= xv.width()) throw Error(Errc::ShapeMismatch, "column_sum: column out of range");
  }
  ScalarField out(xv.height(), 1);
  for (int r = 0; r < xv.height(); ++r) {
    double acc = 0.0;
    for (int c : cols) acc += xv.at(r, c);
    out.at(r, 0) = acc;
  }
  return x.tape().record(std::move(out), {x},
                         [cols](const ScalarField& g, std::span<ScalarField* const> pg) {
                           ScalarField& gx = *pg[0];
                           for (int r = 0; r < g.height(); ++r) {
                             for (int c : cols) gx.at(r, c) += g.at(r, 0);
                           }
                         });
}

Var bce_mean(Var p, const ScalarField& target, double eps) {
  const ScalarField& pv = p.value();
  if (!pv.same_shape(target)) throw Error(Errc::ShapeMismatch, "bce_mean: shapes differ");
  const double n = static_cast<double>(pv.size());
  double loss = 0.0;
  ScalarField dp(pv.height(), pv.width());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double y = target[i];
    const double pc = std::clamp(pv[i], eps, 1.0 - eps);
    loss -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    const bool clamped = pv[i] < eps || pv[i] > 1.0 - eps;
    dp[i] = clamped ? 0.0 : (-y / pc + (1.0 - y) / (1.0 - pc)) / n;
  }
  return p.tape().record(ScalarField::scalar(loss / n), {p},
                         [dp](const ScalarField& g, std::span<ScalarField* const> pg) {
                           for (std::size_t i = 0; i < dp.size(); ++i) (*pg[0])[i] += g[0] * dp[i];
                         });
}

}  // namespace ad
}  // namespace rnb
