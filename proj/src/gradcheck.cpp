#include "rnb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rnb {
namespace {

struct Probe {
  std::size_t leaf;
  std::size_t index;
};

struct Eval {
  double loss;
  std::uint64_t signature;
  double margin;
  bool mismatch;
};

Eval evaluate(const LossBuilder& build, const std::vector<ScalarField>& leaves,
              const std::vector<ScalarField>* frozen) {
  Tape tape;
  if (frozen != nullptr) tape.start_replay(*frozen);
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const auto& f : leaves) vars.push_back(tape.leaf(f));
  const Var loss = build(tape, vars);
  return Eval{loss.scalar(), tape.decision_signature(), tape.decision_margin(),
              tape.replay_mismatch()};
}

}  // namespace

GradCheckReport gradcheck(const LossBuilder& build, const std::vector<ScalarField>& leaves,
                          const GradCheckOptions& options) {
  Tape base;
  std::vector<Var> vars;
  for (const auto& f : leaves) vars.push_back(base.leaf(f));
  const Var loss = build(base, vars);
  base.backward(loss);
  const std::uint64_t base_signature = base.decision_signature();
  const std::vector<ScalarField> frozen = base.frozen_values();

  std::vector<Probe> all;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::size_t i = 0; i < leaves[l].size(); ++i) all.push_back({l, i});
  }
  std::mt19937_64 rng(options.seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (options.probe_count >= 0 && static_cast<std::size_t>(options.probe_count) < all.size()) {
    all.resize(static_cast<std::size_t>(options.probe_count));
  }

  GradCheckReport report;
  std::vector<ScalarField> work = leaves;
  for (const Probe& p : all) {
    const double x0 = leaves[p.leaf][p.index];
    work[p.leaf][p.index] = x0 + options.h;
    const Eval plus = evaluate(build, work, &frozen);
    work[p.leaf][p.index] = x0 - options.h;
    const Eval minus = evaluate(build, work, &frozen);
    work[p.leaf][p.index] = x0;

    const bool crossed = plus.mismatch || minus.mismatch || plus.signature != base_signature ||
                         minus.signature != base_signature ||
                         std::min(plus.margin, minus.margin) < options.smooth_margin;
    if (crossed) {
      ++report.num_skipped_nonsmooth;
      continue;
    }
    const double numeric = (plus.loss - minus.loss) / (2.0 * options.h);
    const double analytic = vars[p.leaf].grad()[p.index];
    const double abs_err = std::abs(numeric - analytic);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), options.zero_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
    ++report.num_compared;
  }
  return report;
}

}  // namespace rnb
