#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "crfuse/param_store.hpp"
#include "crfuse/rng.hpp"
#include "crfuse/tensor.hpp"

namespace crfuse {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // coordinates probed per parameter tensor; <= 0 probes every coordinate
  int probes_per_param = 0;
  uint64_t seed = 0;
  // Drop probe coordinates whose +h/-h evaluations land in a different
  // linear region than the base point (any ReLU sign or pool argmax flip,
  // detected through the tape's activation-pattern digest). A central
  // difference across a kink estimates nothing; skipping it cannot mask a
  // wrong backward rule, because pattern-stable coordinates compare AD and
  // FD at full strength.
  bool skip_kink_probes = true;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int probes = 0;
  int skipped = 0;  // kink-adjacent coordinates that were re-drawn
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;
  bool pass = false;
  double tol = 0.0;
};

// Compares reverse-mode gradients of a scalar program against central finite
// differences. The probes only ever run the forward pass, so they stay
// independent of the backward rules they certify. Double precision only.
//
// F: (TapeT<double>&, ParamStoreT<double>&) -> scalar TensorT<double>
template <typename F>
GradCheckReport grad_check(F&& f, ParamStoreT<double>& params, GradCheckOptions opt = {}) {
  // reference gradients from one taped evaluation
  std::vector<std::vector<double>> ad_grads;
  uint64_t base_pattern = 0;
  {
    TapeT<double> tape;
    params.watch_all(tape);
    TensorT<double> loss = f(tape, params);
    if (loss.size() != 1) throw ContractError("grad_check: program must return a scalar loss");
    if (!std::isfinite(loss.item()))
      throw NumericError("grad_check: non-finite loss at the base point");
    tape.backward(loss);
    base_pattern = tape.pattern_hash();
    for (auto& [name, t] : params) ad_grads.push_back(tape.grad_of(t));
  }

  struct Probe {
    double value;
    uint64_t pattern;
  };
  const auto eval = [&](const std::string& name, long coord) {
    TapeT<double> tape;  // fresh untracked tape: forward only
    const double v = f(tape, params).item();
    if (!std::isfinite(v))
      throw NumericError("grad_check: non-finite loss while probing " + name + "[" +
                         std::to_string(coord) + "]");
    return Probe{v, tape.pattern_hash()};
  };

  GradCheckReport report;
  report.tol = opt.tol;
  Rng rng(derive_seed(opt.seed, "grad_check"));
  size_t pi = 0;
  for (auto& [name, t] : params) {
    const std::vector<double>& g_ad = ad_grads[pi++];
    const bool probe_all = opt.probes_per_param <= 0 || opt.probes_per_param >= t.size();
    std::vector<long> coords(static_cast<size_t>(t.size()));
    for (long i = 0; i < t.size(); ++i) coords[static_cast<size_t>(i)] = i;
    if (!probe_all) shuffle(coords, rng);
    const int wanted =
        probe_all ? static_cast<int>(t.size()) : opt.probes_per_param;

    GradCheckEntry entry;
    entry.name = name;
    const int max_attempts = probe_all ? static_cast<int>(t.size()) : std::max(8 * wanted, 64);
    int attempts = 0;
    for (long c : coords) {
      if (entry.probes >= wanted || attempts >= max_attempts) break;
      ++attempts;
      double* slot = t.data() + c;
      const double saved = *slot;
      *slot = saved + opt.h;
      const Probe up = eval(name, c);
      *slot = saved - opt.h;
      const Probe down = eval(name, c);
      *slot = saved;
      if (opt.skip_kink_probes &&
          (up.pattern != base_pattern || down.pattern != base_pattern)) {
        ++entry.skipped;  // the probe left the base point's linear region
        continue;
      }
      const double g_fd = (up.value - down.value) / (2.0 * opt.h);
      const double g = g_ad[static_cast<size_t>(c)];
      const double denom = std::max({1.0, std::fabs(g), std::fabs(g_fd)});
      entry.max_rel_err = std::max(entry.max_rel_err, std::fabs(g - g_fd) / denom);
      ++entry.probes;
    }
    // a parameter that never got a clean probe is a failure, not a pass
    if (entry.probes == 0)
      entry.max_rel_err = std::numeric_limits<double>::infinity();
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err < opt.tol;
  return report;
}

}  // namespace crfuse
