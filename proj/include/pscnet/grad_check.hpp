#pragma once

// Central finite-difference verification of the analytic gradients. Run in
// double precision only; at 32-bit the difference quotient drowns in rounding
// noise.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pscnet/tensor.hpp"

namespace pscnet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_input = -1;      // which tensor
  int worst_component = -1;  // flat index within it
  int probes = 0;
};

// f must evaluate a scalar from the given inputs, using a fresh tape when one
// is active. Every probed component is compared as
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// max_probes < 0 probes every component; otherwise a seeded random subset of
// that size is drawn per input tensor.
template <class F>
inline GradCheckResult grad_check(F&& f, std::vector<Tensor<double>>& inputs, double h = 1e-5,
                                  int max_probes = -1, uint64_t seed = 0) {
  NoTapeScope<double> no_outer_tape;  // probes must not record onto a caller's tape
  for (auto& in : inputs) in.set_requires_grad(true);

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    TapeScope<double> scope;
    Tensor<double> y = f(inputs);
    if (y.numel() != 1) throw Error("grad_check: function must be scalar-valued");
    backward(y);
    for (auto& in : inputs) analytic.push_back(in.grad().raw());
    for (auto& in : inputs) in.zero_grad();
  }

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    std::vector<int> probe_ids;
    if (max_probes < 0 || max_probes >= x.numel()) {
      probe_ids.resize(static_cast<size_t>(x.numel()));
      for (int i = 0; i < x.numel(); ++i) probe_ids[static_cast<size_t>(i)] = i;
    } else {
      std::uniform_int_distribution<int> pick(0, x.numel() - 1);
      for (int i = 0; i < max_probes; ++i) probe_ids.push_back(pick(rng));
    }
    for (int ci : probe_ids) {
      const double orig = x.raw()[static_cast<size_t>(ci)];
      double fp, fm;
      try {
        x.raw()[static_cast<size_t>(ci)] = orig + h;
        fp = f(inputs).item();
        x.raw()[static_cast<size_t>(ci)] = orig - h;
        fm = f(inputs).item();
      } catch (const Error& e) {
        x.raw()[static_cast<size_t>(ci)] = orig;
        throw Error("grad_check: input " + std::to_string(t) + " component " + std::to_string(ci) +
                    ": " + e.what());
      }
      x.raw()[static_cast<size_t>(ci)] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double an = analytic[t][static_cast<size_t>(ci)];
      const double denom = std::max({std::abs(an), std::abs(numeric), 1e-8});
      const double rel = std::abs(an - numeric) / denom;
      ++res.probes;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_input = static_cast<int>(t);
        res.worst_component = ci;
      }
    }
  }
  return res;
}

}  // namespace pscnet
