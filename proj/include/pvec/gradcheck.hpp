#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pvec/tensor.hpp"

namespace pvec {

/// Central-difference estimate of df/dx, one element at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x.clone();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Central difference for one element of a tensor that `f` reads in place.
inline double finite_diff_at(const std::function<double()>& f, Tensor& x, std::size_t index,
                             double h) {
  const double orig = x[index];
  x[index] = orig + h;
  const double up = f();
  x[index] = orig - h;
  const double down = f();
  x[index] = orig;
  return (up - down) / (2.0 * h);
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps elements whose true
/// gradient is ~0 from dominating on round-off alone.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckOptions {
  double step = 1e-5;
  double floor = 1e-6;
  std::size_t max_samples = 0;  // 0 = every element of every tensor
  std::uint64_t seed = 0;
  // Skip coordinates whose +-step probes land on a different piece of a
  // piecewise function (see BranchTrace); the central difference is no
  // derivative oracle there. Sampling continues until max_samples are checked.
  bool skip_kinks = false;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor #>[index]: analytic vs numeric"
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// for the given leaf tensors. `loss_fn` must be deterministic; it is called
/// once under a tape and 2x per checked element without one.
inline GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> leaves, const GradCheckOptions& opt = {}) {
  for (Tensor& t : leaves) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  BranchTrace base;
  {
    Tape tape;
    TapeScope scope(tape);
    BranchScope branches(base);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::pair<std::size_t, std::size_t>> sites;
  for (std::size_t k = 0; k < leaves.size(); ++k)
    for (std::size_t i = 0; i < leaves[k].numel(); ++i) sites.emplace_back(k, i);
  if (opt.max_samples && sites.size() > opt.max_samples) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(sites.begin(), sites.end(), rng);
  }
  const std::size_t want = opt.max_samples ? std::min(opt.max_samples, sites.size()) : sites.size();
  GradCheckReport rep;
  bool same_piece = true;
  auto eval = [&] {
    if (!opt.skip_kinks) return loss_fn().item();
    BranchTrace probe;
    BranchScope branches(probe);
    const double v = loss_fn().item();
    same_piece = same_piece && probe.hash == base.hash;
    return v;
  };
  for (auto [k, i] : sites) {
    if (rep.checked == want) break;
    same_piece = true;
    const double numeric = finite_diff_at(eval, leaves[k], i, opt.step);
    if (!same_piece) {
      ++rep.kinks_skipped;
      continue;
    }
    const double analytic = leaves[k].has_grad() ? leaves[k].grad()[i] : 0.0;
    const double err = relative_error(analytic, numeric, opt.floor);
    ++rep.checked;
    if (rep.worst.empty() || err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = "#" + std::to_string(k) + "[" + std::to_string(i) + "]: " +
                  std::to_string(analytic) + " vs " + std::to_string(numeric);
    }
  }
  return rep;
}

} // namespace pvec
