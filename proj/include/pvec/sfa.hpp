#pragma once

#include "pvec/layers.hpp"

namespace pvec {

/// Spatial frequency-channel attention. Expands F -> kF channels, pools over
/// time into a 2 x k x F map (GAP, GMP), derives a sigmoid attention map with
/// a 3x3 conv, rescales the expanded features and reduces back to F.
struct Sfa {
  std::size_t freq = 0, factor = 1;
  Conv1d expand, reduce;
  Conv2d map;

  struct Output {
    Tensor features;   // [B x F x T]
    Tensor attention;  // [B x k x F]
  };

  Sfa() = default;
  Sfa(std::size_t F, std::size_t k, Rng& rng)
      : freq(F), factor(k), expand(F, k * F, 1, rng), reduce(k * F, F, 1, rng), map(2, 1, 3, 1, rng) {
    if (F == 0 || k == 0) throw ConfigError("sfa: frequency bins and expansion factor must be >= 1");
  }

  Output forward(const Tensor& x) const {
    if (x.rank() == 2) {
      Output o = forward(reshape(x, {1, x.dim(0), x.dim(1)}));
      return {reshape(o.features, {freq, x.dim(1)}), o.attention};
    }
    if (x.rank() != 3 || x.dim(1) != freq) {
      throw DimensionError("sfa: expected [B x " + std::to_string(freq) + " x T], got " + to_string(x.shape()));
    }
    const std::size_t B = x.dim(0);
    Tensor e = expand(x);
    Tensor gap = reshape(mean(e, 2), {B, 1, factor, freq});
    Tensor gmp = reshape(max(e, 2), {B, 1, factor, freq});
    Tensor a = sigmoid(map(concat({gap, gmp}, 1)));
    Tensor scaled = mul(e, reshape(a, {B, factor * freq, 1}));
    return {reduce(scaled), reshape(a, {B, factor, freq})};
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    expand.visit(prefix + "expand.", v);
    map.visit(prefix + "map.", v);
    reduce.visit(prefix + "reduce.", v);
  }
};

} // namespace pvec
