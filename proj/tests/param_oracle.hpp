#pragma once

#include <map>
#include <string>

#include "pvec/model.hpp"

namespace pvec::oracle {

// Closed-form trainable-scalar counts, written from the layer list rather
// than from the module code.
inline std::size_t conv1d_n(std::size_t in, std::size_t out, std::size_t k) { return out * in * k + out; }
inline std::size_t linear_n(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t norm_n(std::size_t c) { return 2 * c; }

inline std::map<std::string, std::size_t> hand_count(const ModelConfig& c) {
  const std::size_t F = c.mels, k = c.sfa_factor, C = c.channels, s = c.scale, d = c.dim, D = c.embed_dim;
  const std::size_t sfa = conv1d_n(F, k * F, 1) + (2 * 9 + 1) + conv1d_n(k * F, F, 1);
  auto unit = [](std::size_t in, std::size_t out, std::size_t kern) { return conv1d_n(in, out, kern) + norm_n(out); };
  const std::size_t block = 2 * unit(C, C, 1) + (s - 1) * unit(C / s, C / s, 3) + conv1d_n(C, c.se_bottleneck, 1) +
                            conv1d_n(c.se_bottleneck, C, 1);
  const std::size_t tdnn = sfa + unit(F, C, 5) + 3 * block + unit(3 * C, c.agg_channels, 1) +
                           conv1d_n(c.agg_channels, c.asp_hidden, 1) + conv1d_n(c.asp_hidden, c.agg_channels, 1) +
                           linear_n(2 * c.agg_channels, D);
  const std::size_t layer = 2 * norm_n(d) + 4 * linear_n(d, d) + linear_n(d, c.ffn) + linear_n(c.ffn, d);
  const std::size_t transformer =
      sfa + conv1d_n(F, d, 3) + 3 * c.layers_per_block * layer + norm_n(2 * d) + linear_n(2 * d, D);
  const std::size_t fsb1 = norm_n(C) + conv1d_n(C, d, 3) + norm_n(d) + d;
  const std::size_t fsb2 = norm_n(d) + conv1d_n(d, C, 1) + norm_n(C) + C;
  return {{"tdnn", tdnn},   {"transformer", transformer}, {"fsb1a", fsb1}, {"fsb1b", fsb1},
          {"fsb2a", fsb2}, {"fsb2b", fsb2},               {"eal", linear_n(2 * D, D) + norm_n(D)}};
}

} // namespace pvec::oracle
