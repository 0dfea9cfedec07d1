#pragma once

#include <array>
#include <optional>
#include <vector>

#include "pvec/sfa.hpp"

namespace pvec {

/// ECAPA SE-Res2Block: 1x1 unit, Res2 dilated group convs, 1x1 unit,
/// squeeze-excitation, residual.
struct SeRes2Block {
  std::size_t channels = 0, scale = 1;
  TdnnUnit entry, exit;
  std::vector<TdnnUnit> groups;  // scale - 1 dilated convs
  Conv1d se_down, se_up;

  SeRes2Block() = default;
  SeRes2Block(std::size_t C, std::size_t s, std::size_t dilation, std::size_t bottleneck, Rng& rng)
      : channels(C), scale(s) {
    if (s == 0 || C % s != 0) {
      throw ConfigError("se_res2block: channels " + std::to_string(C) + " not divisible by scale " +
                        std::to_string(s));
    }
    entry = TdnnUnit(C, C, 1, 1, rng);
    for (std::size_t i = 1; i < s; ++i) groups.emplace_back(C / s, C / s, 3, dilation, rng);
    exit = TdnnUnit(C, C, 1, 1, rng);
    se_down = Conv1d(C, bottleneck, 1, rng);
    se_up = Conv1d(bottleneck, C, 1, rng);
  }

  /// Everything before the SE rescale.
  Tensor body(const Tensor& x, const Context& ctx) {
    Tensor h = entry(x, ctx);
    const std::size_t w = channels / scale;
    std::vector<Tensor> ys;
    ys.push_back(slice(h, 1, 0, w));
    for (std::size_t i = 1; i < scale; ++i) ys.push_back(groups[i - 1](add(slice(h, 1, i * w, w), ys.back()), ctx));
    return exit(scale == 1 ? ys[0] : concat(ys, 1), ctx);
  }

  Tensor se_gate(const Tensor& h) const { return sigmoid(se_up(relu(se_down(mean(h, 2, true))))); }

  Tensor operator()(const Tensor& x, const Context& ctx) {
    if (x.rank() != 3 || x.dim(1) != channels) {
      throw DimensionError("se_res2block: expected [B x " + std::to_string(channels) + " x T], got " +
                           to_string(x.shape()));
    }
    Tensor h = body(x, ctx);
    return add(mul(h, se_gate(h)), x);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    entry.visit(prefix + "entry.", v);
    for (std::size_t i = 0; i < groups.size(); ++i) groups[i].visit(prefix + "res2." + std::to_string(i) + ".", v);
    exit.visit(prefix + "exit.", v);
    se_down.visit(prefix + "se.down.", v);
    se_up.visit(prefix + "se.up.", v);
  }
};

inline constexpr double kStdEps = 1e-9;

/// Attentive statistics pooling, per-channel attention over time.
/// [B x C x T] -> [B x 2C] (weighted mean | weighted std).
struct AttentiveStatsPool {
  Conv1d attend, score;

  AttentiveStatsPool() = default;
  AttentiveStatsPool(std::size_t C, std::size_t hidden, Rng& rng)
      : attend(C, hidden, 1, rng), score(hidden, C, 1, rng) {}

  Tensor weights(const Tensor& x) const { return softmax(score(tanh(attend(x))), 2); }

  Tensor operator()(const Tensor& x) const {
    Tensor a = weights(x);
    Tensor mu = sum(mul(x, a), 2);
    Tensor ex2 = sum(mul(square(x), a), 2);
    Tensor sd = sqrt(clamp_min(sub(ex2, square(mu)), kStdEps));
    return concat({mu, sd}, 1);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    attend.visit(prefix + "attend.", v);
    score.visit(prefix + "score.", v);
  }
};

struct TdnnConfig {
  std::size_t mels = 24, sfa_factor = 2, channels = 64, scale = 8, se_bottleneck = 32;
  std::size_t agg_channels = 192, asp_hidden = 32, embed_dim = 32;
};

struct BranchOutput {
  Tensor embedding;          // [B x D]
  std::array<Tensor, 3> taps;
  Tensor attention;          // SFA map
};

/// Optional additive bridge inputs for blocks 2 and 3 (Eq. 1). Undefined = zero.
struct BridgeInputs {
  Tensor first, second;
};

struct TdnnBranch {
  TdnnConfig cfg;
  Sfa sfa;
  TdnnUnit stem;
  std::array<SeRes2Block, 3> blocks;
  TdnnUnit aggregate;
  AttentiveStatsPool pool;
  Linear fc;

  TdnnBranch() = default;
  TdnnBranch(const TdnnConfig& c, Rng& rng)
      : cfg(c),
        sfa(c.mels, c.sfa_factor, rng),
        stem(c.mels, c.channels, 5, 1, rng),
        blocks{SeRes2Block(c.channels, c.scale, 2, c.se_bottleneck, rng),
               SeRes2Block(c.channels, c.scale, 3, c.se_bottleneck, rng),
               SeRes2Block(c.channels, c.scale, 4, c.se_bottleneck, rng)},
        aggregate(3 * c.channels, c.agg_channels, 1, 1, rng),
        pool(c.agg_channels, c.asp_hidden, rng),
        fc(2 * c.agg_channels, c.embed_dim, rng) {}

  /// X_Td = stem(sfa(x)); also returns the SFA map.
  std::pair<Tensor, Tensor> entry(const Tensor& x, const Context& ctx) {
    auto s = sfa.forward(x);
    return {stem(s.features, ctx), s.attention};
  }

  Tensor block(std::size_t i, const Tensor& x, const Context& ctx) { return blocks.at(i)(x, ctx); }

  Tensor embed(const std::array<Tensor, 3>& taps, const Context& ctx) {
    return fc(pool(aggregate(concat({taps[0], taps[1], taps[2]}, 1), ctx)));
  }

  BranchOutput forward(const Tensor& x, const Context& ctx, const BridgeInputs& bridge = {}) {
    auto [h, att] = entry(x, ctx);
    BranchOutput out;
    out.attention = att;
    out.taps[0] = block(0, h, ctx);
    out.taps[1] = block(1, with_bridge(out.taps[0], bridge.first, "C_Td"), ctx);
    out.taps[2] = block(2, with_bridge(out.taps[1], bridge.second, "C'_Td"), ctx);
    out.embedding = embed(out.taps, ctx);
    return out;
  }

  static Tensor with_bridge(const Tensor& tap, const Tensor& c, const char* name) {
    if (!c.defined()) return tap;
    if (c.shape() != tap.shape()) {
      throw DimensionError(std::string("bridge ") + name + ": shape " + to_string(c.shape()) +
                           " does not match TDNN tap " + to_string(tap.shape()));
    }
    return add(tap, c);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    sfa.visit(prefix + "sfa.", v);
    stem.visit(prefix + "stem.", v);
    for (std::size_t i = 0; i < 3; ++i) blocks[i].visit(prefix + "block" + std::to_string(i + 1) + ".", v);
    aggregate.visit(prefix + "aggregate.", v);
    pool.visit(prefix + "asp.", v);
    fc.visit(prefix + "fc.", v);
  }
};

} // namespace pvec
