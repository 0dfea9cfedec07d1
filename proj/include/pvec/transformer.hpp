#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pvec/tdnn.hpp"

namespace pvec {

struct MultiHeadAttention {
  std::size_t dim = 0, heads = 1;
  Linear q, k, v, o;

  struct Output {
    Tensor out;        // [B x T x d]
    Tensor attention;  // [B*h x T x T], rows sum to 1
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t h, Rng& rng) : dim(d), heads(h) {
    if (h == 0 || d % h != 0) {
      throw ConfigError("mhsa: model dim " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
    }
    q = Linear(d, d, rng);
    k = Linear(d, d, rng);
    v = Linear(d, d, rng);
    o = Linear(d, d, rng);
  }

  // [B x T x d] -> [B*h x T x d/h]
  Tensor split_heads(const Tensor& x) const {
    const std::size_t B = x.dim(0), T = x.dim(1), dh = dim / heads;
    return reshape(permute(reshape(x, {B, T, heads, dh}), {0, 2, 1, 3}), {B * heads, T, dh});
  }

  Output forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(2) != dim) {
      throw DimensionError("mhsa: expected [B x T x " + std::to_string(dim) + "], got " + to_string(x.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), dh = dim / heads;
    Tensor qh = split_heads(q(x)), kh = split_heads(k(x)), vh = split_heads(v(x));
    Tensor logits = scale(matmul(qh, permute(kh, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor a = softmax(logits, 2);
    Tensor ctx = reshape(permute(reshape(matmul(a, vh), {B, heads, T, dh}), {0, 2, 1, 3}), {B, T, dim});
    return {o(ctx), a};
  }

  void visit(const std::string& prefix, const TensorVisitor& vis) {
    q.visit(prefix + "q.", vis);
    k.visit(prefix + "k.", vis);
    v.visit(prefix + "v.", vis);
    o.visit(prefix + "o.", vis);
  }
};

/// Pre-norm encoder layer: x + MHSA(LN x), then + FFN(LN .).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;
  double dropout = 0.1;

  EncoderLayer() = default;
  EncoderLayer(std::size_t d, std::size_t h, std::size_t ffn, double p, Rng& rng)
      : ln1(d), ln2(d), attn(d, h, rng), ff1(d, ffn, rng), ff2(ffn, d, rng), dropout(p) {}

  Tensor drop(const Tensor& x, const Context& ctx) const {
    if (!ctx.training() || dropout <= 0.0) return x;
    if (!ctx.rng) throw StateError("encoder layer: training-mode dropout needs an rng in the context");
    return pvec::dropout(x, dropout, *ctx.rng);
  }

  Tensor operator()(const Tensor& x, const Context& ctx, Tensor* attention = nullptr) const {
    auto a = attn.forward(ln1(x));
    if (attention) *attention = a.attention;
    Tensor y = add(x, drop(a.out, ctx));
    return add(y, drop(ff2(relu(ff1(ln2(y)))), ctx));
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    ln1.visit(prefix + "ln1.", v);
    attn.visit(prefix + "attn.", v);
    ln2.visit(prefix + "ln2.", v);
    ff1.visit(prefix + "ff1.", v);
    ff2.visit(prefix + "ff2.", v);
  }
};

struct TransBlock {
  std::vector<EncoderLayer> layers;

  TransBlock() = default;
  TransBlock(std::size_t n, std::size_t d, std::size_t h, std::size_t ffn, double p, Rng& rng) {
    for (std::size_t i = 0; i < n; ++i) layers.emplace_back(d, h, ffn, p, rng);
  }

  Tensor operator()(Tensor x, const Context& ctx, std::vector<Tensor>* attention = nullptr) const {
    for (const EncoderLayer& l : layers) {
      Tensor a;
      x = l(x, ctx, attention ? &a : nullptr);
      if (attention) attention->push_back(a);
    }
    return x;
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "layer" + std::to_string(i + 1) + ".", v);
  }
};

/// Sinusoidal absolute positions, [T x d].
inline Tensor sinusoidal_positions(std::size_t T, std::size_t d) {
  Tensor pe({T, d});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      pe[t * d + i] = i % 2 == 0 ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
    }
  return pe;
}

/// Mean | std over axis 1 of [B x T x d] -> [B x 2d].
inline Tensor mean_std_pool(const Tensor& x) {
  Tensor mu = mean(x, 1, true);
  Tensor var = mean(square(sub(x, mu)), 1);
  return concat({reshape(mu, {x.dim(0), x.dim(2)}), sqrt(clamp_min(var, kStdEps))}, 1);
}

struct TransformerConfig {
  std::size_t mels = 24, sfa_factor = 2, dim = 64, heads = 4, ffn = 256, layers_per_block = 3, embed_dim = 32;
  double dropout = 0.1;
};

struct TransformerBranch {
  TransformerConfig cfg;
  Sfa sfa;
  Conv1d stem;
  std::array<TransBlock, 3> blocks;
  BatchNorm1d pool_bn;
  Linear fc;
  bool positional_encoding = true;

  TransformerBranch() = default;
  TransformerBranch(const TransformerConfig& c, Rng& rng)
      : cfg(c),
        sfa(c.mels, c.sfa_factor, rng),
        stem(c.mels, c.dim, 3, rng, {2, 1, 1}),
        blocks{TransBlock(c.layers_per_block, c.dim, c.heads, c.ffn, c.dropout, rng),
               TransBlock(c.layers_per_block, c.dim, c.heads, c.ffn, c.dropout, rng),
               TransBlock(c.layers_per_block, c.dim, c.heads, c.ffn, c.dropout, rng)},
        pool_bn(2 * c.dim),
        fc(2 * c.dim, c.embed_dim, rng) {}

  static std::size_t frames_for(std::size_t T_td) { return conv_output_length(T_td, 3, {2, 1, 1}); }

  /// Stem output before positions, [B x T_Tr x d].
  std::pair<Tensor, Tensor> stem_out(const Tensor& x) const {
    auto s = sfa.forward(x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x);
    return {permute(stem(s.features), {0, 2, 1}), s.attention};
  }

  /// X_Tr = posenc(stem(sfa(x))).
  std::pair<Tensor, Tensor> entry(const Tensor& x) const {
    auto [h, att] = stem_out(x);
    if (positional_encoding) {
      Tensor pe = sinusoidal_positions(h.dim(1), h.dim(2));
      h = add(h, reshape(pe, {1, h.dim(1), h.dim(2)}));
    }
    return {h, att};
  }

  Tensor block(std::size_t i, const Tensor& x, const Context& ctx, std::vector<Tensor>* attention = nullptr) const {
    return blocks.at(i)(x, ctx, attention);
  }

  Tensor embed(const Tensor& last_tap, const Context& ctx) { return fc(pool_bn(mean_std_pool(last_tap), ctx)); }

  BranchOutput forward(const Tensor& x, const Context& ctx, const BridgeInputs& bridge = {},
                       std::vector<Tensor>* attention = nullptr) {
    auto [h, att] = entry(x);
    return run_blocks(h, att, ctx, bridge, attention);
  }

  BranchOutput run_blocks(const Tensor& h, const Tensor& att, const Context& ctx, const BridgeInputs& bridge = {},
                          std::vector<Tensor>* attention = nullptr) {
    BranchOutput out;
    out.attention = att;
    out.taps[0] = block(0, h, ctx, attention);
    out.taps[1] = block(1, with_bridge(out.taps[0], bridge.first, "C_Tr"), ctx, attention);
    out.taps[2] = block(2, with_bridge(out.taps[1], bridge.second, "C'_Tr"), ctx, attention);
    out.embedding = embed(out.taps[2], ctx);
    return out;
  }

  static Tensor with_bridge(const Tensor& tap, const Tensor& c, const char* name) {
    if (!c.defined()) return tap;
    if (c.shape() != tap.shape()) {
      throw DimensionError(std::string("bridge ") + name + ": shape " + to_string(c.shape()) +
                           " does not match Transformer tap " + to_string(tap.shape()));
    }
    return add(tap, c);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    sfa.visit(prefix + "sfa.", v);
    stem.visit(prefix + "stem.", v);
    for (std::size_t i = 0; i < 3; ++i) blocks[i].visit(prefix + "block" + std::to_string(i + 1) + ".", v);
    pool_bn.visit(prefix + "pool_bn.", v);
    fc.visit(prefix + "fc.", v);
  }
};

} // namespace pvec
