#pragma once

#include <map>
#include <random>
#include <string>

#include "pvec/checkpoint.hpp"
#include "pvec/sfai.hpp"

namespace pvec {

inline const std::string kTdnnNs = "tdnn.";
inline const std::string kTransformerNs = "transformer.";
inline const std::string kEalNs = "eal.";
inline const std::string kClassifierNs = "classifier.";

struct ModelConfig {
  std::string preset = "toy";
  std::size_t mels = 24, sfa_factor = 2;
  std::size_t channels = 64, scale = 8, se_bottleneck = 32, agg_channels = 192, asp_hidden = 32;
  std::size_t dim = 64, heads = 4, ffn = 256, layers_per_block = 3;
  std::size_t embed_dim = 32;
  double gate_init = 0.0;
  double dropout = 0.1;

  static ModelConfig toy() { return {}; }

  static ModelConfig full() {
    ModelConfig c;
    c.preset = "full";
    c.mels = 80;
    c.sfa_factor = 4;
    c.channels = 512;
    c.se_bottleneck = 128;
    c.agg_channels = 1536;
    c.asp_hidden = 128;
    c.dim = 256;
    c.ffn = 1024;
    c.embed_dim = 192;
    return c;
  }

  static ModelConfig preset_named(const std::string& name) {
    if (name == "toy") return toy();
    if (name == "full") return full();
    throw ConfigError("unknown preset '" + name + "' (expected toy or full)");
  }

  void validate() const {
    for (std::size_t v : {mels, sfa_factor, channels, scale, se_bottleneck, agg_channels, asp_hidden, dim, heads, ffn,
                          layers_per_block, embed_dim})
      if (v == 0) throw ConfigError("model config: all sizes must be positive");
    if (channels % scale != 0) throw ConfigError("model config: channels not divisible by res2 scale");
    if (dim % heads != 0) throw ConfigError("model config: model dim not divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0, 1)");
  }

  TdnnConfig tdnn() const {
    return {mels, sfa_factor, channels, scale, se_bottleneck, agg_channels, asp_hidden, embed_dim};
  }

  TransformerConfig transformer() const {
    return {mels, sfa_factor, dim, heads, ffn, layers_per_block, embed_dim, dropout};
  }
};

/// Embedding aggregation layer: BN(FC(e_td | e_tr)).
struct Eal {
  Linear fc;
  BatchNorm1d bn;

  Eal() = default;
  Eal(std::size_t D, Rng& rng) : fc(2 * D, D, rng), bn(D) {}

  Tensor operator()(const Tensor& e_td, const Tensor& e_tr, const Context& ctx) {
    const std::size_t D = bn.gamma.numel();
    if (e_td.rank() != 2 || e_tr.rank() != 2 || e_td.dim(1) != D || e_tr.dim(1) != D || e_td.dim(0) != e_tr.dim(0)) {
      throw DimensionError("eal: expected two [B x " + std::to_string(D) + "] embeddings, got " +
                           to_string(e_td.shape()) + " and " + to_string(e_tr.shape()));
    }
    return bn(fc(concat({e_td, e_tr}, 1)), ctx);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    fc.visit(prefix + "fc.", v);
    bn.visit(prefix + "bn.", v);
  }
};

/// AM-softmax class weights, [D x N], unit columns.
struct ClassifierHead {
  Tensor weight;

  ClassifierHead() = default;
  ClassifierHead(std::size_t D, std::size_t N, Rng& rng) {
    weight = Tensor({D, N});
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& v : weight.values()) v = n(rng);
    normalize_columns();
    weight.set_requires_grad(true);
  }

  void normalize_columns() {
    const std::size_t D = weight.dim(0), N = weight.dim(1);
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < D; ++i) s += weight[i * N + j] * weight[i * N + j];
      const double inv = 1.0 / std::sqrt(std::max(s, 1e-24));
      for (std::size_t i = 0; i < D; ++i) weight[i * N + j] *= inv;
    }
  }

  void visit(const std::string& prefix, const TensorVisitor& v) { v(prefix + "weight", weight, Slot::trainable); }
};

enum class BranchKind { tdnn, transformer };

inline std::string branch_namespace(BranchKind k) { return k == BranchKind::tdnn ? kTdnnNs : kTransformerNs; }
inline std::string branch_label(BranchKind k) { return k == BranchKind::tdnn ? "tdnn" : "transformer"; }

/// Stage-1 model: one standalone branch plus its classifier.
struct StandaloneModel {
  BranchKind kind = BranchKind::tdnn;
  ModelConfig cfg;
  TdnnBranch tdnn;
  TransformerBranch transformer;
  ClassifierHead head;

  StandaloneModel(BranchKind k, const ModelConfig& c, std::size_t classes, std::uint64_t seed) : kind(k), cfg(c) {
    cfg.validate();
    Rng rng(seed);
    if (k == BranchKind::tdnn) tdnn = TdnnBranch(cfg.tdnn(), rng);
    else transformer = TransformerBranch(cfg.transformer(), rng);
    if (classes > 0) head = ClassifierHead(cfg.embed_dim, classes, rng);
  }

  BranchOutput forward(const Tensor& x, const Context& ctx) {
    return kind == BranchKind::tdnn ? tdnn.forward(x, ctx) : transformer.forward(x, ctx);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    if (kind == BranchKind::tdnn) tdnn.visit(prefix + kTdnnNs, v);
    else transformer.visit(prefix + kTransformerNs, v);
    if (head.weight.defined()) head.visit(prefix + kClassifierNs + branch_label(kind) + ".", v);
  }
};

struct PVectorsOutput {
  Tensor embedding;  // EAL output, [B x D]
  CoupledOutput coupled;
};

/// Full p-vectors: both branches, four bridges, EAL.
struct PVectors {
  ModelConfig cfg;
  TdnnBranch tdnn;
  TransformerBranch transformer;
  BridgeSet bridges;
  Eal eal;

  PVectors(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    tdnn = TdnnBranch(cfg.tdnn(), rng);
    transformer = TransformerBranch(cfg.transformer(), rng);
    bridges = BridgeSet(cfg.channels, cfg.dim, cfg.gate_init, rng);
    eal = Eal(cfg.embed_dim, rng);
  }

  PVectorsOutput forward(const Tensor& x, const Context& ctx, CouplingTrace* trace = nullptr) {
    PVectorsOutput out;
    out.coupled = coupled_forward(tdnn, transformer, bridges, x, ctx, trace);
    out.embedding = eal(out.coupled.td.embedding, out.coupled.tr.embedding, ctx);
    return out;
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    tdnn.visit(prefix + kTdnnNs, v);
    transformer.visit(prefix + kTransformerNs, v);
    bridges.visit(prefix, v);
    eal.visit(prefix + kEalNs, v);
  }
};

/// Trainable scalars per top-level namespace for a freshly built p-vectors model.
inline std::map<std::string, std::size_t> param_breakdown(const ModelConfig& cfg) {
  PVectors m(cfg, 0);
  std::map<std::string, std::size_t> out;
  m.visit("", [&](const std::string& name, Tensor& t, Slot s) {
    if (s == Slot::trainable) out[name.substr(0, name.find('.'))] += t.numel();
  });
  return out;
}

inline std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [ns, c] : param_breakdown(cfg)) n += c;
  return n;
}

inline std::map<std::string, std::string> config_meta(const ModelConfig& c) {
  auto s = [](std::size_t v) { return std::to_string(v); };
  return {{"preset", c.preset},         {"mels", s(c.mels)},
          {"sfa_factor", s(c.sfa_factor)}, {"channels", s(c.channels)},
          {"scale", s(c.scale)},         {"se_bottleneck", s(c.se_bottleneck)},
          {"agg_channels", s(c.agg_channels)}, {"asp_hidden", s(c.asp_hidden)},
          {"dim", s(c.dim)},             {"heads", s(c.heads)},
          {"ffn", s(c.ffn)},             {"layers_per_block", s(c.layers_per_block)},
          {"embed_dim", s(c.embed_dim)}};
}

inline ModelConfig config_from_meta(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  auto get = [&](const char* key) -> std::size_t {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError(std::string("checkpoint meta lacks '") + key + "'");
    return std::stoul(it->second);
  };
  auto p = meta.find("preset");
  c.preset = p == meta.end() ? "custom" : p->second;
  c.mels = get("mels");
  c.sfa_factor = get("sfa_factor");
  c.channels = get("channels");
  c.scale = get("scale");
  c.se_bottleneck = get("se_bottleneck");
  c.agg_channels = get("agg_channels");
  c.asp_hidden = get("asp_hidden");
  c.dim = get("dim");
  c.heads = get("heads");
  c.ffn = get("ffn");
  c.layers_per_block = get("layers_per_block");
  c.embed_dim = get("embed_dim");
  return c;
}

/// Stage-2 initial checkpoint: branch tensors copied from the stage-1
/// checkpoints, classifiers dropped, bridges and EAL freshly initialized.
inline Checkpoint transfer_weights(const Checkpoint& stage1_td, const Checkpoint& stage1_tr, const ModelConfig& cfg,
                                   std::uint64_t seed) {
  PVectors fresh(cfg, seed);
  Checkpoint out;
  out.stage = 2;
  out.meta = config_meta(cfg);
  out.tensors = state_of(fresh);
  std::vector<std::string> missing;
  for (auto& [name, t] : out.tensors) {
    const Checkpoint* src = nullptr;
    if (name.rfind(kTdnnNs, 0) == 0) src = &stage1_td;
    else if (name.rfind(kTransformerNs, 0) == 0) src = &stage1_tr;
    if (!src) continue;
    auto it = src->tensors.find(name);
    if (it == src->tensors.end() || it->second.shape() != t.shape()) {
      missing.push_back(name);
      continue;
    }
    t = it->second.clone();
  }
  if (!missing.empty()) {
    std::string msg = "transfer: stage-1 checkpoints lack " + std::to_string(missing.size()) + " branch tensors:";
    for (const auto& n : missing) msg += "\n  " + n;
    throw TransferError(msg);
  }
  return out;
}

} // namespace pvec
