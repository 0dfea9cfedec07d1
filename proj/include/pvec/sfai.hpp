#pragma once

#include <string>
#include <vector>

#include "pvec/transformer.hpp"

namespace pvec {

// Gate is applied after BN: a per-channel scale ahead of train-mode BN would
// be normalized away and could not close the bridge.

/// FSB1, TDNN -> Transformer. [B x F_Td x T_Td] -> [B x T_Tr x F_Tr].
struct Fsb1 {
  std::string name = "fsb1";
  LayerNorm ln;
  Conv1d align;
  BatchNorm1d bn;
  Tensor gate;  // V1, length F_Tr

  Fsb1() = default;
  Fsb1(std::string n, std::size_t f_td, std::size_t f_tr, double gate_init, Rng& rng)
      : name(std::move(n)), ln(f_td), align(f_td, f_tr, 3, rng, {2, 1, 1}), bn(f_tr), gate(param_fill({f_tr}, gate_init)) {}

  /// Channel- and time-aligned source after BN, before the gate, [B x F_Tr x T_Tr].
  Tensor aligned(const Tensor& x_td, const Context& ctx) {
    if (x_td.rank() != 3 || x_td.dim(1) != ln.gamma.numel()) {
      throw DimensionError(name + ": expected [B x " + std::to_string(ln.gamma.numel()) + " x T], got " +
                           to_string(x_td.shape()));
    }
    Tensor normed = permute(ln(permute(x_td, {0, 2, 1})), {0, 2, 1});
    return bn(align(normed), ctx);
  }

  Tensor operator()(const Tensor& x_td, const Context& ctx) {
    Tensor a = permute(aligned(x_td, ctx), {0, 2, 1});
    return mul(a, reshape(sigmoid(gate), {1, 1, gate.numel()}));
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    ln.visit(prefix + "ln.", v);
    align.visit(prefix + "align.", v);
    bn.visit(prefix + "bn.", v);
    v(prefix + "gate", gate, Slot::trainable);
  }
};

/// FSB2, Transformer -> TDNN. [B x T_Tr x F_Tr] -> [B x F_Td x T_Tr*factor].
struct Fsb2 {
  std::string name = "fsb2";
  std::size_t factor = 2;
  LayerNorm ln;
  Conv1d align;
  BatchNorm1d bn;
  Tensor gate;  // V2, length F_Td

  Fsb2() = default;
  Fsb2(std::string n, std::size_t f_tr, std::size_t f_td, std::size_t up, double gate_init, Rng& rng)
      : name(std::move(n)), factor(up), ln(f_tr), align(f_tr, f_td, 1, rng), bn(f_td), gate(param_fill({f_td}, gate_init)) {
    if (up == 0) throw ConfigError(name + ": upsample factor must be >= 1");
  }

  Tensor aligned(const Tensor& x_tr, const Context& ctx) {
    if (x_tr.rank() != 3 || x_tr.dim(2) != ln.gamma.numel()) {
      throw DimensionError(name + ": expected [B x T x " + std::to_string(ln.gamma.numel()) + "], got " +
                           to_string(x_tr.shape()));
    }
    Tensor up = upsample_nearest(permute(ln(x_tr), {0, 2, 1}), factor);
    return bn(align(up), ctx);
  }

  Tensor operator()(const Tensor& x_tr, const Context& ctx) {
    return mul(aligned(x_tr, ctx), reshape(sigmoid(gate), {1, gate.numel(), 1}));
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    ln.visit(prefix + "ln.", v);
    align.visit(prefix + "align.", v);
    bn.visit(prefix + "bn.", v);
    v(prefix + "gate", gate, Slot::trainable);
  }
};

struct BridgeSet {
  Fsb1 fsb1a, fsb1b;
  Fsb2 fsb2a, fsb2b;

  BridgeSet() = default;
  BridgeSet(std::size_t f_td, std::size_t f_tr, double gate_init, Rng& rng)
      : fsb1a("fsb1a", f_td, f_tr, gate_init, rng),
        fsb1b("fsb1b", f_td, f_tr, gate_init, rng),
        fsb2a("fsb2a", f_tr, f_td, 2, gate_init, rng),
        fsb2b("fsb2b", f_tr, f_td, 2, gate_init, rng) {}

  std::vector<Tensor*> gates() { return {&fsb1a.gate, &fsb1b.gate, &fsb2a.gate, &fsb2b.gate}; }

  void set_gates(double value) {
    for (Tensor* g : gates()) std::fill(g->values().begin(), g->values().end(), value);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    fsb1a.visit(prefix + "fsb1a.", v);
    fsb1b.visit(prefix + "fsb1b.", v);
    fsb2a.visit(prefix + "fsb2a.", v);
    fsb2b.visit(prefix + "fsb2b.", v);
  }
};

/// Named intermediate tensors of one coupled forward, in evaluation order.
struct CouplingTrace {
  struct Event {
    std::string name;
    Tensor value;
  };
  std::vector<Event> events;

  void add(std::string name, const Tensor& t) { events.push_back({std::move(name), t}); }
  const Tensor* find(const std::string& name) const {
    for (const Event& e : events)
      if (e.name == name) return &e.value;
    return nullptr;
  }
};

inline const std::vector<std::string>& coupling_order() {
  static const std::vector<std::string> order = {"X'_Td", "X'_Tr", "C_Td", "X''_Td", "C_Tr",
                                                 "X''_Tr", "C'_Td", "X'''_Td", "C'_Tr", "X'''_Tr"};
  return order;
}

/// Checks a trace against Eq. (1)-(2): event order, and on `tape` that each
/// complement is computed from the tap that already absorbed the previous one.
inline void verify_coupling(const CouplingTrace& trace, const Tape& tape) {
  const auto& order = coupling_order();
  if (trace.events.size() != order.size()) throw StateError("coupling trace: wrong number of events");
  for (std::size_t i = 0; i < order.size(); ++i)
    if (trace.events[i].name != order[i]) {
      throw StateError("coupling trace: expected " + order[i] + " at position " + std::to_string(i) + ", got " +
                       trace.events[i].name);
    }
  // (output, input) pairs that Eq. (1)-(2) require
  static const std::vector<std::pair<std::string, std::string>> edges = {
      {"C_Td", "X'_Tr"},     {"X''_Td", "X'_Td"},   {"X''_Td", "C_Td"},    {"C_Tr", "X''_Td"},
      {"C_Tr", "C_Td"},      {"X''_Tr", "X'_Tr"},   {"X''_Tr", "C_Tr"},    {"C'_Td", "X''_Tr"},
      {"X'''_Td", "X''_Td"}, {"X'''_Td", "C'_Td"},  {"C'_Tr", "X'''_Td"},  {"C'_Tr", "C'_Td"},
      {"X'''_Tr", "X''_Tr"}, {"X'''_Tr", "C'_Tr"}};
  for (const auto& [out, in] : edges)
    if (!tape.depends_on(*trace.find(out), *trace.find(in)))
      throw StateError("coupling trace: " + out + " was not computed from " + in);
  // nothing may read ahead of the schedule
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t j = i + 1; j < order.size(); ++j)
      if (tape.depends_on(*trace.find(order[i]), *trace.find(order[j])))
        throw StateError("coupling trace: " + order[i] + " depends on later " + order[j]);
}

struct CoupledOutput {
  BranchOutput td, tr;
};

/// Eq. (1)-(2):
///   X'_Td  = B1(X_Td)           X'_Tr  = T1(X_Tr)
///   X''_Td = B2(X'_Td + C_Td)   C_Td   = FSB2a(X'_Tr)
///   X''_Tr = T2(X'_Tr + C_Tr)   C_Tr   = FSB1a(X''_Td)
///   X'''_Td = B3(X''_Td + C'_Td) C'_Td = FSB2b(X''_Tr)
///   X'''_Tr = T3(X''_Tr + C'_Tr) C'_Tr = FSB1b(X'''_Td)
/// With `trace`, records every intermediate; if a tape is also active the
/// dependency chain is verified before returning.
inline CoupledOutput coupled_forward(TdnnBranch& td, TransformerBranch& tr, BridgeSet& br, const Tensor& x,
                                     const Context& ctx, CouplingTrace* trace = nullptr) {
  const Tensor batch = x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x;
  if (batch.dim(2) % 2 != 0) {
    throw DimensionError("fsb2a: coupled forward needs an even frame count (T_Td = 2 T_Tr), got T=" +
                         std::to_string(batch.dim(2)));
  }
  auto note = [&](const char* name, const Tensor& t) {
    if (trace) trace->add(name, t);
  };
  auto checked = [](const Tensor& c, const Tensor& tap, const std::string& bridge) {
    if (c.shape() != tap.shape()) {
      throw DimensionError(bridge + ": output " + to_string(c.shape()) + " does not match tap " + to_string(tap.shape()));
    }
    return add(tap, c);
  };
  CoupledOutput out;
  auto [x_td, att_td] = td.entry(batch, ctx);
  auto [x_tr, att_tr] = tr.entry(batch);
  out.td.attention = att_td;
  out.tr.attention = att_tr;

  out.td.taps[0] = td.block(0, x_td, ctx);
  note("X'_Td", out.td.taps[0]);
  out.tr.taps[0] = tr.block(0, x_tr, ctx);
  note("X'_Tr", out.tr.taps[0]);

  Tensor c_td = br.fsb2a(out.tr.taps[0], ctx);
  note("C_Td", c_td);
  out.td.taps[1] = td.block(1, checked(c_td, out.td.taps[0], "fsb2a"), ctx);
  note("X''_Td", out.td.taps[1]);
  Tensor c_tr = br.fsb1a(out.td.taps[1], ctx);
  note("C_Tr", c_tr);
  out.tr.taps[1] = tr.block(1, checked(c_tr, out.tr.taps[0], "fsb1a"), ctx);
  note("X''_Tr", out.tr.taps[1]);

  Tensor c2_td = br.fsb2b(out.tr.taps[1], ctx);
  note("C'_Td", c2_td);
  out.td.taps[2] = td.block(2, checked(c2_td, out.td.taps[1], "fsb2b"), ctx);
  note("X'''_Td", out.td.taps[2]);
  Tensor c2_tr = br.fsb1b(out.td.taps[2], ctx);
  note("C'_Tr", c2_tr);
  out.tr.taps[2] = tr.block(2, checked(c2_tr, out.tr.taps[1], "fsb1b"), ctx);
  note("X'''_Tr", out.tr.taps[2]);

  out.td.embedding = td.embed(out.td.taps, ctx);
  out.tr.embedding = tr.embed(out.tr.taps[2], ctx);
  if (trace && Tape::active()) verify_coupling(*trace, *Tape::active());
  return out;
}

} // namespace pvec
