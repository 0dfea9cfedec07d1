#include <gtest/gtest.h>

#include "pvec/model.hpp"
#include "test_util.hpp"

using namespace pvec;
using pvec::testing::max_abs_diff;
using pvec::testing::randn;

namespace {

const Context kEval{};

struct Branches {
  ModelConfig cfg;
  Rng rng{11};
  TdnnBranch td;
  TransformerBranch tr;
  BridgeSet br;

  Branches() {
    cfg.dropout = 0.0;
    td = TdnnBranch(cfg.tdnn(), rng);
    tr = TransformerBranch(cfg.transformer(), rng);
    br = BridgeSet(cfg.channels, cfg.dim, 0.0, rng);
  }
};

} // namespace

TEST(Fsb1, GateZeroHalvesAlignedFeatures) {
  Rng rng(1);
  Fsb1 f("fsb1a", 64, 32, 0.0, rng);
  Tensor x = randn({2, 64, 20}, rng);
  Tensor out = f(x, kEval);
  EXPECT_EQ(out.shape(), (Shape{2, 10, 32}));
  Tensor ref = scale(permute(f.aligned(x, kEval), {0, 2, 1}), 0.5);
  EXPECT_LE(max_abs_diff(out, ref), 1e-15);
}

TEST(Fsb1, SaturatedGateSilences) {
  Rng rng(2);
  Fsb1 f("fsb1a", 64, 32, -40.0, rng);
  Tensor x = randn({2, 64, 20}, rng, 3.0);
  for (double v : f(x, Context{Mode::train, nullptr}).values()) EXPECT_LE(std::abs(v), 1e-15);
  for (double v : f(x, kEval).values()) EXPECT_LE(std::abs(v), 1e-15);
}

TEST(Fsb2, GateZeroShapeAndSaturation) {
  Rng rng(3);
  Fsb2 f("fsb2a", 32, 64, 2, 0.0, rng);
  Tensor x = randn({2, 10, 32}, rng);
  Tensor out = f(x, kEval);
  EXPECT_EQ(out.shape(), (Shape{2, 64, 20}));
  EXPECT_LE(max_abs_diff(out, scale(f.aligned(x, kEval), 0.5)), 1e-15);
  f.gate.values().assign(64, -40.0);
  for (double v : f(x, kEval).values()) EXPECT_LE(std::abs(v), 1e-15);
  EXPECT_THROW(f(randn({2, 10, 31}, rng), kEval), DimensionError);
}

TEST(Fsb, GateMonotone) {
  Rng rng(4);
  Fsb1 f1("fsb1a", 16, 8, 0.0, rng);
  Fsb2 f2("fsb2a", 8, 16, 2, 0.0, rng);
  Tensor x1 = randn({2, 16, 12}, rng), x2 = randn({2, 6, 8}, rng);
  for (std::size_t j : {0u, 5u}) {
    Tensor before1 = f1(x1, kEval), before2 = f2(x2, kEval);
    f1.gate[j] += 0.7;
    f2.gate[j] += 0.7;
    Tensor after1 = f1(x1, kEval), after2 = f2(x2, kEval);
    for (std::size_t i = 0; i < before1.numel(); ++i) {
      if (i % 8 == j) EXPECT_GE(std::abs(after1[i]), std::abs(before1[i]));
      else EXPECT_EQ(after1[i], before1[i]);
    }
    for (std::size_t i = 0; i < before2.numel(); ++i) {
      if ((i / 12) % 16 == j) EXPECT_GE(std::abs(after2[i]), std::abs(before2[i]));
      else EXPECT_EQ(after2[i], before2[i]);
    }
  }
}

TEST(Coupled, DecouplingIdentity) {
  Branches b;
  b.br.set_gates(-40.0);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = randn({2, 24, 8 + 2 * static_cast<std::size_t>(trial % 5)}, rng);
    auto c = coupled_forward(b.td, b.tr, b.br, x, kEval);
    EXPECT_LE(max_abs_diff(c.td.embedding, b.td.forward(x, kEval).embedding), 1e-9);
    EXPECT_LE(max_abs_diff(c.tr.embedding, b.tr.forward(x, kEval).embedding), 1e-9);
  }
}

TEST(Coupled, OpenGatesCouple) {
  Branches b;
  Rng rng(6);
  Tensor x = randn({2, 24, 12}, rng);
  auto c = coupled_forward(b.td, b.tr, b.br, x, kEval);
  EXPECT_GT(max_abs_diff(c.td.embedding, b.td.forward(x, kEval).embedding), 1e-6);
  EXPECT_GT(max_abs_diff(c.tr.embedding, b.tr.forward(x, kEval).embedding), 1e-6);
}

TEST(Coupled, TraceFollowsEquations) {
  Branches b;
  Rng rng(7);
  Tape tape;
  TapeScope scope(tape);
  CouplingTrace trace;
  Tensor x = randn({2, 24, 10}, rng);
  x.set_requires_grad(true);
  ASSERT_NO_THROW(coupled_forward(b.td, b.tr, b.br, x, Context{Mode::train, &rng}, &trace));
  ASSERT_EQ(trace.events.size(), coupling_order().size());
  for (std::size_t i = 0; i < trace.events.size(); ++i) EXPECT_EQ(trace.events[i].name, coupling_order()[i]);
  // C_Tr reads X''_Td, which already absorbed C_Td; C_Td itself never sees X''_Td.
  EXPECT_TRUE(tape.depends_on(*trace.find("C_Tr"), *trace.find("C_Td")));
  EXPECT_FALSE(tape.depends_on(*trace.find("C_Td"), *trace.find("X''_Td")));
  EXPECT_FALSE(tape.depends_on(*trace.find("X''_Td"), *trace.find("C_Tr")));
}

TEST(Coupled, VerifierRejectsWrongSchedule) {
  Branches b;
  Rng rng(8);
  Tape tape;
  TapeScope scope(tape);
  Tensor x = randn({1, 24, 8}, rng);
  CouplingTrace good;
  coupled_forward(b.td, b.tr, b.br, x, kEval, &good);

  CouplingTrace swapped = good;
  std::swap(swapped.events[2], swapped.events[3]);
  EXPECT_THROW(verify_coupling(swapped, tape), StateError);

  // C_Tr taken from X'_Td (before C_Td was injected) breaks Eq. (2).
  CouplingTrace early = good;
  for (auto& e : early.events)
    if (e.name == "C_Tr") e.value = b.br.fsb1a(*good.find("X'_Td"), kEval);
  EXPECT_THROW(verify_coupling(early, tape), StateError);

  CouplingTrace short_trace = good;
  short_trace.events.pop_back();
  EXPECT_THROW(verify_coupling(short_trace, tape), StateError);
}

TEST(Coupled, OddFramesNameTheBridge) {
  Branches b;
  Rng rng(9);
  try {
    coupled_forward(b.td, b.tr, b.br, randn({1, 24, 9}, rng), kEval);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("fsb2a"), std::string::npos);
  }
}

TEST(Coupled, GradientThroughBridges) {
  Branches b;
  Rng rng(10);
  Tensor x = randn({2, 24, 8}, rng);
  std::vector<Tensor> leaves;
  b.br.visit("", [&](const std::string&, Tensor& t, Slot s) {
    if (s == Slot::trainable) leaves.push_back(t);
  });
  Context train{Mode::train, nullptr};
  auto rep = check_gradients(
      [&] {
        auto c = coupled_forward(b.td, b.tr, b.br, x, train);
        return add(pvec::testing::probe_loss(c.td.embedding, 1), pvec::testing::probe_loss(c.tr.embedding, 2));
      },
      leaves, {1e-5, 1e-6, 150, 3, true});
  EXPECT_EQ(rep.checked, 150u);
  EXPECT_LE(rep.max_rel_error, 1e-3) << rep.worst;
  for (Tensor* g : b.br.gates()) EXPECT_TRUE(g->has_grad());
}
