#include <gtest/gtest.h>

#include <filesystem>

#include "pvec/model.hpp"
#include "param_oracle.hpp"
#include "test_util.hpp"

using namespace pvec;
using pvec::testing::max_abs_diff;
using pvec::testing::randn;
using pvec::oracle::hand_count;

namespace {

const Context kEval{};

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pvec_model_" + name)).string();
}

} // namespace

TEST(ParamCount, SingleLinear) {
  Rng rng(1);
  Linear fc(4, 3, rng);
  EXPECT_EQ(count_trainable(fc), 15u);
}

TEST(ParamCount, ToyMatchesHandCount) {
  const ModelConfig toy = ModelConfig::toy();
  EXPECT_EQ(param_breakdown(toy), hand_count(toy));
  std::size_t total = 0;
  for (const auto& [ns, n] : hand_count(toy)) total += n;
  EXPECT_EQ(param_count(toy), total);
}

TEST(ParamCount, FullPresetInBand) {
  const ModelConfig full = ModelConfig::full();
  std::size_t hand = 0;
  for (const auto& [ns, n] : hand_count(full)) hand += n;
  const std::size_t n = param_count(full);
  EXPECT_EQ(n, hand);
  EXPECT_GE(n, 14'000'000u);
  EXPECT_LE(n, 16'000'000u);
}

TEST(Eal, SelectorWeightsPassTdnnEmbedding) {
  Rng rng(2);
  Eal eal(4, rng);
  eal.fc.weight.values().assign(32, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eal.fc.weight[i * 8 + i] = 1.0;
  eal.fc.bias.values().assign(4, 0.0);
  Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng);
  Tensor out = eal(a, b, kEval);
  EXPECT_EQ(out.shape(), (Shape{3, 4}));
  EXPECT_LE(max_abs_diff(out, a), 1e-5 * 4);  // BN eval: x / sqrt(1 + 1e-5)
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], a[i] / std::sqrt(1.0 + kNormEps), 1e-15);
  EXPECT_THROW(eal(a, randn({3, 5}, rng), kEval), DimensionError);
}

TEST(Eal, GradientReachesBothEmbeddings) {
  Rng rng(3);
  Eal eal(6, rng);
  Tensor a = randn({4, 6}, rng), b = randn({4, 6}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(pvec::testing::probe_loss(eal(a, b, Context{Mode::train, nullptr})));
  double na = 0, nb = 0;
  for (double g : a.grad()) na += g * g;
  for (double g : b.grad()) nb += g * g;
  EXPECT_GT(na, 1e-12);
  EXPECT_GT(nb, 1e-12);
}

TEST(PVectors, EvalDeterministicAndPure) {
  ModelConfig cfg;
  PVectors m(cfg, 4);
  Rng rng(4);
  Tensor x = randn({2, 24, 16}, rng);
  TensorMap before = state_of(m);
  Tensor e1 = m.forward(x, kEval).embedding, e2 = m.forward(x, kEval).embedding;
  EXPECT_EQ(e1.values(), e2.values());
  for (const auto& [name, t] : state_of(m)) EXPECT_EQ(t.values(), before.at(name).values()) << name;
  double norm = 0;
  for (double v : e1.values()) norm += v * v;
  EXPECT_TRUE(std::isfinite(norm));
  EXPECT_GT(norm, 0.0);
  EXPECT_EQ(e1.shape(), (Shape{2, 32}));
}

TEST(PVectors, TrainModeUpdatesOnlyRunningStats) {
  PVectors m(ModelConfig{}, 5);
  Rng rng(5);
  TensorMap before = state_of(m);
  m.forward(randn({2, 24, 8}, rng), Context{Mode::train, &rng});
  bool moved = false;
  m.visit("", [&](const std::string& name, Tensor& t, Slot s) {
    if (s == Slot::trainable) EXPECT_EQ(t.values(), before.at(name).values()) << name;
    else moved = moved || t.values() != before.at(name).values();
  });
  EXPECT_TRUE(moved);
}

TEST(Checkpoint, SaveLoadSaveByteIdentical) {
  PVectors m(ModelConfig{}, 6);
  Checkpoint ck;
  ck.stage = 2;
  ck.epoch = 3;
  ck.step = 123456789012ull;
  ck.meta = config_meta(m.cfg);
  ck.tensors = state_of(m);
  OptimizerState opt;
  opt.step = 7;
  opt.moments["eal.fc.bias"] = {Tensor({32}, 0.25), Tensor({32}, 1e-9)};
  ck.optimizer = opt;
  const std::string a = temp_path("a.pvck"), b = temp_path("b.pvck");
  save_checkpoint(a, ck);
  Checkpoint back = load_checkpoint(a);
  save_checkpoint(b, back);
  EXPECT_EQ(detail::slurp(a), detail::slurp(b));
  EXPECT_EQ(back.stage, 2u);
  EXPECT_EQ(back.step, ck.step);
  ASSERT_TRUE(back.optimizer);
  EXPECT_EQ(back.optimizer->moments.at("eal.fc.bias").second.values(), opt.moments["eal.fc.bias"].second.values());
  for (const auto& [name, t] : ck.tensors) EXPECT_EQ(back.tensors.at(name).values(), t.values());
  EXPECT_EQ(config_from_meta(back.meta).channels, 64u);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Checkpoint, CorruptionAndMismatchReported) {
  PVectors m(ModelConfig{}, 7);
  Checkpoint ck;
  ck.meta = config_meta(m.cfg);
  ck.tensors = state_of(m);
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint("PVCX" + bytes.substr(4)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);

  TensorMap state = ck.tensors;
  state.erase("eal.fc.bias");
  state["eal.extra"] = Tensor({2}, 0.0);
  state["tdnn.fc.bias"] = Tensor({3}, 0.0);
  try {
    load_state(m, state);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing eal.fc.bias"), std::string::npos);
    EXPECT_NE(msg.find("unknown eal.extra"), std::string::npos);
    EXPECT_NE(msg.find("shape mismatch tdnn.fc.bias"), std::string::npos);
  }
}

TEST(Transfer, CopiesBranchesAndDropsClassifiers) {
  ModelConfig cfg;
  StandaloneModel td(BranchKind::tdnn, cfg, 5, 10), tr(BranchKind::transformer, cfg, 5, 11);
  Checkpoint ck_td, ck_tr;
  ck_td.tensors = state_of(td);
  ck_tr.tensors = state_of(tr);
  ASSERT_TRUE(ck_td.has("classifier.tdnn.weight"));
  Checkpoint out = transfer_weights(ck_td, ck_tr, cfg, 12);
  EXPECT_EQ(out.stage, 2u);
  std::size_t copied = 0;
  for (const auto& [name, t] : out.tensors) {
    EXPECT_NE(name.rfind(kClassifierNs, 0), 0u) << name;
    const Checkpoint* src = name.rfind(kTdnnNs, 0) == 0 ? &ck_td : name.rfind(kTransformerNs, 0) == 0 ? &ck_tr : nullptr;
    if (!src) continue;
    ASSERT_TRUE(src->has(name)) << name;
    EXPECT_EQ(std::memcmp(t.data().data(), src->tensors.at(name).data().data(), t.numel() * sizeof(double)), 0) << name;
    ++copied;
  }
  EXPECT_EQ(copied, ck_td.tensors.size() - 1 + ck_tr.tensors.size() - 1);

  ck_tr.tensors.erase("transformer.fc.weight");
  try {
    transfer_weights(ck_td, ck_tr, cfg, 12);
    FAIL() << "expected TransferError";
  } catch (const TransferError& e) {
    EXPECT_NE(std::string(e.what()).find("transformer.fc.weight"), std::string::npos);
  }
}

TEST(Transfer, SaturatedGatesReproduceStageOneEmbedding) {
  ModelConfig cfg;
  StandaloneModel td(BranchKind::tdnn, cfg, 5, 20), tr(BranchKind::transformer, cfg, 5, 21);
  Checkpoint ck_td, ck_tr;
  ck_td.tensors = state_of(td);
  ck_tr.tensors = state_of(tr);
  PVectors pv(cfg, 22);
  load_state(pv, transfer_weights(ck_td, ck_tr, cfg, 22).tensors);
  pv.bridges.set_gates(-40.0);
  Rng rng(23);
  Tensor x = randn({1, 24, 20}, rng);
  auto out = pv.forward(x, kEval);
  EXPECT_LE(max_abs_diff(out.coupled.td.embedding, td.forward(x, kEval).embedding), 1e-9);
  EXPECT_LE(max_abs_diff(out.coupled.tr.embedding, tr.forward(x, kEval).embedding), 1e-9);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.scale = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::preset_named("huge"), ConfigError);
  EXPECT_EQ(ModelConfig::preset_named("full").channels, 512u);
}
