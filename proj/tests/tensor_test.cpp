#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"

using namespace pvec;
using pvec::testing::max_abs_diff;
using pvec::testing::probe_loss;
using pvec::testing::randn;

namespace {

constexpr double kOpTol = 1e-6;

void expect_grads_ok(const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
  GradCheckOptions opt;
  opt.step = 1e-5;
  auto rep = check_gradients(f, std::move(leaves), opt);
  EXPECT_GT(rep.checked, 0u);
  EXPECT_LE(rep.max_rel_error, kOpTol) << rep.worst;
}

} // namespace

TEST(Tensor, ConstructionInvariants) {
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  t.set_requires_grad(true);
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Matmul, IdentityAndSelector) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).values(), m.values());
  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {0, 5});
  Tensor r = matmul(row, col);
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_THROW(matmul(m, Tensor({3, 1})), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  Tensor a = randn({3, 4}, rng), b = randn({4, 2}, rng);
  expect_grads_ok([&] { return probe_loss(matmul(a, b)); }, {a, b});
  Tensor p = randn({2, 3, 4}, rng), q = randn({2, 4, 5}, rng);
  expect_grads_ok([&] { return probe_loss(matmul(p, q)); }, {p, q});
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor x = randn({2, 3, 4}, rng), w = randn({5, 4}, rng), b = randn({5}, rng);
  expect_grads_ok([&] { return probe_loss(linear(x, w, b)); }, {x, w, b});
}

TEST(Conv1d, IdentityKernel) {
  Rng rng(3);
  Tensor x = randn({3, 6}, rng);
  Tensor w({3, 3, 1}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[(c * 3 + c)] = 1.0;
  Tensor y = conv1d(x, w, Tensor({3}, 0.0));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Conv1d, HandConvolution) {
  Tensor x({1, 3}, {1, 2, 3});
  Tensor w({1, 1, 3}, {1, 1, 1});
  Tensor y = conv1d(x, w, Tensor({1}, 0.0), {1, 1, 1});
  EXPECT_EQ(y.values(), (std::vector<double>{3, 6, 5}));
}

TEST(Conv1d, DilatedLengthFormula) {
  Tensor x({1, 5}, 1.0);
  Tensor w({1, 1, 3}, 1.0);
  Tensor y = conv1d(x, w, {}, {1, 2, 2});
  EXPECT_EQ(y.dim(1), 5u);
  EXPECT_EQ(conv_output_length(298, 3, {2, 1, 1}), 149u);
  EXPECT_THROW(conv1d(Tensor({1, 2}), Tensor({1, 1, 5}), {}), DimensionError);
}

TEST(Conv1d, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Tensor x = randn({2, 3, 9}, rng), w = randn({4, 3, 3}, rng), b = randn({4}, rng);
  for (Conv1dOptions o : {Conv1dOptions{1, 1, 1}, Conv1dOptions{2, 1, 1}, Conv1dOptions{1, 3, 3}}) {
    expect_grads_ok([&] { return probe_loss(conv1d(x, w, b, o)); }, {x, w, b});
  }
}

TEST(Conv2d, IdentityAndHandSum) {
  Rng rng(5);
  Tensor x = randn({1, 3, 4}, rng);
  Tensor y = conv2d(x, Tensor({1, 1, 1, 1}, 1.0), Tensor({1}, 0.0));
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
  Tensor ones({1, 3, 3}, 1.0);
  Tensor s = conv2d(ones, Tensor({1, 1, 3, 3}, 1.0), Tensor({1}, 0.0), 1);
  EXPECT_EQ(s[4], 9.0);  // center sees all nine inputs
  EXPECT_EQ(s[0], 4.0);  // corner sees a 2x2 window
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor x = randn({2, 2, 4, 5}, rng), w = randn({3, 2, 3, 3}, rng), b = randn({3}, rng);
  expect_grads_ok([&] { return probe_loss(conv2d(x, w, b, 1)); }, {x, w, b});
}

TEST(Activations, KnownValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  Tensor s = softmax(Tensor({3}, 0.0), 0);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  Tensor big = softmax(Tensor({2}, {1000.0, 1000.0}), 0);
  EXPECT_EQ(big[0], 0.5);
  EXPECT_EQ(big[1], 0.5);
}

TEST(Activations, SoftmaxRowsAndSigmoidRange) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = randn({4, 7}, rng, 10.0);
    Tensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += y[r * 7 + c];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    Tensor g = sigmoid(x);
    for (double v : g.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  Tensor x = randn({3, 5}, rng);
  expect_grads_ok([&] { return probe_loss(sigmoid(x)); }, {x});
  expect_grads_ok([&] { return probe_loss(tanh(x)); }, {x});
  expect_grads_ok([&] { return probe_loss(softmax(x, 0)); }, {x});
  expect_grads_ok([&] { return probe_loss(softmax(x, 1)); }, {x});
  // keep relu inputs away from the kink
  Tensor r = randn({3, 5}, rng);
  for (double& v : r.values()) v += v > 0 ? 0.1 : -0.1;
  expect_grads_ok([&] { return probe_loss(relu(r)); }, {r});
  Tensor p = randn({3, 5}, rng);
  for (double& v : p.values()) v = std::abs(v) + 0.5;
  expect_grads_ok([&] { return probe_loss(sqrt(p)); }, {p});
  expect_grads_ok([&] { return probe_loss(log(p)); }, {p});
  expect_grads_ok([&] { return probe_loss(exp(x)); }, {x});
  expect_grads_ok([&] { return probe_loss(div(x, p)); }, {x, p});
}

TEST(BatchNorm, TrainModeStandardizes) {
  Rng rng(9);
  Tensor x = randn({4, 3, 10}, rng, 3.0);
  Tensor g({3}, 1.0), b({3}, 0.0), rm({3}, 0.0), rv({3}, 1.0);
  Tensor y = batchnorm(x, g, b, rm, rv, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t t = 0; t < 10; ++t) m += y[(n * 3 + c) * 10 + t];
    m /= 40;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t t = 0; t < 10; ++t) v += std::pow(y[(n * 3 + c) * 10 + t] - m, 2);
    v /= 40;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
  // running stats moved by momentum 0.1 toward the batch statistics
  EXPECT_NE(rm[0], 0.0);
}

TEST(BatchNorm, ConstantChannelAndAffine) {
  Tensor x({2, 1, 3}, 7.0);
  Tensor g({1}, 1.0), b({1}, 0.0), rm({1}, 0.0), rv({1}, 1.0);
  Tensor y0 = batchnorm(x, g, b, rm, rv, true);
  for (double v : y0.data()) EXPECT_EQ(v, 0.0);

  Rng rng(10);
  Tensor z = randn({8, 2, 5}, rng);
  Tensor one({2}, 1.0), zero({2}, 0.0);
  Tensor std_in = batchnorm(z, one, zero, rm = Tensor({2}, 0.0), rv = Tensor({2}, 1.0), true);
  Tensor y = batchnorm(std_in, Tensor({2}, 2.0), Tensor({2}, 3.0), rm, rv, true);
  double m = 0, v = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) m += y[i];
  m /= static_cast<double>(y.numel());
  for (std::size_t i = 0; i < y.numel(); ++i) v += (y[i] - m) * (y[i] - m);
  v /= static_cast<double>(y.numel());
  EXPECT_NEAR(m, 3.0, 1e-6);
  EXPECT_NEAR(std::sqrt(v), 2.0, 1e-4);  // eps shrinks the unit-variance input slightly
}

TEST(BatchNorm, EvalNeedsRunningStats) {
  Tensor x({2, 2}, 1.0);
  Tensor g({2}, 1.0), b({2}, 0.0), none;
  Tensor none2;
  EXPECT_THROW(batchnorm(x, g, b, none, none2, false), StateError);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor x = randn({3, 4, 5}, rng), g = randn({4}, rng), b = randn({4}, rng);
  Tensor rm({4}, 0.0), rv({4}, 1.0);
  expect_grads_ok([&] { return probe_loss(batchnorm(x, g, b, rm, rv, true)); }, {x, g, b});
  Tensor rm2({4}, 0.3), rv2({4}, 2.0);
  expect_grads_ok([&] { return probe_loss(batchnorm(x, g, b, rm2, rv2, false)); }, {x, g, b});
  Tensor x2 = randn({5, 4}, rng);
  expect_grads_ok([&] { return probe_loss(batchnorm(x2, g, b, rm, rv, true)); }, {x2, g, b});
}

TEST(LayerNorm, NormalizesLastAxis) {
  Rng rng(12);
  Tensor x = randn({3, 8}, rng, 4.0);
  Tensor y = layernorm(x, Tensor({8}, 1.0), Tensor({8}, 0.0));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 8; ++i) m += y[r * 8 + i];
    m /= 8;
    for (std::size_t i = 0; i < 8; ++i) v += std::pow(y[r * 8 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v / 8, 1.0, 1e-6);
  }
  Tensor c = layernorm(Tensor({2, 4}, 5.0), Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  Tensor a = layernorm(y, Tensor({8}, 2.0), Tensor({8}, 3.0));
  double m = 0;
  for (double v : a.data()) m += v;
  EXPECT_NEAR(m / 24, 3.0, 1e-6);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor x = randn({2, 3, 6}, rng), g = randn({6}, rng), b = randn({6}, rng);
  expect_grads_ok([&] { return probe_loss(layernorm(x, g, b)); }, {x, g, b});
}

TEST(Pool, MeanAndMax) {
  EXPECT_EQ(pool(Tensor({3}, {1, 2, 3}), 0, PoolKind::mean).item(), 2.0);
  Tensor x({3}, {1, 3, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor m = pool(x, 0, PoolKind::max);
  EXPECT_EQ(m.item(), 3.0);
  tape.backward(m);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0}));
}

TEST(Pool, TiesRouteToFirstIndex) {
  Tensor x({4}, {2, 5, 5, 1});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  tape.backward(pool(x, 0, PoolKind::max));
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Pool, PermutationInvariance) {
  Rng rng(14);
  Tensor x = randn({3, 9}, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp({3, 9});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 9; ++t) xp[c * 9 + t] = x[c * 9 + perm[t]];
  EXPECT_EQ(pool(x, 1, PoolKind::max).values(), pool(xp, 1, PoolKind::max).values());
  EXPECT_LE(max_abs_diff(pool(x, 1, PoolKind::mean), pool(xp, 1, PoolKind::mean)), 1e-15);
}

TEST(Pool, GradientMatchesFiniteDifferences) {
  Rng rng(15);
  Tensor x = randn({2, 3, 5}, rng);
  expect_grads_ok([&] { return probe_loss(pool(x, 2, PoolKind::mean)); }, {x});
  expect_grads_ok([&] { return probe_loss(pool(x, 1, PoolKind::max)); }, {x});
}

TEST(Upsample, RepeatsFrames) {
  Tensor x({1, 2}, {4, 7});
  EXPECT_EQ(upsample_nearest(x, 1).values(), x.values());
  EXPECT_EQ(upsample_nearest(x, 2).values(), (std::vector<double>{4, 4, 7, 7}));
  EXPECT_THROW(upsample_nearest(x, 0), DimensionError);
}

TEST(Upsample, MeanDownsampleRecoversInput) {
  Rng rng(16);
  Tensor x = randn({3, 5}, rng);
  Tensor up = upsample_nearest(x, 2);
  Tensor down = mean(reshape(up, {3, 5, 2}), 2);
  EXPECT_LE(max_abs_diff(down, x), 1e-15);
  Tensor y = randn({2, 3, 4}, rng);
  expect_grads_ok([&] { return probe_loss(upsample_nearest(y, 3)); }, {y});
}

TEST(Structural, PermuteConcatBroadcast) {
  Rng rng(17);
  Tensor x = randn({2, 3, 4}, rng);
  Tensor p = permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(permute(p, {1, 2, 0}).values(), x.values());
  EXPECT_EQ(concat({Tensor({1}, 1.0), Tensor({1}, 2.0)}, 0).values(), (std::vector<double>{1, 2}));

  Tensor m = randn({3, 4}, rng), gate({3, 1}, {2, -1, 0.5});
  Tensor s = mul(m, gate);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(s[r * 4 + c], m[r * 4 + c] * gate[r]);

  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3})), DimensionError);
  EXPECT_THROW(permute(x, {0, 0, 1}), DimensionError);
  EXPECT_THROW(reshape(x, {5, 5}), DimensionError);
  EXPECT_THROW(concat({Tensor({2, 3}), Tensor({3, 3})}, 1), DimensionError);
}

TEST(Structural, GradientsMatchFiniteDifferences) {
  Rng rng(18);
  Tensor x = randn({2, 3, 4}, rng), y = randn({2, 1, 4}, rng), z = randn({2, 2, 4}, rng);
  expect_grads_ok([&] { return probe_loss(permute(x, {1, 2, 0})); }, {x});
  expect_grads_ok([&] { return probe_loss(concat({x, z}, 1)); }, {x, z});
  expect_grads_ok([&] { return probe_loss(mul(x, y)); }, {x, y});
  expect_grads_ok([&] { return probe_loss(add(x, y)); }, {x, y});
  expect_grads_ok([&] { return probe_loss(sub(y, x)); }, {x, y});
  expect_grads_ok([&] { return probe_loss(slice(x, 2, 1, 2)); }, {x});
  expect_grads_ok([&] { return probe_loss(reshape(x, {6, 4})); }, {x});
  expect_grads_ok([&] { return probe_loss(sum(x, 1)); }, {x});
}

TEST(Backward, SimpleLosses) {
  Rng rng(19);
  Tensor x = randn({4}, rng);
  x.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum_all(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum_all(mul(x, x)));
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
  // accumulative semantics
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum_all(mul(x, x)));
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4 * x[i]);
}

TEST(Backward, Errors) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = mul(x, x);
  EXPECT_THROW(tape.backward(y), UsageError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), UsageError);
}

TEST(Backward, TapeIsTopologicalAndVisitedOnce) {
  Rng rng(20);
  Tensor a = randn({3}, rng), b = randn({3}, rng);
  a.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor c = mul(a, b);
  Tensor d = sigmoid(c);
  Tensor loss = sum_all(add(d, c));
  const auto& recs = tape.records();
  ASSERT_EQ(recs.size(), 4u);
  // every input produced on the tape appears earlier than its consumer
  for (std::size_t i = 0; i < recs.size(); ++i)
    for (const Tensor& in : recs[i].inputs)
      for (std::size_t j = i; j < recs.size(); ++j) EXPECT_NE(recs[j].output.id(), in.id());
  EXPECT_TRUE(tape.depends_on(loss, a));
  EXPECT_FALSE(tape.depends_on(c, d));
  tape.backward(loss);
  EXPECT_EQ(tape.last_backward_visits(), 4u);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(FiniteDiff, KnownDerivatives) {
  Rng rng(21);
  Tensor x = randn({5}, rng);
  auto sum_f = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v;
    return s;
  };
  Tensor ones = finite_diff_grad(sum_f, x);
  for (double g : ones.data()) EXPECT_NEAR(g, 1.0, 1e-9);
  Tensor three = Tensor::scalar(3.0);
  double d = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, three, 1e-5)[0];
  EXPECT_NEAR(d, 6.0, 1e-6);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  auto run = [] {
    Rng rng(22);
    Tensor x = randn({2, 3, 8}, rng), w = randn({4, 3, 3}, rng);
    return softmax(conv1d(x, w, {}, {1, 1, 1}), 2).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Finiteness, ForwardOpsStayFinite) {
  Rng rng(23);
  Tensor x = randn({2, 4, 6}, rng, 50.0);
  Tensor rm({4}, 0.0), rv({4}, 1.0);
  std::vector<Tensor> outs{sigmoid(x), tanh(x), softmax(x, 2), relu(x),
                           batchnorm(x, Tensor({4}, 1.0), Tensor({4}, 0.0), rm, rv, true),
                           layernorm(x, Tensor({6}, 1.0), Tensor({6}, 0.0))};
  for (const Tensor& t : outs)
    for (double v : t.data()) EXPECT_TRUE(std::isfinite(v));
}
