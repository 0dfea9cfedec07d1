#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "pvec/gradcheck.hpp"
#include "pvec/model.hpp"
#include "pvec/training.hpp"

namespace pvec {

// Finite-difference suite behind `pvec gradcheck`: every op on its own, each
// module, then the composed toy p-vectors model on sampled parameters.

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
  double tolerance = 0;
  bool passed = false;
};

struct GradSuiteResult {
  std::vector<GradSuiteEntry> entries;
  double seconds = 0;

  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return !entries.empty();
  }
  const GradSuiteEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline constexpr double kOpGradTol = 1e-6;
inline constexpr double kModuleGradTol = 1e-3;

namespace detail {

inline Tensor gauss(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// Weighted sum against a fixed random tensor of the same shape.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum_all(mul(y, gauss(y.shape(), rng)));
}

template <class Module>
std::vector<Tensor> trainable_of(Module& m, const std::string& skip = "") {
  std::vector<Tensor> out;
  m.visit("", [&](const std::string& name, Tensor& t, Slot s) {
    if (s == Slot::trainable && name != skip) out.push_back(t);
  });
  return out;
}

} // namespace detail

class GradSuite {
public:
  explicit GradSuite(std::ostream* log = nullptr) : log_(log) {}

  GradSuiteResult run(bool include_full = true) {
    const auto t0 = std::chrono::steady_clock::now();
    ops();
    modules();
    if (include_full) full_model();
    res_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res_;
  }

  /// Composed toy p-vectors, train mode, AM-softmax loss, h = 1e-4.
  GradSuiteEntry full_model(std::size_t samples = 120) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.dropout = 0.0;
    PVectors m(cfg, 5);
    Rng rng(6);
    ClassifierHead head(cfg.embed_dim, 4, rng);
    Tensor x = detail::gauss({2, cfg.mels, 16}, rng);
    const std::vector<std::size_t> labels{1, 3};
    const Context train{Mode::train, nullptr};
    std::vector<Tensor> leaves = detail::trainable_of(m);
    leaves.push_back(head.weight);
    return record("pvectors.toy", kModuleGradTol,
                  check_gradients([&] { return am_softmax_loss(m.forward(x, train).embedding, head.weight, labels); },
                                  leaves, {1e-4, 1e-6, samples, 7, true}));
  }

private:
  std::ostream* log_;
  GradSuiteResult res_;
  Rng rng_{2024};

  const GradSuiteEntry& record(std::string name, double tol, GradCheckReport rep) {
    GradSuiteEntry e{std::move(name), std::move(rep), tol, false};
    e.passed = e.report.checked > 0 && e.report.max_rel_error <= tol;
    if (log_) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%-24s %s  checked %5zu  kinks %4zu  max_rel %.3e\n", e.name.c_str(),
                    e.passed ? "ok  " : "FAIL", e.report.checked, e.report.kinks_skipped, e.report.max_rel_error);
      *log_ << buf << std::flush;
    }
    res_.entries.push_back(std::move(e));
    return res_.entries.back();
  }

  void op(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> leaves, bool kinks = false) {
    record("op." + name, kOpGradTol, check_gradients([&] { return detail::project(f()); }, std::move(leaves),
                                                     {1e-5, 1e-6, 0, 0, kinks}));
  }

  Tensor rand(Shape s, double sd = 1.0) { return detail::gauss(std::move(s), rng_, sd); }

  void ops() {
    Tensor a = rand({3, 4}), b = rand({4, 2}), p = rand({2, 3, 4}), q = rand({2, 4, 5});
    op("matmul", [&] { return matmul(a, b); }, {a, b});
    op("matmul.batched", [&] { return matmul(p, q); }, {p, q});
    Tensor w = rand({5, 4}), bias = rand({5});
    op("linear", [&] { return linear(p, w, bias); }, {p, w, bias});

    Tensor x = rand({2, 3, 9}), cw = rand({4, 3, 3}), cb = rand({4});
    op("conv1d", [&] { return conv1d(x, cw, cb, {1, 1, 1}); }, {x, cw, cb});
    op("conv1d.stride2", [&] { return conv1d(x, cw, cb, {2, 1, 1}); }, {x, cw, cb});
    op("conv1d.dilated", [&] { return conv1d(x, cw, cb, {1, 3, 3}); }, {x, cw, cb});
    Tensor x2 = rand({2, 2, 4, 5}), w2 = rand({3, 2, 3, 3}), b2 = rand({3});
    op("conv2d", [&] { return conv2d(x2, w2, b2, 1); }, {x2, w2, b2});

    Tensor s = rand({3, 5}), pos = rand({3, 5});
    for (double& v : pos.values()) v = std::abs(v) + 0.5;
    op("sigmoid", [&] { return sigmoid(s); }, {s});
    op("tanh", [&] { return tanh(s); }, {s});
    op("exp", [&] { return exp(s); }, {s});
    op("log", [&] { return log(pos); }, {pos});
    op("sqrt", [&] { return sqrt(pos); }, {pos});
    op("square", [&] { return square(s); }, {s});
    op("div", [&] { return div(s, pos); }, {s, pos});
    op("scale", [&] { return add_scalar(scale(s, -2.5), 0.3); }, {s});
    op("relu", [&] { return relu(s); }, {s}, true);
    op("clamp_min", [&] { return clamp_min(s, 0.1); }, {s}, true);
    op("softmax.rows", [&] { return softmax(s, 1); }, {s});
    op("softmax.cols", [&] { return softmax(s, 0); }, {s});

    Tensor bx = rand({3, 4, 5}), gam = rand({4}), bet = rand({4});
    Tensor rm({4}, 0.0), rv({4}, 1.0), rm2({4}, 0.3), rv2({4}, 2.0);
    op("batchnorm.train", [&] { return batchnorm(bx, gam, bet, rm, rv, true); }, {bx, gam, bet});
    op("batchnorm.eval", [&] { return batchnorm(bx, gam, bet, rm2, rv2, false); }, {bx, gam, bet});
    Tensor lx = rand({2, 3, 6}), lg = rand({6}), lb = rand({6});
    op("layernorm", [&] { return layernorm(lx, lg, lb); }, {lx, lg, lb});

    Tensor px = rand({2, 3, 5}), py = rand({2, 1, 5}), pz = rand({2, 2, 5});
    op("sum", [&] { return sum(px, 1); }, {px});
    op("mean", [&] { return mean(px, 2, true); }, {px});
    op("max", [&] { return max(px, 2); }, {px}, true);
    op("pool.mean", [&] { return pool(px, 2, PoolKind::mean); }, {px});
    op("pool.max", [&] { return pool(px, 1, PoolKind::max); }, {px}, true);
    op("broadcast", [&] { return add(mul(px, py), sub(py, px)); }, {px, py});
    op("permute", [&] { return permute(px, {1, 2, 0}); }, {px});
    op("concat", [&] { return concat({px, pz}, 1); }, {px, pz});
    op("slice", [&] { return slice(px, 2, 1, 3); }, {px});
    op("reshape", [&] { return reshape(px, {6, 5}); }, {px});
    op("upsample", [&] { return upsample_nearest(px, 3); }, {px});

    Tensor logits = rand({4, 6});
    op("cross_entropy", [&] { return cross_entropy(logits, {0, 5, 2, 2}); }, {logits});
    Tensor emb = rand({3, 5}), W = rand({5, 4});
    op("am_softmax", [&] { return am_softmax_loss(emb, W, {1, 0, 3}); }, {emb, W});
  }

  template <class Module, class Forward>
  void module(const std::string& name, Module& m, const Tensor& x, Forward&& f, const std::string& skip = "",
              bool kinks = false) {
    std::vector<Tensor> leaves = detail::trainable_of(m, skip);
    leaves.push_back(x);
    record("module." + name, kModuleGradTol,
           check_gradients([&] { return detail::project(f()); }, leaves, {1e-5, 1e-6, 400, 3, kinks}));
  }

  void modules() {
    const Context train{Mode::train, nullptr};
    Sfa sfa(12, 2, rng_);
    Tensor xs = rand({2, 12, 6});
    module("sfa", sfa, xs, [&] { return sfa.forward(xs).features; });

    SeRes2Block blk(16, 4, 2, 8, rng_);
    Tensor xb = rand({2, 16, 7});
    module("se_res2block", blk, xb, [&] { return blk(xb, train); }, "", true);

    AttentiveStatsPool asp(8, 4, rng_);
    Tensor xa = rand({2, 8, 6});
    module("asp", asp, xa, [&] { return asp(xa); }, "", true);

    // the key bias shifts a whole softmax row, so its true gradient is zero
    EncoderLayer enc(8, 2, 16, 0.0, rng_);
    Tensor xe = rand({2, 5, 8});
    module("encoder_layer", enc, xe, [&] { return enc(xe, train); }, "attn.k.bias");

    Fsb1 f1("fsb1a", 16, 8, 0.0, rng_);
    Tensor x1 = rand({2, 16, 8});
    module("fsb1", f1, x1, [&] { return f1(x1, train); });
    Fsb2 f2("fsb2a", 8, 16, 2, 0.0, rng_);
    Tensor x2 = rand({2, 4, 8});
    module("fsb2", f2, x2, [&] { return f2(x2, train); });

    Eal eal(6, rng_);
    Tensor e1 = rand({3, 6}), e2 = rand({3, 6});
    std::vector<Tensor> leaves = detail::trainable_of(eal);
    leaves.push_back(e1);
    leaves.push_back(e2);
    record("module.eal", kModuleGradTol,
           check_gradients([&] { return detail::project(eal(e1, e2, train)); }, leaves, {1e-5, 1e-6, 0, 0, false}));
  }
};

} // namespace pvec
