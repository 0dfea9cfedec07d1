#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>

#include "pvec/ops.hpp"

namespace pvec {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

/// Per-forward settings shared by every module.
struct Context {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // dropout masks; unused in eval mode
  bool training() const { return mode == Mode::train; }
};

enum class Slot { trainable, buffer };

/// Visitor over a module's named tensors (parameters and BN running stats).
using TensorVisitor = std::function<void(const std::string& name, Tensor& tensor, Slot slot)>;

inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.values()) v = u(rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor param_fill(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

struct Conv1d {
  Tensor weight, bias;
  Conv1dOptions options;

  Conv1d() = default;
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, Conv1dOptions opt = {})
      : options(opt) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
    weight = uniform_init({out, in, kernel}, bound, rng);
    bias = uniform_init({out}, bound, rng);
  }

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const { return conv1d(x, weight, bias, options); }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + "weight", weight, Slot::trainable);
    v(prefix + "bias", bias, Slot::trainable);
  }
};

struct Conv2d {
  Tensor weight, bias;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t pad, Rng& rng)
      : padding(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = uniform_init({out, in, kernel, kernel}, bound, rng);
    bias = uniform_init({out}, bound, rng);
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, padding); }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + "weight", weight, Slot::trainable);
    v(prefix + "bias", bias, Slot::trainable);
  }
};

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_init({out, in}, bound, rng);
    bias = uniform_init({out}, bound, rng);
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + "weight", weight, Slot::trainable);
    v(prefix + "bias", bias, Slot::trainable);
  }
};

/// 1-D batch normalization over axis 1; running stats start at mean 0 / var 1.
struct BatchNorm1d {
  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.1;

  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t channels)
      : gamma(param_fill({channels}, 1.0)),
        beta(param_fill({channels}, 0.0)),
        running_mean(Shape{channels}, 0.0),
        running_var(Shape{channels}, 1.0) {}

  Tensor operator()(const Tensor& x, const Context& ctx) {
    return batchnorm(x, gamma, beta, running_mean, running_var, ctx.training(), momentum);
  }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + "gamma", gamma, Slot::trainable);
    v(prefix + "beta", beta, Slot::trainable);
    v(prefix + "running_mean", running_mean, Slot::buffer);
    v(prefix + "running_var", running_var, Slot::buffer);
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma(param_fill({dim}, 1.0)), beta(param_fill({dim}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    v(prefix + "gamma", gamma, Slot::trainable);
    v(prefix + "beta", beta, Slot::trainable);
  }
};

/// conv -> ReLU -> BN, the frame-level unit used throughout the TDNN branch.
struct TdnnUnit {
  Conv1d conv;
  BatchNorm1d bn;

  TdnnUnit() = default;
  TdnnUnit(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng)
      : conv(in, out, kernel, rng, {1, dilation, dilation * (kernel - 1) / 2}), bn(out) {}

  Tensor operator()(const Tensor& x, const Context& ctx) { return bn(relu(conv(x)), ctx); }

  void visit(const std::string& prefix, const TensorVisitor& v) {
    conv.visit(prefix + "conv.", v);
    bn.visit(prefix + "bn.", v);
  }
};

/// Counts trainable scalars reachable through `visit`.
template <class Module>
std::size_t count_trainable(Module& m, const std::string& prefix = "") {
  std::size_t n = 0;
  m.visit(prefix, [&](const std::string&, Tensor& t, Slot s) {
    if (s == Slot::trainable) n += t.numel();
  });
  return n;
}

} // namespace pvec
