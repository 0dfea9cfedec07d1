#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pvec/tensor.hpp"

// Differentiable operations over pvec::Tensor. Each op computes its forward
// value eagerly and, when a tape is active and an input requires gradients,
// records a closure that accumulates input gradients from the output gradient.

namespace pvec {

namespace detail {

// C = alpha * op(A) op(B) + beta * C, row-major.
inline void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, double alpha, const double* A,
                 std::size_t lda, const double* B, std::size_t ldb, double beta, double* C, std::size_t ldc) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
  CMap a(A, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  CMap b(B, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  Eigen::Map<Mat, 0, Eigen::OuterStride<>> c(C, m, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  if (beta == 0.0) c.setZero();
  else if (beta != 1.0) c *= beta;
  auto run = [&](const auto& x, const auto& y) { c.noalias() += alpha * x * y; };
  if (ta && tb) run(a.transpose(), b.transpose());
  else if (ta) run(a.transpose(), b);
  else if (tb) run(a, b.transpose());
  else run(a, b);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(x.shape()));
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Singleton-axis broadcasting only; ranks must match.
inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  }
  BroadcastPlan p;
  p.out.resize(a.size());
  auto sa = strides_of(a), sb = strides_of(b);
  p.stride_a.resize(a.size());
  p.stride_b.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " vs " +
                           to_string(b));
    }
    p.out[i] = std::max(a[i], b[i]);
    p.stride_a[i] = a[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = b[i] == 1 ? 0 : sb[i];
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t rank = p.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = p.out[rank - 1];
  const std::size_t sa_in = p.stride_a[rank - 1], sb_in = p.stride_b[rank - 1];
  const std::size_t outer = numel_of(p.out) / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0, o = 0;
  for (std::size_t r = 0; r < outer; ++r) {
    std::size_t ia = oa, ib = ob;
    for (std::size_t j = 0; j < inner; ++j, ++o, ia += sa_in, ib += sb_in) f(o, ia, ib);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += p.stride_a[d];
      ob += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      oa -= p.stride_a[d] * p.out[d];
      ob -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    record(op, {a, b}, out, [a, b, out, ga, gb]() mutable {
      auto g = out.grad();
      auto av = a.data(), bv = b.data();
      if (a.requires_grad()) {
        auto gav = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gav[i] += ga(g[i], av[i], bv[i]);
      }
      if (b.requires_grad()) {
        auto gbv = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gbv[i] += gb(g[i], av[i], bv[i]);
      }
    });
    return out;
  }
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), op);
  Tensor out(plan.out);
  {
    auto av = a.data(), bv = b.data();
    auto ov = out.data();
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      ov[o] = fwd(av[ia], bv[ib]);
    });
  }
  record(op, {a, b}, out, [a, b, out, plan, ga, gb]() mutable {
    auto g = out.grad();
    auto av = a.data(), bv = b.data();
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    std::span<double> gav, gbv;
    if (need_a) gav = a.grad();
    if (need_b) gbv = b.grad();
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (need_a) gav[ia] += ga(g[o], av[ia], bv[ib]);
      if (need_b) gbv[ib] += gb(g[o], av[ia], bv[ib]);
    });
  });
  return out;
}

// y = f(x); dx = g * d(x, y)
template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  record(op, {x}, out, [x, out, deriv]() mutable {
    auto g = out.grad();
    auto xv = x.data();
    auto yv = out.data();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
  return out;
}

inline double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

namespace detail {
inline void note_branches(const Tensor& x, double at) {
  if (BranchTrace* bt = BranchTrace::active())
    for (double v : x.data()) bt->mix(v > at);
}
} // namespace detail

inline Tensor relu(const Tensor& x) {
  detail::note_branches(x, 0.0);
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// max(x, lo); gradient is zero where the floor is active.
inline Tensor clamp_min(const Tensor& x, double lo) {
  detail::note_branches(x, lo);
  return detail::unary(
      "clamp_min", x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

/// Inverted dropout with a sampled keep-mask.
inline Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  Tensor mask(x.shape());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (double& m : mask.values()) m = keep(rng) ? s : 0.0;
  return mul(x, mask);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::record("sum_all", {x}, out, [x, out]() mutable {
    const double g = out.grad()[0];
    for (double& gx : x.grad()) gx += g;
  });
  return out;
}

inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis(x, axis, "sum");
  auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim) os[axis] = 1;
  else os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  Tensor out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const double* src = &xv[(o * sp.n + k) * sp.inner];
      double* dst = &ov[o * sp.inner];
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  detail::record("sum", {x}, out, [x, out, sp]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k) {
        double* dst = &gx[(o * sp.n + k) * sp.inner];
        const double* src = &g[o * sp.inner];
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
  return out;
}

inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis(x, axis, "mean");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

/// Max along an axis. Gradient goes to the first maximal index.
inline Tensor max(const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis(x, axis, "max");
  auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim) os[axis] = 1;
  else os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os = {1};
  Tensor out(os);
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = xv[o * sp.n * sp.inner + i];
      for (std::size_t k = 1; k < sp.n; ++k) {
        double v = xv[(o * sp.n + k) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      ov[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
    }
  if (BranchTrace* bt = BranchTrace::active())
    for (std::size_t a : arg) bt->mix(a);
  detail::record("max", {x}, out, [x, out, sp, arg]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i)
        gx[(o * sp.n + arg[o * sp.inner + i]) * sp.inner + i] += g[o * sp.inner + i];
  });
  return out;
}

enum class PoolKind { mean, max };

/// Global pooling that removes `axis`.
inline Tensor pool(const Tensor& x, std::size_t axis, PoolKind kind) {
  return kind == PoolKind::mean ? mean(x, axis) : max(x, axis);
}

// ---------------------------------------------------------------------------
// Softmax and classification loss

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_axis(x, axis, "softmax");
  auto sp = detail::split_at(x.shape(), axis);
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) m = std::max(m, xv[base + k * sp.inner]);
      double z = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        double e = std::exp(xv[base + k * sp.inner] - m);
        ov[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) ov[base + k * sp.inner] /= z;
    }
  detail::record("softmax", {x}, out, [x, out, sp]() mutable {
    auto g = out.grad();
    auto y = out.data();
    auto gx = x.grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
  });
  return out;
}

/// Mean softmax cross-entropy of logits [B x N] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), N = logits.dim(1);
  auto lv = logits.data();
  std::vector<double> prob(B * N);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= N) {
      throw InputError("cross_entropy: label " + std::to_string(labels[b]) + " out of range [0, " +
                       std::to_string(N) + ")");
    }
    const double* row = &lv[b * N];
    double m = *std::max_element(row, row + N);
    double z = 0;
    for (std::size_t j = 0; j < N; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    total += lse - row[labels[b]];
    for (std::size_t j = 0; j < N; ++j) prob[b * N + j] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  detail::record("cross_entropy", {logits}, out, [logits, out, prob, labels, B, N]() mutable {
    const double g = out.grad()[0] / static_cast<double>(B);
    auto gl = logits.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < N; ++j)
        gl[b * N + j] += g * (prob[b * N + j] - (j == labels[b] ? 1.0 : 0.0));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M x K] * [K x N], or batched [B x M x K] * [B x K x N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw DimensionError("matmul: unsupported ranks " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const std::size_t B = batched ? a.dim(0) : 1;
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t K2 = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  if (K != K2 || (batched && b.dim(0) != B)) {
    throw DimensionError("matmul: shape mismatch " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Tensor out(batched ? Shape{B, M, N} : Shape{M, N});
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t z = 0; z < B; ++z)
    detail::gemm(false, false, M, N, K, 1.0, &av[z * M * K], K, &bv[z * K * N], N, 0.0, &ov[z * M * N], N);
  detail::record("matmul", {a, b}, out, [a, b, out, B, M, K, N]() mutable {
    auto g = out.grad();
    auto av = a.data(), bv = b.data();
    for (std::size_t z = 0; z < B; ++z) {
      const double* G = &g[z * M * N];
      if (a.requires_grad()) detail::gemm(false, true, M, K, N, 1.0, G, N, &bv[z * K * N], N, 1.0, &a.grad()[z * M * K], K);
      if (b.requires_grad()) detail::gemm(true, false, K, N, M, 1.0, &av[z * M * K], K, G, N, 1.0, &b.grad()[z * K * N], N);
    }
  });
  return out;
}

/// y = x W^T + bias over the last axis. x: [..., in], W: [out x in], bias: [out] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(1) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " weight " +
                         to_string(w.shape()));
  }
  const std::size_t in = w.dim(1), outd = w.dim(0), rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = outd;
  Tensor out(os);
  auto xv = x.data(), wv = w.data();
  auto ov = out.data();
  if (bias.defined())
    for (std::size_t n = 0; n < rows; ++n) std::copy_n(bias.data().begin(), outd, &ov[n * outd]);
  detail::gemm(false, true, rows, outd, in, 1.0, xv.data(), in, wv.data(), in, bias.defined() ? 1.0 : 0.0, ov.data(), outd);
  detail::record("linear", {x, w, bias}, out, [x, w, bias, out, in, outd, rows]() mutable {
    auto g = out.grad();
    auto xv = x.data(), wv = w.data();
    if (x.requires_grad()) detail::gemm(false, false, rows, in, outd, 1.0, g.data(), outd, wv.data(), in, 1.0, x.grad().data(), in);
    if (w.requires_grad()) detail::gemm(true, false, outd, in, rows, 1.0, g.data(), outd, xv.data(), in, 1.0, w.grad().data(), in);
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t n = 0; n < rows; ++n)
        for (std::size_t o = 0; o < outd; ++o) gb[o] += g[n * outd + o];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), x.values());
  detail::record("reshape", {x}, out, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool ok = order.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = order[i] < r && !seen[order[i]];
    if (ok) seen[order[i]] = true;
  }
  if (!ok) throw DimensionError("permute: invalid axis order for shape " + to_string(x.shape()));
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(order[i]);
  auto in_strides = detail::strides_of(x.shape());
  // src stride for each output axis
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[order[i]];
  std::vector<std::size_t> map(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < map.size(); ++o) {
      map[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < os[d]) break;
        off -= src_stride[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  Tensor out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < map.size(); ++o) ov[o] = xv[map[o]];
  detail::record("permute", {x}, out, [x, out, map]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += g[o];
  });
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  detail::check_axis(parts[0], axis, "concat");
  Shape os = ref;
  os[axis] = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = i == axis || p.dim(i) == ref[i];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(p.shape()) + " incompatible with " +
                           to_string(ref) + " along axis " + std::to_string(axis));
    }
    os[axis] += p.dim(axis);
  }
  Tensor out(os);
  auto sp = detail::split_at(os, axis);
  auto ov = out.data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis) * sp.inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&pv[o * len], len, &ov[o * sp.n * sp.inner + offset]);
    offset += len;
  }
  std::vector<Tensor> inputs = parts;
  detail::record("concat", inputs, out, [parts, out, sp]() mutable {
    auto g = out.grad();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      const std::size_t len = p.numel() / sp.outer;
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += g[o * sp.n * sp.inner + offset + i];
      }
      offset += len;
    }
  });
  return out;
}

/// Contiguous range [start, start+len) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  detail::check_axis(x, axis, "slice");
  if (len == 0 || start + len > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for " + to_string(x.shape()));
  }
  auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = len;
  Tensor out(os);
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t chunk = len * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(&xv[(o * sp.n + start) * sp.inner], chunk, &ov[o * chunk]);
  detail::record("slice", {x}, out, [x, out, sp, start, chunk]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < chunk; ++i) gx[(o * sp.n + start) * sp.inner + i] += g[o * chunk + i];
  });
  return out;
}

/// Repeats each step along the last axis `factor` times.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (factor == 0) throw DimensionError("upsample_nearest: factor must be >= 1");
  if (factor == 1) return x;
  const std::size_t T = x.dim(x.rank() - 1), rows = x.numel() / T;
  Shape os = x.shape();
  os.back() = T * factor;
  Tensor out(os);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < factor; ++f) ov[(r * T + t) * factor + f] = xv[r * T + t];
  detail::record("upsample_nearest", {x}, out, [x, out, rows, T, factor]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < factor; ++f) gx[r * T + t] += g[(r * T + t) * factor + f];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding)

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_length(std::size_t T, std::size_t K, const Conv1dOptions& o) {
  const long long num = static_cast<long long>(T) + 2LL * static_cast<long long>(o.padding) -
                        static_cast<long long>(o.dilation) * (static_cast<long long>(K) - 1) - 1;
  if (num < 0) return 0;
  return static_cast<std::size_t>(num) / o.stride + 1;
}

/// x: [B x Cin x T] (or [Cin x T]), w: [Cout x Cin x K], bias: [Cout] or undefined.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv1dOptions opt = {}) {
  if (x.rank() == 2) {
    Tensor y = conv1d(reshape(x, {1, x.dim(0), x.dim(1)}), w, bias, opt);
    return reshape(y, {y.dim(1), y.dim(2)});
  }
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))) {
    throw DimensionError("conv1d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  }
  if (opt.stride == 0 || opt.dilation == 0) throw DimensionError("conv1d: stride and dilation must be >= 1");
  const std::size_t B = x.dim(0), Cin = x.dim(1), T = x.dim(2), Cout = w.dim(0), K = w.dim(2);
  const std::size_t To = conv_output_length(T, K, opt);
  if (To == 0) {
    throw DimensionError("conv1d: nonpositive output length for T=" + std::to_string(T) +
                         ", K=" + std::to_string(K));
  }
  const long long pad = static_cast<long long>(opt.padding);
  const std::size_t st = opt.stride, dil = opt.dilation;
  // valid output range for tap k: 0 <= t*st + k*dil - pad < T
  auto range = [=](std::size_t k) {
    const long long off = static_cast<long long>(k * dil) - pad;
    long long lo = off >= 0 ? 0 : (-off + static_cast<long long>(st) - 1) / static_cast<long long>(st);
    long long hi_num = static_cast<long long>(T) - 1 - off;
    long long hi = hi_num < 0 ? -1 : hi_num / static_cast<long long>(st);
    hi = std::min<long long>(hi, static_cast<long long>(To) - 1);
    return std::tuple<long long, long long, long long>{lo, hi, off};
  };
  if (st == 1) {
    // one GEMM per tap over the valid output columns; weights repacked to [K x Cout x Cin]
    std::vector<double> wk(K * Cout * Cin);
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t k = 0; k < K; ++k) wk[(k * Cout + co) * Cin + ci] = w[(co * Cin + ci) * K + k];
    Tensor out({B, Cout, To});
    auto xv = x.data();
    auto ov = out.data();
    for (std::size_t b = 0; b < B; ++b) {
      double* ob = &ov[b * Cout * To];
      if (bias.defined())
        for (std::size_t co = 0; co < Cout; ++co) std::fill_n(ob + co * To, To, bias[co]);
      for (std::size_t k = 0; k < K; ++k) {
        auto [lo, hi, off] = range(k);
        if (hi < lo) continue;
        detail::gemm(false, false, Cout, static_cast<std::size_t>(hi - lo + 1), Cin, 1.0, &wk[k * Cout * Cin], Cin,
                     &xv[b * Cin * T + static_cast<std::size_t>(lo + off)], T, 1.0, ob + lo, To);
      }
    }
    detail::record("conv1d", {x, w, bias}, out, [=, wk = std::move(wk)]() mutable {
      auto g = out.grad();
      auto xv = x.data();
      const bool nx = x.requires_grad(), nw = w.requires_grad(), nb = bias.defined() && bias.requires_grad();
      std::vector<double> gwk(nw ? K * Cout * Cin : 0, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const double* gb = &g[b * Cout * To];
        if (nb) {
          auto gbias = bias.grad();
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t t = 0; t < To; ++t) gbias[co] += gb[co * To + t];
        }
        for (std::size_t k = 0; k < K; ++k) {
          auto [lo, hi, off] = range(k);
          if (hi < lo) continue;
          const auto n = static_cast<std::size_t>(hi - lo + 1);
          const std::size_t xo = b * Cin * T + static_cast<std::size_t>(lo + off);
          if (nw) detail::gemm(false, true, Cout, Cin, n, 1.0, gb + lo, To, &xv[xo], T, 1.0, &gwk[k * Cout * Cin], Cin);
          if (nx) detail::gemm(true, false, Cin, n, Cout, 1.0, &wk[k * Cout * Cin], Cin, gb + lo, To, 1.0, &x.grad()[xo], T);
        }
      }
      if (nw) {
        auto gw = w.grad();
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t k = 0; k < K; ++k) gw[(co * Cin + ci) * K + k] += gwk[(k * Cout + co) * Cin + ci];
      }
    });
    return out;
  }
  Tensor out({B, Cout, To});
  auto xv = x.data(), wv = w.data();
  auto ov = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co) {
      double* orow = &ov[(b * Cout + co) * To];
      if (bias.defined()) std::fill_n(orow, To, bias[co]);
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* xrow = &xv[(b * Cin + ci) * T];
        for (std::size_t k = 0; k < K; ++k) {
          const double wk = wv[(co * Cin + ci) * K + k];
          auto [lo, hi, off] = range(k);
          if (st == 1) {
            const double* src = xrow + off;
            for (long long t = lo; t <= hi; ++t) orow[t] += wk * src[t];
          } else {
            for (long long t = lo; t <= hi; ++t) orow[t] += wk * xrow[t * static_cast<long long>(st) + off];
          }
        }
      }
    }
  detail::record("conv1d", {x, w, bias}, out, [=]() mutable {
    auto g = out.grad();
    auto xv = x.data(), wv = w.data();
    const bool nx = x.requires_grad(), nw = w.requires_grad(),
               nb = bias.defined() && bias.requires_grad();
    std::span<double> gx, gw, gb;
    if (nx) gx = x.grad();
    if (nw) gw = w.grad();
    if (nb) gb = bias.grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Cout; ++co) {
        const double* grow = &g[(b * Cout + co) * To];
        if (nb) {
          double s = 0;
          for (std::size_t t = 0; t < To; ++t) s += grow[t];
          gb[co] += s;
        }
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const double* xrow = &xv[(b * Cin + ci) * T];
          double* gxrow = nx ? &gx[(b * Cin + ci) * T] : nullptr;
          for (std::size_t k = 0; k < K; ++k) {
            auto [lo, hi, off] = range(k);
            const std::size_t wi = (co * Cin + ci) * K + k;
            const double wk = wv[wi];
            double s = 0;
            for (long long t = lo; t <= hi; ++t) {
              const long long src = t * static_cast<long long>(st) + off;
              s += grow[t] * xrow[src];
              if (nx) gxrow[src] += wk * grow[t];
            }
            if (nw) gw[wi] += s;
          }
        }
      }
  });
  return out;
}

/// Stride-1 2-D cross-correlation. x: [B x Cin x H x W] (or [Cin x H x W]),
/// w: [Cout x Cin x Kh x Kw], bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t padding = 0) {
  if (x.rank() == 3) {
    Tensor y = conv2d(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}), w, bias, padding);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
  }
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0)))) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  }
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const long long p = static_cast<long long>(padding);
  const long long Ho = static_cast<long long>(H) + 2 * p - static_cast<long long>(Kh) + 1;
  const long long Wo = static_cast<long long>(W) + 2 * p - static_cast<long long>(Kw) + 1;
  if (Ho <= 0 || Wo <= 0) throw DimensionError("conv2d: nonpositive output size");
  const std::size_t ho = static_cast<std::size_t>(Ho), wo = static_cast<std::size_t>(Wo);
  auto for_taps = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t kh = 0; kh < Kh; ++kh)
            for (std::size_t kw = 0; kw < Kw; ++kw) {
              const long long dh = static_cast<long long>(kh) - p, dw = static_cast<long long>(kw) - p;
              const long long i0 = std::max(0LL, -dh), i1 = std::min(Ho, static_cast<long long>(H) - dh);
              const long long j0 = std::max(0LL, -dw), j1 = std::min(Wo, static_cast<long long>(W) - dw);
              const std::size_t wi = ((co * Cin + ci) * Kh + kh) * Kw + kw;
              for (long long i = i0; i < i1; ++i)
                for (long long j = j0; j < j1; ++j) {
                  const std::size_t oi = ((b * Cout + co) * ho + static_cast<std::size_t>(i)) * wo +
                                         static_cast<std::size_t>(j);
                  const std::size_t xi = ((b * Cin + ci) * H + static_cast<std::size_t>(i + dh)) * W +
                                         static_cast<std::size_t>(j + dw);
                  fn(oi, xi, wi);
                }
            }
  };
  Tensor out({B, Cout, ho, wo});
  {
    auto xv = x.data(), wv = w.data();
    auto ov = out.data();
    if (bias.defined())
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co)
          std::fill_n(&ov[(b * Cout + co) * ho * wo], ho * wo, bias[co]);
    for_taps([&](std::size_t oi, std::size_t xi, std::size_t wi) { ov[oi] += wv[wi] * xv[xi]; });
  }
  detail::record("conv2d", {x, w, bias}, out, [=]() mutable {
    auto g = out.grad();
    auto xv = x.data(), wv = w.data();
    const bool nx = x.requires_grad(), nw = w.requires_grad(),
               nb = bias.defined() && bias.requires_grad();
    std::span<double> gx, gw, gb;
    if (nx) gx = x.grad();
    if (nw) gw = w.grad();
    if (nb) {
      gb = bias.grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t i = 0; i < ho * wo; ++i) gb[co] += g[(b * Cout + co) * ho * wo + i];
    }
    for_taps([&](std::size_t oi, std::size_t xi, std::size_t wi) {
      if (nx) gx[xi] += wv[wi] * g[oi];
      if (nw) gw[wi] += xv[xi] * g[oi];
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormEps = 1e-5;

/// Batch normalization over axis 1 of [B x C] or [B x C x T]. Training mode
/// uses batch statistics and updates the running estimates in place
/// (momentum 0.1, unbiased variance); eval mode uses the running estimates.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        Tensor& running_mean, Tensor& running_var, bool training,
                        double momentum = 0.1, double eps = kNormEps) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("batchnorm: expected [B x C] or [B x C x T], got " + to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.rank() == 3 ? x.dim(2) : 1;
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("batchnorm: affine params do not match " + std::to_string(C) + " channels");
  }
  if (!training && (!running_mean.defined() || !running_var.defined())) {
    throw StateError("batchnorm: eval mode requires populated running statistics");
  }
  if (running_mean.defined() && (running_mean.numel() != C || running_var.numel() != C)) {
    throw DimensionError("batchnorm: running statistics do not match channel count");
  }
  const double n = static_cast<double>(B * T);
  auto xv = x.data();
  std::vector<double> mu(C, 0.0), inv_std(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) s += xv[(b * C + c) * T + t];
      const double m = s / n;
      double v = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
          const double d = xv[(b * C + c) * T + t] - m;
          v += d * d;
        }
      v /= n;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + eps);
      if (running_mean.defined()) {
        const double unbiased = n > 1 ? v * n / (n - 1) : v;
        running_mean[c] = (1 - momentum) * running_mean[c] + momentum * m;
        running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
      }
    } else {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  auto ov = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t i = (b * C + c) * T + t;
        xhat[i] = (xv[i] - mu[c]) * inv_std[c];
        ov[i] = xhat[i] * gamma[c] + beta[c];
      }
  detail::record("batchnorm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std, B, C, T, n, training]() mutable {
                   auto g = out.grad();
                   const bool nx = x.requires_grad();
                   std::span<double> gx, gg, gbeta;
                   if (nx) gx = x.grad();
                   if (gamma.requires_grad()) gg = gamma.grad();
                   if (beta.requires_grad()) gbeta = beta.grad();
                   for (std::size_t c = 0; c < C; ++c) {
                     double sg = 0, sgx = 0;
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t t = 0; t < T; ++t) {
                         const std::size_t i = (b * C + c) * T + t;
                         sg += g[i];
                         sgx += g[i] * xhat[i];
                       }
                     if (!gg.empty()) gg[c] += sgx;
                     if (!gbeta.empty()) gbeta[c] += sg;
                     if (!nx) continue;
                     const double k = gamma[c] * inv_std[c];
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t t = 0; t < T; ++t) {
                         const std::size_t i = (b * C + c) * T + t;
                         if (training) gx[i] += k * (g[i] - sg / n - xhat[i] * sgx / n);
                         else gx[i] += k * g[i];
                       }
                   }
                 });
  return out;
}

/// Layer normalization over the last axis.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kNormEps) {
  const std::size_t D = x.dim(x.rank() - 1), rows = x.numel() / D;
  if (gamma.numel() != D || beta.numel() != D) {
    throw DimensionError("layernorm: affine params do not match last axis of " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel()), inv_std(rows);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * D];
    double m = 0;
    for (std::size_t i = 0; i < D; ++i) m += row[i];
    m /= static_cast<double>(D);
    double v = 0;
    for (std::size_t i = 0; i < D; ++i) v += (row[i] - m) * (row[i] - m);
    v /= static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < D; ++i) {
      xhat[r * D + i] = (row[i] - m) * inv_std[r];
      ov[r * D + i] = xhat[r * D + i] * gamma[i] + beta[i];
    }
  }
  detail::record("layernorm", {x, gamma, beta}, out,
                 [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), D, rows]() mutable {
                   auto g = out.grad();
                   const bool nx = x.requires_grad();
                   std::span<double> gx, gg, gbeta;
                   if (nx) gx = x.grad();
                   if (gamma.requires_grad()) gg = gamma.grad();
                   if (beta.requires_grad()) gbeta = beta.grad();
                   const double dn = static_cast<double>(D);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double s1 = 0, s2 = 0;
                     for (std::size_t i = 0; i < D; ++i) {
                       const std::size_t j = r * D + i;
                       const double dxhat = g[j] * gamma[i];
                       s1 += dxhat;
                       s2 += dxhat * xhat[j];
                       if (!gg.empty()) gg[i] += g[j] * xhat[j];
                       if (!gbeta.empty()) gbeta[i] += g[j];
                     }
                     if (!nx) continue;
                     for (std::size_t i = 0; i < D; ++i) {
                       const std::size_t j = r * D + i;
                       const double dxhat = g[j] * gamma[i];
                       gx[j] += inv_std[r] * (dxhat - s1 / dn - xhat[j] * s2 / dn);
                     }
                   }
                 });
  return out;
}

} // namespace pvec
