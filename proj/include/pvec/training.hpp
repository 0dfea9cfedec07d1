#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "pvec/metrics.hpp"
#include "pvec/model.hpp"

namespace pvec {

// ---------------------------------------------------------------------------
// Loss

struct AmConfig {
  double margin = 0.2;
  double scale = 30.0;
};

/// Rows of [B x D] scaled to unit L2 norm.
inline Tensor l2_normalize_rows(const Tensor& x) {
  return div(x, sqrt(add_scalar(sum(square(x), 1, true), 1e-24)));
}

/// Cosine logits [B x N] between rows of emb [B x D] and columns of W [D x N].
inline Tensor cosine_logits(const Tensor& emb, const Tensor& W) {
  Tensor wn = div(W, sqrt(add_scalar(sum(square(W), 0, true), 1e-24)));
  return matmul(l2_normalize_rows(emb), wn);
}

/// Additive-margin softmax: s * (cos - m * onehot), mean cross-entropy.
inline Tensor am_softmax_loss(const Tensor& emb, const Tensor& W, const std::vector<std::size_t>& labels,
                              const AmConfig& cfg = {}) {
  if (emb.rank() != 2 || W.rank() != 2 || emb.dim(1) != W.dim(0)) {
    throw DimensionError("am_softmax_loss: embeddings " + to_string(emb.shape()) + " vs weights " +
                         to_string(W.shape()));
  }
  const std::size_t B = emb.dim(0), N = W.dim(1);
  if (labels.size() != B) throw InputError("am_softmax_loss: label count differs from batch size");
  Tensor margin({B, N}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= N) {
      throw InputError("am_softmax_loss: label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(N) + " classes");
    }
    margin[b * N + labels[b]] = cfg.margin;
  }
  return cross_entropy(scale(sub(cosine_logits(emb, W), margin), cfg.scale), labels);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Cyclical LR, triangular2 policy: each cycle a triangle from lr_min up to
/// its peak at half-cycle and back, peak amplitude halving every cycle.
struct Triangular2 {
  double lr_min = 1e-8;
  double lr_max = 1e-3;
  std::size_t cycle_epochs = 6;
  std::size_t steps_per_epoch = 1;

  std::size_t cycle_steps() const { return cycle_epochs * steps_per_epoch; }

  void validate() const {
    if (!(lr_min < lr_max) || lr_min < 0) throw ConfigError("triangular2: need 0 <= lr_min < lr_max");
    if (cycle_steps() == 0 || cycle_steps() % 2 != 0)
      throw ConfigError("triangular2: cycle length in steps must be even and positive, got " +
                        std::to_string(cycle_steps()));
  }

  double operator()(std::size_t step) const {
    validate();
    const std::size_t L = cycle_steps(), half = L / 2;
    const std::size_t c = step / L;
    const double x = static_cast<double>(step - c * L) / static_cast<double>(half);
    const double amp = (lr_max - lr_min) / std::ldexp(1.0, static_cast<int>(std::min<std::size_t>(c, 1000)));
    return lr_min + amp * (1.0 - std::abs(x - 1.0));
  }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

template <class Module>
std::vector<NamedParam> trainable_params(Module& m, const std::string& prefix = "") {
  std::vector<NamedParam> out;
  m.visit(prefix, [&](const std::string& name, Tensor& t, Slot s) {
    if (s == Slot::trainable) out.push_back({name, t});
  });
  return out;
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  OptimizerState state;

  /// One bias-corrected update of every parameter from its accumulated grad.
  void step(std::vector<NamedParam>& params, double lr) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
    for (NamedParam& p : params) {
      auto it = state.moments.find(p.name);
      if (it == state.moments.end())
        it = state.moments.emplace(p.name, std::make_pair(Tensor(p.tensor.shape()), Tensor(p.tensor.shape()))).first;
      Tensor& m = it->second.first;
      Tensor& v = it->second.second;
      if (m.shape() != p.tensor.shape()) throw StateError("adam: moment shape mismatch for " + p.name);
      const bool has = p.tensor.has_grad();
      for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
        const double g = has ? p.tensor.grad()[i] : 0.0;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        p.tensor[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic speakers

struct Utterance {
  std::string id;
  std::size_t speaker = 0;
  FeatureMatrix feat;
};

struct SynthSpec {
  std::size_t speakers = 20;
  std::size_t utterances = 10;  // per speaker
  std::size_t mels = 24;
  std::size_t frames = 100;
  double sigma = 0.3;
};

namespace detail {

// Smooth random curve over mel bins: a few low-frequency cosines.
inline std::vector<double> smooth_curve(std::size_t n, double amp, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  std::vector<double> c(n, 0.0);
  for (int k = 1; k <= 3; ++k) {
    const double a = amp * g(rng) / k, ph = phase(rng);
    for (std::size_t i = 0; i < n; ++i)
      c[i] += a * std::cos(M_PI * k * static_cast<double>(i) / static_cast<double>(n) + ph);
  }
  return c;
}

} // namespace detail

/// Speaker template (envelope + formant bumps) plus, scaled by sigma, a
/// per-utterance channel curve, per-frame loudness and white noise.
/// sigma = 0 makes every utterance of a speaker identical.
inline std::vector<Utterance> gen_synth(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.speakers < 2) throw ConfigError("gen_synth: need at least two speakers");
  if (spec.utterances == 0 || spec.mels == 0 || spec.frames == 0) throw ConfigError("gen_synth: empty spec");
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t F = spec.mels;
  std::vector<std::vector<double>> templates;
  for (std::size_t s = 0; s < spec.speakers; ++s) {
    std::vector<double> t = detail::smooth_curve(F, 1.0, rng);
    for (int k = 0; k < 3; ++k) {
      const double center = u(rng) * static_cast<double>(F), width = 0.8 + 1.5 * u(rng), height = 1.0 + 1.5 * u(rng);
      for (std::size_t i = 0; i < F; ++i)
        t[i] += height * std::exp(-0.5 * std::pow((static_cast<double>(i) - center) / width, 2));
    }
    templates.push_back(std::move(t));
  }
  std::vector<Utterance> out;
  for (std::size_t s = 0; s < spec.speakers; ++s)
    for (std::size_t n = 0; n < spec.utterances; ++n) {
      Utterance utt;
      utt.speaker = s;
      char id[64];
      std::snprintf(id, sizeof id, "spk%03zu-utt%03zu", s, n);
      utt.id = id;
      utt.feat = FeatureMatrix(F, spec.frames);
      const std::vector<double> channel = detail::smooth_curve(F, 1.0, rng);
      double loud = 0.0;
      for (std::size_t t = 0; t < spec.frames; ++t) {
        loud = 0.8 * loud + 0.6 * g(rng);
        for (std::size_t f = 0; f < F; ++f) {
          const double noise = g(rng);
          utt.feat.at(f, t) = static_cast<float>(templates[s][f] + spec.sigma * (channel[f] + loud + noise));
        }
      }
      out.push_back(std::move(utt));
    }
  return out;
}

/// Deterministic split: the last `held_out` utterances of each speaker.
inline void split_held_out(const std::vector<Utterance>& all, std::size_t held_out, std::vector<Utterance>& train,
                           std::vector<Utterance>& test) {
  std::map<std::size_t, std::size_t> total, seen;
  for (const auto& u : all) ++total[u.speaker];
  for (const auto& u : all) {
    if (total[u.speaker] <= held_out) throw ConfigError("split: every speaker needs a training utterance");
    (seen[u.speaker]++ < total[u.speaker] - held_out ? train : test).push_back(u);
  }
}

/// All unordered pairs of test utterances.
inline TrialSet all_pairs_trials(const std::vector<Utterance>& test) {
  TrialSet out;
  for (std::size_t i = 0; i < test.size(); ++i)
    for (std::size_t j = i + 1; j < test.size(); ++j)
      out.push_back({test[i].speaker == test[j].speaker, test[i].id, test[j].id});
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainConfig {
  std::size_t epochs = 24;
  std::size_t batch = 32;
  std::size_t crop = 298;
  double lr_min = 1e-8, lr_max = 1e-3;
  std::size_t cycle_epochs = 6;
  AmConfig am;
  std::uint64_t seed = 1;
  std::ostream* log = nullptr;  // "step\tstage\tlr\tloss"
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per step
};

inline std::size_t class_count(const std::vector<Utterance>& data) {
  std::size_t n = 0;
  for (const auto& u : data) n = std::max(n, u.speaker + 1);
  return n;
}

namespace detail {

struct Batcher {
  const std::vector<Utterance>& data;
  const TrainConfig& tc;
  Rng rng;
  std::vector<std::size_t> order;

  Batcher(const std::vector<Utterance>& d, const TrainConfig& c, std::uint64_t seed) : data(d), tc(c), rng(seed) {
    if (d.empty()) throw InputError("training: empty dataset");
    if (c.batch < 2) throw ConfigError("training: batch must be >= 2 for batch normalization");
    order.resize(d.size());
    std::iota(order.begin(), order.end(), 0);
  }

  std::size_t steps_per_epoch() const { return std::max<std::size_t>(1, data.size() / tc.batch); }

  void shuffle() { std::shuffle(order.begin(), order.end(), rng); }

  std::pair<Tensor, std::vector<std::size_t>> batch(std::size_t k) {
    std::vector<FeatureMatrix> feats;
    std::vector<std::size_t> labels;
    const std::size_t n = std::min(tc.batch, data.size());
    for (std::size_t i = 0; i < n; ++i) {
      const Utterance& u = data[order[(k * n + i) % order.size()]];
      feats.push_back(crop_segment(u.feat, tc.crop, rng));
      labels.push_back(u.speaker);
    }
    return {to_batch(feats), labels};
  }
};

inline void log_step(const TrainConfig& tc, std::size_t step, const char* stage, double lr, double loss) {
  if (!tc.log) return;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6e\t%.6f\n", step, stage, lr, loss);
  *tc.log << buf;
}

inline void check_finite(double loss, std::size_t step, const char* stage) {
  if (!std::isfinite(loss))
    throw NumericError(std::string("training diverged: stage ") + stage + " step " + std::to_string(step) +
                       " produced a non-finite loss");
}

/// One optimization step of `forward` (returning a scalar loss) over `params`.
template <class Forward>
double train_step(Forward&& forward, std::vector<NamedParam>& params, Adam& adam, double lr) {
  for (NamedParam& p : params) p.tensor.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = forward();
  const double value = loss.item();
  if (std::isfinite(value)) {
    tape.backward(loss);
    adam.step(params, lr);
  }
  return value;
}

} // namespace detail

/// Stage 1: one standalone branch with its own AM-softmax head.
inline TrainResult train_stage1(BranchKind kind, const ModelConfig& cfg, const std::vector<Utterance>& data,
                                const TrainConfig& tc) {
  const char* stage = kind == BranchKind::tdnn ? "1td" : "1tr";
  StandaloneModel model(kind, cfg, class_count(data), tc.seed);
  detail::Batcher batches(data, tc, tc.seed ^ 0x9e3779b97f4a7c15ULL);
  Triangular2 sched{tc.lr_min, tc.lr_max, tc.cycle_epochs, batches.steps_per_epoch()};
  sched.validate();
  auto params = trainable_params(model);
  Adam adam;
  Rng drop_rng(tc.seed + 17);
  Context ctx{Mode::train, &drop_rng};
  TrainResult res;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    batches.shuffle();
    for (std::size_t k = 0; k < batches.steps_per_epoch(); ++k, ++step) {
      auto [x, labels] = batches.batch(k);
      const double lr = sched(step);
      const double loss = detail::train_step(
          [&] { return am_softmax_loss(model.forward(x, ctx).embedding, model.head.weight, labels, tc.am); }, params,
          adam, lr);
      detail::log_step(tc, step, stage, lr, loss);
      detail::check_finite(loss, step, stage);
      model.head.normalize_columns();
      res.losses.push_back(loss);
    }
  }
  res.checkpoint.stage = 1;
  res.checkpoint.epoch = static_cast<std::uint32_t>(tc.epochs);
  res.checkpoint.step = step;
  res.checkpoint.meta = config_meta(cfg);
  res.checkpoint.meta["branch"] = branch_label(kind);
  res.checkpoint.tensors = state_of(model);
  res.checkpoint.optimizer = adam.state;
  return res;
}

struct Stage2Result {
  TrainResult train;
  double initial_loss = 0;
  std::vector<double> gate_shift;  // ||V - V0||_2 per bridge: fsb1a, fsb1b, fsb2a, fsb2b
};

/// Stage 2: transfer both branches, attach one head on the EAL output and
/// train every parameter.
inline Stage2Result train_stage2(const Checkpoint& ck_td, const Checkpoint& ck_tr, const ModelConfig& cfg,
                                 const std::vector<Utterance>& data, const TrainConfig& tc) {
  if (tc.crop % 2 != 0) throw ConfigError("stage 2: crop length must be even (T_Td = 2 T_Tr)");
  Checkpoint init = transfer_weights(ck_td, ck_tr, cfg, tc.seed);
  PVectors model(cfg, tc.seed);
  load_state(model, init.tensors);
  Rng head_rng(tc.seed + 31);
  ClassifierHead head(cfg.embed_dim, class_count(data), head_rng);
  std::vector<Tensor> gates0;
  for (Tensor* g : model.bridges.gates()) gates0.push_back(g->clone());

  detail::Batcher batches(data, tc, tc.seed ^ 0x5851f42d4c957f2dULL);
  Triangular2 sched{tc.lr_min, tc.lr_max, tc.cycle_epochs, batches.steps_per_epoch()};
  sched.validate();
  auto params = trainable_params(model);
  head.visit(kClassifierNs + "pvectors.", [&](const std::string& n, Tensor& t, Slot) { params.push_back({n, t}); });
  Adam adam;
  Rng drop_rng(tc.seed + 17);
  Context ctx{Mode::train, &drop_rng};
  Stage2Result res;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    batches.shuffle();
    for (std::size_t k = 0; k < batches.steps_per_epoch(); ++k, ++step) {
      auto [x, labels] = batches.batch(k);
      const double lr = sched(step);
      const double loss = detail::train_step(
          [&] { return am_softmax_loss(model.forward(x, ctx).embedding, head.weight, labels, tc.am); }, params, adam,
          lr);
      detail::log_step(tc, step, "2", lr, loss);
      detail::check_finite(loss, step, "2");
      head.normalize_columns();
      if (step == 0) res.initial_loss = loss;
      res.train.losses.push_back(loss);
    }
  }
  auto gates = model.bridges.gates();
  for (std::size_t i = 0; i < gates.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < gates[i]->numel(); ++j) s += std::pow((*gates[i])[j] - gates0[i][j], 2);
    res.gate_shift.push_back(std::sqrt(s));
  }
  Checkpoint& ck = res.train.checkpoint;
  ck.stage = 2;
  ck.epoch = static_cast<std::uint32_t>(tc.epochs);
  ck.step = step;
  ck.meta = config_meta(cfg);
  ck.meta["branch"] = "pvectors";
  ck.tensors = state_of(model);
  head.visit(kClassifierNs + "pvectors.", [&](const std::string& n, Tensor& t, Slot) { ck.tensors[n] = t.clone(); });
  ck.optimizer = adam.state;
  return res;
}

// ---------------------------------------------------------------------------
// Embedding extraction (eval mode, one utterance at a time)

/// Restores whichever model a checkpoint holds and embeds full-length features.
class Embedder {
public:
  explicit Embedder(const Checkpoint& ck) : cfg_(config_from_meta(ck.meta)) {
    auto it = ck.meta.find("branch");
    kind_ = it == ck.meta.end() ? std::string("pvectors") : it->second;
    TensorMap weights;
    for (const auto& [n, t] : ck.tensors)
      if (n.rfind(kClassifierNs, 0) != 0) weights[n] = t;
    if (kind_ == "pvectors") {
      pv_ = std::make_unique<PVectors>(cfg_, 0);
      load_state(*pv_, weights);
    } else if (kind_ == "tdnn" || kind_ == "transformer") {
      const BranchKind k = kind_ == "tdnn" ? BranchKind::tdnn : BranchKind::transformer;
      branch_ = std::make_unique<StandaloneModel>(k, cfg_, 0, 0);
      load_state(*branch_, weights);
    } else {
      throw FormatError("checkpoint holds unknown model kind '" + kind_ + "'");
    }
  }

  const std::string& kind() const { return kind_; }
  const ModelConfig& config() const { return cfg_; }

  Embedding operator()(const FeatureMatrix& feat) {
    if (feat.rows != cfg_.mels)
      throw DimensionError("embed: features have " + std::to_string(feat.rows) + " mel bins, model expects " +
                           std::to_string(cfg_.mels));
    Tensor x = to_batch({feat});
    const Context ctx{Mode::eval, nullptr};
    Tensor e = pv_ ? pv_->forward(x, ctx).embedding : branch_->forward(x, ctx).embedding;
    return {e.data().begin(), e.data().end()};
  }

private:
  ModelConfig cfg_;
  std::string kind_;
  std::unique_ptr<PVectors> pv_;
  std::unique_ptr<StandaloneModel> branch_;
};

/// Mean embedding per speaker.
inline std::vector<Embedding> speaker_centroids(const std::vector<Utterance>& utts, const EmbeddingMap& emb) {
  std::map<std::size_t, std::pair<Embedding, std::size_t>> acc;
  for (const auto& u : utts) {
    const Embedding& e = lookup(emb, u.id);
    auto& [sum, n] = acc[u.speaker];
    if (sum.empty()) sum.assign(e.size(), 0.0);
    for (std::size_t i = 0; i < e.size(); ++i) sum[i] += e[i];
    ++n;
  }
  std::vector<Embedding> out;
  for (auto& [spk, sn] : acc) {
    for (double& v : sn.first) v /= static_cast<double>(sn.second);
    out.push_back(sn.first);
  }
  return out;
}

} // namespace pvec
