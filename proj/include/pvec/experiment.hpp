#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "pvec/training.hpp"

namespace pvec {

/// Desk-scale replica of the two-stage protocol on synthetic speakers.
struct ExperimentConfig {
  ModelConfig model = ModelConfig::toy();
  SynthSpec synth = {.utterances = 14, .sigma = 1.0};
  std::size_t held_out = 4;  // test utterances per speaker
  std::size_t eval_frames = 100;
  TrainConfig stage1 = {.epochs = 24, .batch = 32, .crop = 64, .cycle_epochs = 4, .am = {}};
  TrainConfig stage2 = {.epochs = 12, .batch = 32, .crop = 64, .cycle_epochs = 4, .am = {}};
  std::size_t snorm_top_k = 10;
};

struct SystemResult {
  double eer = 0, min_dcf = 0;
};

struct ExperimentResult {
  SystemResult tdnn, transformer, pvectors;
  std::vector<double> gate_shift;
  std::vector<double> losses_td, losses_tr, losses_pv;
};

/// Embeds every utterance (cropped or repeated to `frames`).
inline EmbeddingMap embed_all(Embedder& embed, const std::vector<Utterance>& utts, std::size_t frames) {
  EmbeddingMap out;
  Rng rng(0);
  for (const auto& u : utts) out[u.id] = embed(u.feat.cols == frames ? u.feat : crop_segment(u.feat, frames, rng));
  return out;
}

/// Cosine + as-norm (cohort = training-speaker centroids) EER and minDCF.
inline SystemResult evaluate_system(const Checkpoint& ck, const std::vector<Utterance>& train,
                                    const std::vector<Utterance>& test, const TrialSet& trials,
                                    const ExperimentConfig& cfg) {
  Embedder embed(ck);
  EmbeddingMap emb = embed_all(embed, test, cfg.eval_frames);
  EmbeddingMap train_emb = embed_all(embed, train, cfg.eval_frames);
  std::vector<Embedding> cohort = speaker_centroids(train, train_emb);
  ScoreSet s = score_trials(trials, emb, cohort, std::min(cfg.snorm_top_k, cohort.size()));
  return {eer(s), min_dcf(s)};
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<Utterance> train, test;
  split_held_out(gen_synth(cfg.synth, seed), cfg.held_out, train, test);
  const TrialSet trials = all_pairs_trials(test);
  TrainConfig s1 = cfg.stage1, s2 = cfg.stage2;
  s1.seed = s2.seed = seed;
  ExperimentResult r;
  TrainResult td = train_stage1(BranchKind::tdnn, cfg.model, train, s1);
  TrainResult tr = train_stage1(BranchKind::transformer, cfg.model, train, s1);
  Stage2Result pv = train_stage2(td.checkpoint, tr.checkpoint, cfg.model, train, s2);
  r.tdnn = evaluate_system(td.checkpoint, train, test, trials, cfg);
  r.transformer = evaluate_system(tr.checkpoint, train, test, trials, cfg);
  r.pvectors = evaluate_system(pv.train.checkpoint, train, test, trials, cfg);
  r.gate_shift = pv.gate_shift;
  r.losses_td = td.losses;
  r.losses_tr = tr.losses;
  r.losses_pv = pv.train.losses;
  return r;
}

} // namespace pvec
