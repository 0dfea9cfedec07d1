#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pvec/dataset.hpp"
#include "pvec/gradsuite.hpp"
#include "pvec/runconfig.hpp"

namespace fs = std::filesystem;
using namespace pvec;

namespace {

void need_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw InputError(std::string(what) + " not found: " + path);
}

void need_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw InputError(std::string(what) + " not found: " + path);
}

void need_writable(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw InputError("output directory does not exist: " + parent.string());
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Options {
  std::string config;
  std::vector<std::string> sets;

  RunConfig load() const {
    RunConfig rc;
    if (!config.empty()) rc.load(config);
    for (const auto& s : sets) rc.apply(s);
    rc.validate();
    return rc;
  }
};

int cmd_synth(const RunConfig& rc, const std::string& out) {
  std::vector<Utterance> train, test;
  split_held_out(gen_synth(rc.exp.synth, rc.seed), rc.exp.held_out, train, test);
  write_dataset(out, train, test);
  std::cout << "wrote " << train.size() << " train and " << test.size() << " test utterances to " << out << '\n';
  return 0;
}

int cmd_fbank(const std::string& in, const std::string& out, std::size_t mels) {
  need_dir(in, "wav directory");
  std::vector<fs::path> wavs;
  for (const auto& e : fs::directory_iterator(in))
    if (e.is_regular_file() && e.path().extension() == ".wav") wavs.push_back(e.path());
  if (wavs.empty()) throw InputError("no .wav files in " + in);
  std::sort(wavs.begin(), wavs.end());
  fs::create_directories(out);
  FbankOptions opt;
  opt.n_mels = mels;
  for (const auto& w : wavs)
    write_features((fs::path(out) / w.stem()).string() + ".pvfb", fbank(read_wav(w.string()), opt));
  std::cout << "wrote " << wavs.size() << " feature files to " << out << '\n';
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& stage, const std::string& data, std::string list,
              const std::string& out, const std::string& ck_td, const std::string& ck_tr, const std::string& log) {
  need_dir(data, "data directory");
  if (list.empty()) list = (fs::path(data) / "train.list").string();
  need_file(list, "training list");
  if (stage == "2") {
    if (ck_td.empty() || ck_tr.empty()) throw UsageError("stage 2 needs --td and --tr stage-1 checkpoints");
    need_file(ck_td, "TDNN checkpoint");
    need_file(ck_tr, "transformer checkpoint");
  }
  need_writable(out);
  if (!log.empty()) need_writable(log);

  std::ofstream log_file;
  const int n = stage == "2" ? 2 : 1;
  TrainConfig tc = rc.train(n);
  if (!log.empty()) {
    log_file.open(log);
    log_file << "# pvec train stage " << stage << " seed " << rc.seed << " started " << now_utc() << '\n';
    tc.log = &log_file;
  }
  const auto data_set = read_list(data, list);
  Checkpoint ck;
  if (stage == "2") {
    Stage2Result r = train_stage2(load_checkpoint(ck_td), load_checkpoint(ck_tr), rc.exp.model, data_set, tc);
    ck = std::move(r.train.checkpoint);
    std::cout << "stage 2 loss " << format_fixed(r.initial_loss, 4) << " -> " << format_fixed(r.train.losses.back(), 4)
              << "; gate shift";
    for (double g : r.gate_shift) std::cout << ' ' << format_fixed(g, 4);
    std::cout << '\n';
  } else {
    const BranchKind kind = stage == "1td" ? BranchKind::tdnn : BranchKind::transformer;
    TrainResult r = train_stage1(kind, rc.exp.model, data_set, tc);
    std::cout << "stage " << stage << " loss " << format_fixed(r.losses.front(), 4) << " -> "
              << format_fixed(r.losses.back(), 4) << '\n';
    ck = std::move(r.checkpoint);
  }
  save_checkpoint(out, ck);
  return 0;
}

int cmd_embed(const RunConfig& rc, const std::string& ckpt, const std::string& data, const std::string& list,
              const std::string& out, bool centroids) {
  need_file(ckpt, "checkpoint");
  need_dir(data, "data directory");
  need_file(list, "list");
  need_writable(out);
  Embedder embed(load_checkpoint(ckpt));
  const auto utts = read_list(data, list);
  EmbeddingMap emb;
  if (rc.exp.eval_frames > 0) {
    emb = embed_all(embed, utts, rc.exp.eval_frames);
  } else {
    for (const auto& u : utts) emb[u.id] = embed(u.feat);
  }
  if (centroids) {
    const auto c = speaker_centroids(utts, emb);
    EmbeddingMap by_spk;
    for (std::size_t s = 0; s < c.size(); ++s) by_spk[speaker_name(s)] = c[s];
    emb = std::move(by_spk);
  }
  write_embeddings(out, emb);
  return 0;
}

int cmd_score(const RunConfig& rc, const std::string& trials, const std::string& emb, const std::string& cohort,
              const std::string& out) {
  need_file(trials, "trial list");
  need_file(emb, "embedding file");
  if (!cohort.empty()) need_file(cohort, "cohort file");
  need_writable(out);
  const TrialSet t = read_trials(trials);
  std::vector<Embedding> c;
  if (!cohort.empty())
    for (auto& [id, v] : read_embeddings(cohort)) c.push_back(std::move(v));
  write_scores(out, t, score_trials(t, read_embeddings(emb), c, std::min(rc.exp.snorm_top_k, c.size())));
  return 0;
}

int cmd_eval(const std::string& trials, const std::string& scores) {
  need_file(trials, "trial list");
  need_file(scores, "score file");
  const ScoreSet s = align_scores(read_trials(trials), read_scores(scores));
  std::printf("EER\t%.4f\tminDCF\t%.4f\n", 100.0 * eer(s), min_dcf(s));
  return 0;
}

int cmd_gradcheck() {
  GradSuite suite(&std::cout);
  const GradSuiteResult r = suite.run();
  std::printf("%s in %.1f s\n", r.passed() ? "all gradient checks passed" : "gradient check FAILED", r.seconds);
  return r.passed() ? 0 : NumericError("").exit_code();
}

int cmd_params(const RunConfig& rc) {
  for (const auto& [ns, n] : param_breakdown(rc.exp.model)) std::cout << ns << '\t' << n << '\n';
  std::cout << "total\t" << param_count(rc.exp.model) << '\n';
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"p-vectors speaker embeddings: synthetic data, features, two-stage training, scoring"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(
      "Settings come from built-in defaults, then --config (key=value lines), then --set in order; "
      "later sources win.\nExit codes: 0 ok, 1 usage, 2 config, 3 data or format, 4 numeric failure.");
  Options opt;
  app.add_option("-c,--config", opt.config, "key=value config file");
  app.add_option("--set", opt.sets, "override one config key, key=value (repeatable)");

  auto* synth = app.add_subcommand("synth", "write a synthetic speaker dataset");
  std::string out, data, list, ckpt, ck_td, ck_tr, log, trials, emb, cohort, scores, wav_dir, stage, preset;
  std::size_t mels = 80;
  bool centroids = false;
  synth->add_option("-o,--out", out, "dataset directory")->required();

  auto* fb = app.add_subcommand("fbank", "convert a directory of WAV files to log-mel features");
  fb->add_option("-i,--in", wav_dir, "directory of .wav files")->required();
  fb->add_option("-o,--out", out, "feature directory")->required();
  fb->add_option("--mels", mels, "mel bins")->capture_default_str();

  auto* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  train->add_option("--stage", stage, "1td, 1tr or 2")->required()->check(CLI::IsMember({"1td", "1tr", "2"}));
  train->add_option("-d,--data", data, "dataset directory")->required();
  train->add_option("--list", list, "training list (default <data>/train.list)");
  train->add_option("-o,--out", out, "checkpoint to write")->required();
  train->add_option("--td", ck_td, "stage-1 TDNN checkpoint (stage 2)");
  train->add_option("--tr", ck_tr, "stage-1 transformer checkpoint (stage 2)");
  train->add_option("--log", log, "per-step log: step, stage, lr, loss");

  auto* em = app.add_subcommand("embed", "extract embeddings for a list of utterances");
  em->add_option("--ckpt", ckpt, "checkpoint")->required();
  em->add_option("-d,--data", data, "dataset directory")->required();
  em->add_option("--list", list, "utterance list")->required();
  em->add_option("-o,--out", out, "embedding file")->required();
  em->add_flag("--centroids", centroids, "write one mean embedding per speaker (an as-norm cohort)");

  auto* sc = app.add_subcommand("score", "cosine-score trials, optionally as-norm against a cohort");
  sc->add_option("--trials", trials, "trial list")->required();
  sc->add_option("--emb", emb, "embedding file")->required();
  sc->add_option("--cohort", cohort, "cohort embedding file");
  sc->add_option("-o,--out", out, "score file")->required();

  auto* ev = app.add_subcommand("eval", "print EER (%) and minDCF");
  ev->add_option("--trials", trials, "trial list")->required();
  ev->add_option("--scores", scores, "score file")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op, module and the toy model");

  auto* pa = app.add_subcommand("params", "trainable parameter counts per namespace");
  pa->add_option("--preset", preset, "toy or full (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (!opt.config.empty()) need_file(opt.config, "config file");
    RunConfig rc = opt.load();
    if (*synth) return cmd_synth(rc, out);
    if (*fb) return cmd_fbank(wav_dir, out, mels);
    if (*train) return cmd_train(rc, stage, data, list, out, ck_td, ck_tr, log);
    if (*em) return cmd_embed(rc, ckpt, data, list, out, centroids);
    if (*sc) return cmd_score(rc, trials, emb, cohort, out);
    if (*ev) return cmd_eval(trials, scores);
    if (*gc) return cmd_gradcheck();
    if (*pa) {
      if (!preset.empty()) rc.set("preset", preset);
      return cmd_params(rc);
    }
  } catch (const Error& e) {
    std::cerr << "pvec: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "pvec: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
