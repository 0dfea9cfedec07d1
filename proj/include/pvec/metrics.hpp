#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pvec/errors.hpp"

namespace pvec {

using Embedding = std::vector<double>;
using EmbeddingMap = std::map<std::string, Embedding>;

struct Trial {
  bool target = false;
  std::string enroll, test;
};

using TrialSet = std::vector<Trial>;

/// Scores aligned with a trial list by index.
struct ScoreSet {
  std::vector<double> scores;
  std::vector<bool> labels;
};

inline double cosine_score(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw InputError("cosine_score: dimension mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw InputError("cosine_score: zero-norm embedding");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

inline constexpr double kSnormFloor = 1e-12;

/// Mean and population std of the topK largest values.
inline std::pair<double, double> top_k_stats(std::vector<double> v, std::size_t k) {
  if (v.empty()) throw InputError("as-norm: empty cohort");
  if (k == 0 || k > v.size()) throw InputError("as-norm: topK must be in [1, cohort size]");
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
  double m = 0;
  for (std::size_t i = 0; i < k; ++i) m += v[i];
  m /= static_cast<double>(k);
  double var = 0;
  for (std::size_t i = 0; i < k; ++i) var += (v[i] - m) * (v[i] - m);
  var /= static_cast<double>(k);
  return {m, std::max(std::sqrt(var), kSnormFloor)};
}

/// Adaptive s-norm of one raw score given each side's cohort scores.
inline double as_norm(double s, const std::vector<double>& cohort_e, const std::vector<double>& cohort_t,
                      std::size_t top_k) {
  auto [me, se] = top_k_stats(cohort_e, top_k);
  auto [mt, st] = top_k_stats(cohort_t, top_k);
  return 0.5 * ((s - me) / se + (s - mt) / st);
}

inline const Embedding& lookup(const EmbeddingMap& emb, const std::string& id) {
  auto it = emb.find(id);
  if (it == emb.end()) throw InputError("no embedding for id '" + id + "'");
  return it->second;
}

/// Cosine scores for every trial; with a nonempty cohort, as-norm applied.
inline ScoreSet score_trials(const TrialSet& trials, const EmbeddingMap& emb,
                             const std::vector<Embedding>& cohort = {}, std::size_t top_k = 0) {
  ScoreSet out;
  std::map<std::string, std::vector<double>> cohort_scores;
  auto side = [&](const std::string& id) -> const std::vector<double>& {
    auto it = cohort_scores.find(id);
    if (it != cohort_scores.end()) return it->second;
    std::vector<double> s;
    for (const Embedding& c : cohort) s.push_back(cosine_score(lookup(emb, id), c));
    return cohort_scores[id] = std::move(s);
  };
  for (const Trial& t : trials) {
    double s = cosine_score(lookup(emb, t.enroll), lookup(emb, t.test));
    if (!cohort.empty()) s = as_norm(s, side(t.enroll), side(t.test), top_k);
    out.scores.push_back(s);
    out.labels.push_back(t.target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection metrics. A trial is accepted when score >= threshold.

struct RocPoint {
  double p_fa;    // nontargets accepted / nontargets
  double p_miss;  // targets rejected / targets
};

inline void check_two_classes(const ScoreSet& s, const char* what) {
  if (s.scores.size() != s.labels.size()) throw InputError(std::string(what) + ": scores and labels differ in length");
  const auto nt = std::count(s.labels.begin(), s.labels.end(), true);
  if (nt == 0 || nt == static_cast<std::ptrdiff_t>(s.labels.size()))
    throw InputError(std::string(what) + ": need at least one target and one nontarget trial");
  for (double v : s.scores)
    if (!std::isfinite(v)) throw InputError(std::string(what) + ": non-finite score");
}

/// ROC operating points at every distinct threshold, from accept-all
/// (p_fa = 1, p_miss = 0) to reject-all (p_fa = 0, p_miss = 1).
inline std::vector<RocPoint> roc_points(const ScoreSet& s) {
  std::vector<std::size_t> idx(s.scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  const auto nt = static_cast<double>(std::count(s.labels.begin(), s.labels.end(), true));
  const auto nn = static_cast<double>(s.labels.size()) - nt;
  std::vector<RocPoint> pts{{1.0, 0.0}};
  double rejected_t = 0, rejected_n = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double v = s.scores[idx[i]];
    for (; i < idx.size() && s.scores[idx[i]] == v; ++i) (s.labels[idx[i]] ? rejected_t : rejected_n) += 1;
    pts.push_back({(nn - rejected_n) / nn, rejected_t / nt});
  }
  return pts;
}

/// Equal error rate on the ROC convex hull: the lower hull of the operating
/// points is intersected with p_fa = p_miss.
inline double eer(const ScoreSet& s) {
  check_two_classes(s, "eer");
  std::vector<RocPoint> pts = roc_points(s);
  // pts run with p_fa decreasing and p_miss increasing; keep the lower-left hull
  std::vector<RocPoint> hull;
  for (const RocPoint& p : pts) {
    while (hull.size() >= 2) {
      const RocPoint& a = hull[hull.size() - 2];
      const RocPoint& b = hull.back();
      const double cross = (b.p_fa - a.p_fa) * (p.p_miss - a.p_miss) - (b.p_miss - a.p_miss) * (p.p_fa - a.p_fa);
      if (cross >= 0) hull.pop_back();
      else break;
    }
    hull.push_back(p);
  }
  for (std::size_t i = 0; i + 1 < hull.size(); ++i) {
    const RocPoint a = hull[i], b = hull[i + 1];
    const double da = a.p_fa - a.p_miss, db = b.p_fa - b.p_miss;
    if (da >= 0 && db <= 0) {
      if (da == db) return a.p_fa;
      const double t = da / (da - db);
      return a.p_fa + t * (b.p_fa - a.p_fa);
    }
  }
  return 0.5;  // not reached: the hull runs from (1,0) to (0,1)
}

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;
};

/// Normalized minimum detection cost over all thresholds including +-inf.
inline double min_dcf(const ScoreSet& s, const DcfParams& p = {}) {
  check_two_classes(s, "min_dcf");
  double best = std::numeric_limits<double>::infinity();
  for (const RocPoint& r : roc_points(s))
    best = std::min(best, p.c_miss * r.p_miss * p.p_target + p.c_fa * r.p_fa * (1.0 - p.p_target));
  return best / std::min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
}

// ---------------------------------------------------------------------------
// Text formats

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

/// Lines "label enroll test", label 1 = target, 0 = nontarget. Blank lines skipped.
inline TrialSet parse_trials(std::istream& in, const std::string& what = "trials") {
  TrialSet out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto w = split_ws(line);
    if (w.empty()) continue;
    if (w.size() != 3 || (w[0] != "0" && w[0] != "1"))
      throw FormatError(what + ":" + std::to_string(no) + ": expected 'label enroll test' with label 0 or 1");
    out.push_back({w[0] == "1", w[1], w[2]});
  }
  return out;
}

inline TrialSet read_trials(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return parse_trials(in, path);
}

inline void write_trials(const std::string& path, const TrialSet& trials) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  for (const Trial& t : trials) out << (t.target ? 1 : 0) << ' ' << t.enroll << ' ' << t.test << '\n';
}

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// Lines "enroll test score", 6 decimals.
inline void write_scores(const std::string& path, const TrialSet& trials, const ScoreSet& s) {
  if (trials.size() != s.scores.size()) throw InputError("write_scores: trial and score counts differ");
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  for (std::size_t i = 0; i < trials.size(); ++i)
    out << trials[i].enroll << ' ' << trials[i].test << ' ' << format_fixed(s.scores[i], 6) << '\n';
}

struct ScoredPair {
  std::string enroll, test;
  double score = 0;
};

inline std::vector<ScoredPair> read_scores(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<ScoredPair> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto w = split_ws(line);
    if (w.empty()) continue;
    char* end = nullptr;
    const double v = w.size() == 3 ? std::strtod(w[2].c_str(), &end) : 0.0;
    if (w.size() != 3 || !end || *end != '\0' || !std::isfinite(v))
      throw FormatError(path + ":" + std::to_string(no) + ": expected 'enroll test score'");
    out.push_back({w[0], w[1], v});
  }
  return out;
}

/// Aligns a score file with a trial list by (enroll, test).
inline ScoreSet align_scores(const TrialSet& trials, const std::vector<ScoredPair>& scores) {
  std::map<std::pair<std::string, std::string>, double> by_pair;
  for (const auto& s : scores) by_pair[{s.enroll, s.test}] = s.score;
  ScoreSet out;
  for (const Trial& t : trials) {
    auto it = by_pair.find({t.enroll, t.test});
    if (it == by_pair.end()) throw InputError("no score for trial " + t.enroll + " " + t.test);
    out.scores.push_back(it->second);
    out.labels.push_back(t.target);
  }
  return out;
}

/// Lines "id dim v1 ... vD".
inline void write_embeddings(const std::string& path, const EmbeddingMap& emb) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& [id, v] : emb) {
    out << id << ' ' << v.size();
    for (double x : v) out << ' ' << format_fixed(x, 9);
    out << '\n';
  }
}

inline EmbeddingMap read_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  EmbeddingMap out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto w = split_ws(line);
    if (w.empty()) continue;
    auto bad = [&] { return FormatError(path + ":" + std::to_string(no) + ": expected 'id dim v1 ... vD'"); };
    if (w.size() < 2) throw bad();
    char* end = nullptr;
    const unsigned long dim = std::strtoul(w[1].c_str(), &end, 10);
    if (*end != '\0' || dim == 0 || w.size() != dim + 2) throw bad();
    Embedding v(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      v[i] = std::strtod(w[i + 2].c_str(), &end);
      if (*end != '\0' || !std::isfinite(v[i])) throw bad();
    }
    out[w[0]] = std::move(v);
  }
  return out;
}

} // namespace pvec
