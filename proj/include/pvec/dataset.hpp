#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pvec/metrics.hpp"
#include "pvec/training.hpp"

namespace pvec {

// Dataset directory layout:
//   feats/<id>.pvfb   one feature file per utterance
//   train.list        "id speaker" per line
//   test.list         same, held-out utterances
//   trials.txt        all pairs of test utterances

inline std::string feature_path(const std::string& dir, const std::string& id) {
  return (std::filesystem::path(dir) / "feats" / (id + ".pvfb")).string();
}

inline std::string speaker_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03zu", s);
  return buf;
}

inline void write_list(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& u : utts) out << u.id << ' ' << speaker_name(u.speaker) << '\n';
}

inline void write_dataset(const std::string& dir, const std::vector<Utterance>& train,
                          const std::vector<Utterance>& test) {
  std::filesystem::create_directories(std::filesystem::path(dir) / "feats");
  for (const auto* set : {&train, &test})
    for (const auto& u : *set) write_features(feature_path(dir, u.id), u.feat);
  write_list((std::filesystem::path(dir) / "train.list").string(), train);
  write_list((std::filesystem::path(dir) / "test.list").string(), test);
  write_trials((std::filesystem::path(dir) / "trials.txt").string(), all_pairs_trials(test));
}

/// Reads a list and its features. Speaker labels are ranks of the sorted
/// speaker names found in the list.
inline std::vector<Utterance> read_list(const std::string& dir, const std::string& list) {
  std::ifstream in(list);
  if (!in) throw InputError("cannot open list " + list);
  std::vector<std::pair<std::string, std::string>> rows;
  std::map<std::string, std::size_t> speakers;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto w = split_ws(line);
    if (w.empty()) continue;
    if (w.size() != 2) throw FormatError(list + ":" + std::to_string(no) + ": expected 'id speaker'");
    rows.emplace_back(w[0], w[1]);
    speakers[w[1]] = 0;
  }
  if (rows.empty()) throw InputError("list " + list + " is empty");
  std::size_t rank = 0;
  for (auto& [name, label] : speakers) label = rank++;
  std::vector<Utterance> out;
  for (const auto& [id, spk] : rows) out.push_back({id, speakers[spk], read_features(feature_path(dir, id))});
  return out;
}

} // namespace pvec
