#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "pvec/experiment.hpp"

namespace pvec {

// Plain-text key=value run configuration. '#' starts a comment; blank lines
// are ignored. Unknown keys and unparsable values raise ConfigError.
struct RunConfig {
  std::uint64_t seed = 1;
  ExperimentConfig exp;

  using Setter = std::function<void(RunConfig&, const std::string&)>;

  static const std::map<std::string, Setter>& keys() {
    static const std::map<std::string, Setter> k = {
        {"preset", [](RunConfig& c, const std::string& v) { set_preset(c, v); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_uint(v); }},
        {"mels", [](RunConfig& c, const std::string& v) { c.exp.model.mels = c.exp.synth.mels = to_size(v); }},
        {"dropout", [](RunConfig& c, const std::string& v) { c.exp.model.dropout = to_double(v); }},
        {"gate_init", [](RunConfig& c, const std::string& v) { c.exp.model.gate_init = to_double(v); }},
        {"speakers", [](RunConfig& c, const std::string& v) { c.exp.synth.speakers = to_size(v); }},
        {"utterances", [](RunConfig& c, const std::string& v) { c.exp.synth.utterances = to_size(v); }},
        {"frames", [](RunConfig& c, const std::string& v) { c.exp.synth.frames = to_size(v); }},
        {"sigma", [](RunConfig& c, const std::string& v) { c.exp.synth.sigma = to_double(v); }},
        {"held_out", [](RunConfig& c, const std::string& v) { c.exp.held_out = to_size(v); }},
        {"eval_frames", [](RunConfig& c, const std::string& v) { c.exp.eval_frames = to_size(v); }},
        {"snorm_topk", [](RunConfig& c, const std::string& v) { c.exp.snorm_top_k = to_size(v); }},
        {"stage1.epochs", [](RunConfig& c, const std::string& v) { c.exp.stage1.epochs = to_size(v); }},
        {"stage2.epochs", [](RunConfig& c, const std::string& v) { c.exp.stage2.epochs = to_size(v); }},
        {"batch", both([](TrainConfig& t, const std::string& v) { t.batch = to_size(v); })},
        {"crop", both([](TrainConfig& t, const std::string& v) { t.crop = to_size(v); })},
        {"cycle_epochs", both([](TrainConfig& t, const std::string& v) { t.cycle_epochs = to_size(v); })},
        {"lr_min", both([](TrainConfig& t, const std::string& v) { t.lr_min = to_double(v); })},
        {"lr_max", both([](TrainConfig& t, const std::string& v) { t.lr_max = to_double(v); })},
        {"margin", both([](TrainConfig& t, const std::string& v) { t.am.margin = to_double(v); })},
        {"scale", both([](TrainConfig& t, const std::string& v) { t.am.scale = to_double(v); })},
    };
    return k;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = keys().find(key);
    if (it == keys().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(*this, value);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }

  /// "key=value", surrounding blanks trimmed.
  void apply(const std::string& assignment, const std::string& where = "--set") {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void parse(std::istream& in, const std::string& what = "config") {
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      line = trim(line.substr(0, line.find('#')));
      if (!line.empty()) apply(line, what + ":" + std::to_string(n));
    }
  }

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    parse(in, path);
  }

  void validate() const {
    exp.model.validate();
    if (exp.synth.mels != exp.model.mels) throw ConfigError("mels differs between data and model");
    for (const TrainConfig* t : {&exp.stage1, &exp.stage2}) {
      if (t->batch < 2) throw ConfigError("batch must be >= 2");
      if (t->crop == 0) throw ConfigError("crop must be positive");
      if (!(t->lr_min < t->lr_max)) throw ConfigError("need lr_min < lr_max");
    }
  }

  /// Training settings for a stage with the run seed folded in.
  TrainConfig train(int stage) const {
    TrainConfig t = stage == 2 ? exp.stage2 : exp.stage1;
    t.seed = seed;
    return t;
  }

private:
  static Setter both(std::function<void(TrainConfig&, const std::string&)> f) {
    return [f](RunConfig& c, const std::string& v) {
      f(c.exp.stage1, v);
      f(c.exp.stage2, v);
    };
  }

  static void set_preset(RunConfig& c, const std::string& v) {
    const ModelConfig m = ModelConfig::preset_named(v);
    c.exp.model = m;
    c.exp.synth.mels = m.mels;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static std::uint64_t to_uint(const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + v + "' is not a non-negative integer");
    return out;
  }
  static std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_uint(v)); }
  static double to_double(const std::string& v) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError("'" + v + "' is not a finite number");
    return out;
  }
};

} // namespace pvec
