#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pvec/features.hpp"
#include "pvec/layers.hpp"

namespace pvec {

using TensorMap = std::map<std::string, Tensor>;

/// Adam moments keyed by parameter name.
struct OptimizerState {
  std::uint64_t step = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // (m, v)
};

/// Versioned named-tensor store. Names are dotted paths; the map keeps the
/// name table sorted, so encoding is canonical.
struct Checkpoint {
  std::uint32_t stage = 1;
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::map<std::string, std::string> meta;
  TensorMap tensors;
  std::optional<OptimizerState> optimizer;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

inline constexpr char kCheckpointMagic[4] = {'P', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

inline void put_tensor(std::string& buf, const Tensor& t) {
  put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(buf, d);
  for (double v : t.data()) put_f64(buf, v);
}

inline std::string get_string(Reader& r) { return r.bytes(r.u32()); }

inline Tensor get_tensor(Reader& r) {
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError(r.what() + ": bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    const std::uint64_t e = r.u64();
    if (e == 0 || e > r.remaining() / 8 || n > r.remaining() / 8 / e)
      throw FormatError(r.what() + ": tensor extent exceeds file size");
    d = e;
    n *= e;
  }
  Tensor t(shape);
  for (double& v : t.values()) v = r.f64();
  return t;
}

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string buf(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, ck.stage);
  detail::put_u32(buf, ck.epoch);
  detail::put_u64(buf, ck.step);
  detail::put_u32(buf, static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    detail::put_string(buf, k);
    detail::put_string(buf, v);
  }
  detail::put_u32(buf, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_string(buf, name);
    detail::put_tensor(buf, t);
  }
  buf.push_back(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    detail::put_u64(buf, ck.optimizer->step);
    detail::put_u32(buf, static_cast<std::uint32_t>(ck.optimizer->moments.size()));
    for (const auto& [name, mv] : ck.optimizer->moments) {
      detail::put_string(buf, name);
      detail::put_tensor(buf, mv.first);
      detail::put_tensor(buf, mv.second);
    }
  }
  return buf;
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  detail::Reader r(std::move(bytes), what);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError(what + ": bad magic (expected PVCK)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.stage = r.u32();
  ck.epoch = r.u32();
  ck.step = r.u64();
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    std::string k = detail::get_string(r);
    ck.meta[k] = detail::get_string(r);
  }
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    std::string name = detail::get_string(r);
    if (ck.tensors.count(name)) throw FormatError(what + ": duplicate tensor " + name);
    ck.tensors[name] = detail::get_tensor(r);
  }
  if (r.u8()) {
    OptimizerState opt;
    opt.step = r.u64();
    for (std::uint32_t n = r.u32(); n > 0; --n) {
      std::string name = detail::get_string(r);
      Tensor m = detail::get_tensor(r);
      Tensor v = detail::get_tensor(r);
      opt.moments[name] = {m, v};
    }
    ck.optimizer = std::move(opt);
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { detail::dump(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::slurp(path), path); }

/// Copies of every named tensor (parameters and buffers) of a module.
template <class Module>
TensorMap state_of(Module& m, const std::string& prefix = "") {
  TensorMap out;
  m.visit(prefix, [&](const std::string& name, Tensor& t, Slot) { out[name] = t.clone(); });
  return out;
}

/// Overwrites module tensors in place from `state`. Names under `prefix` that
/// the module does not declare, and declared names absent from `state`, are
/// both reported.
template <class Module>
void load_state(Module& m, const TensorMap& state, const std::string& prefix = "") {
  std::vector<std::string> missing, mismatched;
  std::map<std::string, bool> used;
  m.visit(prefix, [&](const std::string& name, Tensor& t, Slot) {
    auto it = state.find(name);
    if (it == state.end()) {
      missing.push_back(name);
      return;
    }
    used[name] = true;
    if (it->second.shape() != t.shape()) {
      mismatched.push_back(name + " " + to_string(it->second.shape()) + " vs " + to_string(t.shape()));
      return;
    }
    t.values() = it->second.values();
  });
  std::vector<std::string> unknown;
  for (const auto& [name, t] : state)
    if (name.compare(0, prefix.size(), prefix) == 0 && !used.count(name)) unknown.push_back(name);
  if (missing.empty() && mismatched.empty() && unknown.empty()) return;
  std::string msg = "checkpoint does not match model:";
  for (const auto& n : missing) msg += "\n  missing " + n;
  for (const auto& n : unknown) msg += "\n  unknown " + n;
  for (const auto& n : mismatched) msg += "\n  shape mismatch " + n;
  throw FormatError(msg);
}

} // namespace pvec
