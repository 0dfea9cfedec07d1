#pragma once

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pvec/errors.hpp"
#include "pvec/tensor.hpp"

namespace pvec {

inline constexpr double kLogFloor = 1e-10;

/// n_mels x frames log-energies, row-major (mel bins are rows).
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), values(r * c, fill) {}

  float& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const FeatureMatrix&) const = default;
};

struct AudioClip {
  std::vector<double> samples;  // PCM in [-1, 1]
  int sample_rate = 16000;
};

struct FbankOptions {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t n_mels = 80;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline std::size_t next_pow2(std::size_t n) { return std::bit_ceil(n); }

/// Center frequencies (Hz) of the n_mels triangular filters spanning 0..Nyquist.
inline std::vector<double> mel_centers(std::size_t n_mels, int sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> c(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m)
    c[m] = mel_to_hz(top * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
  return c;
}

/// [n_mels x (nfft/2+1)] triangular weights on linear FFT-bin frequencies.
inline std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t nfft, int sample_rate) {
  const std::size_t bins = nfft / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edge(n_mels + 2);
  for (std::size_t i = 0; i < edge.size(); ++i)
    edge[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  std::vector<double> fb(n_mels * bins, 0.0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edge[m], mid = edge[m + 1], hi = edge[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(nfft);
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb[m * bins + k] = w;
    }
  }
  return fb;
}

inline std::size_t frame_count(std::size_t n_samples, std::size_t win, std::size_t hop) {
  return n_samples < win ? 0 : (n_samples - win) / hop + 1;
}

/// Log-Mel filterbank: Hamming window, power spectrum, HTK mel filters,
/// clamp at 1e-10, natural log.
inline FeatureMatrix fbank(const AudioClip& clip, const FbankOptions& opt = {}) {
  if (clip.sample_rate <= 0) throw InputError("fbank: sample rate must be positive");
  const auto win = static_cast<std::size_t>(std::lround(opt.window_ms * clip.sample_rate / 1000.0));
  const auto hop = static_cast<std::size_t>(std::lround(opt.hop_ms * clip.sample_rate / 1000.0));
  if (win == 0 || hop == 0 || opt.n_mels == 0) throw InputError("fbank: empty window, hop or mel count");
  const std::size_t T = frame_count(clip.samples.size(), win, hop);
  if (T == 0) {
    throw InputError("fbank: clip of " + std::to_string(clip.samples.size()) +
                     " samples is shorter than one " + std::to_string(win) + "-sample window");
  }
  const std::size_t nfft = next_pow2(win), bins = nfft / 2 + 1;
  const std::vector<double> fb = mel_filterbank(opt.n_mels, nfft, clip.sample_rate);
  std::vector<double> window(win);
  for (std::size_t n = 0; n < win; ++n)
    window[n] = win == 1 ? 1.0
                         : 0.54 - 0.46 * std::cos(2.0 * M_PI * static_cast<double>(n) /
                                                  static_cast<double>(win - 1));

  double* in = fftw_alloc_real(nfft);
  fftw_complex* spec = fftw_alloc_complex(bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in, spec, FFTW_ESTIMATE);
  FeatureMatrix out(opt.n_mels, T);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill_n(in, nfft, 0.0);
    for (std::size_t n = 0; n < win; ++n) in[n] = clip.samples[t * hop + n] * window[n];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) power[k] = spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1];
    for (std::size_t m = 0; m < opt.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb[m * bins + k] * power[k];
      out.at(m, t) = static_cast<float>(std::log(std::max(e, kLogFloor)));
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(spec);
  fftw_free(in);
  return out;
}

/// Fixed-length window: random contiguous crop when longer, cyclic
/// repetition when shorter.
inline FeatureMatrix crop_segment(const FeatureMatrix& feat, std::size_t frames, std::mt19937_64& rng) {
  if (frames == 0 || feat.cols == 0) throw InputError("crop_segment: empty input or target length");
  FeatureMatrix out(feat.rows, frames);
  std::size_t start = 0;
  if (feat.cols > frames) {
    std::uniform_int_distribution<std::size_t> pick(0, feat.cols - frames);
    start = pick(rng);
  }
  for (std::size_t r = 0; r < feat.rows; ++r)
    for (std::size_t i = 0; i < frames; ++i) out.at(r, i) = feat.at(r, (start + i) % feat.cols);
  return out;
}

/// Stacks equal-shape matrices into a [B x rows x cols] tensor.
inline Tensor to_batch(const std::vector<FeatureMatrix>& feats) {
  if (feats.empty()) throw InputError("to_batch: no feature matrices");
  const std::size_t R = feats[0].rows, C = feats[0].cols;
  Tensor t({feats.size(), R, C});
  for (std::size_t b = 0; b < feats.size(); ++b) {
    if (feats[b].rows != R || feats[b].cols != C) throw DimensionError("to_batch: ragged feature shapes");
    for (std::size_t i = 0; i < R * C; ++i) t[b * R * C + i] = feats[b].values[i];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Binary I/O (little-endian)

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::string& buf, double f) { put_u64(buf, std::bit_cast<std::uint64_t>(f)); }

/// Bounds-checked cursor over an in-memory file.
class Reader {
public:
  Reader(std::string bytes, std::string what) : buf_(std::move(bytes)), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const auto lo = static_cast<unsigned char>(buf_[pos_]), hi = static_cast<unsigned char>(buf_[pos_ + 1]);
    pos_ += 2;
    return static_cast<std::uint16_t>(lo | (hi << 8));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::string& what() const { return what_; }

private:
  std::string buf_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed: " + path);
}

} // namespace detail

inline constexpr char kFeatureMagic[4] = {'P', 'V', 'F', 'B'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const FeatureMatrix& feat) {
  if (feat.rows > std::numeric_limits<std::uint32_t>::max() || feat.cols > std::numeric_limits<std::uint32_t>::max())
    throw FormatError("feature matrix too large for the PVFB header");
  std::string buf(kFeatureMagic, 4);
  detail::put_u32(buf, kFeatureVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(feat.rows));
  detail::put_u32(buf, static_cast<std::uint32_t>(feat.cols));
  buf.reserve(16 + feat.values.size() * 4);
  for (float v : feat.values) detail::put_f32(buf, v);
  return buf;
}

inline FeatureMatrix decode_features(std::string bytes, const std::string& what = "features") {
  detail::Reader r(std::move(bytes), what);
  if (r.bytes(4) != std::string(kFeatureMagic, 4)) throw FormatError(what + ": bad magic (expected PVFB)");
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::uint64_t rows = r.u32(), cols = r.u32();
  if (rows == 0 || cols == 0) throw FormatError(what + ": zero extent");
  if (rows * cols > r.remaining() / 4) {
    throw FormatError(what + ": header claims " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " values but only " + std::to_string(r.remaining()) + " payload bytes follow");
  }
  if (rows * cols * 4 != r.remaining()) throw FormatError(what + ": trailing bytes after payload");
  FeatureMatrix feat(rows, cols);
  for (float& v : feat.values) v = r.f32();
  return feat;
}

inline void write_features(const std::string& path, const FeatureMatrix& feat) {
  detail::dump(path, encode_features(feat));
}

inline FeatureMatrix read_features(const std::string& path) { return decode_features(detail::slurp(path), path); }

// ---------------------------------------------------------------------------
// WAV (16-bit mono PCM only)

inline AudioClip read_wav(const std::string& path) {
  detail::Reader r(detail::slurp(path), path);
  if (r.bytes(4) != "RIFF") throw FormatError(path + ": not a RIFF file");
  r.u32();
  if (r.bytes(4) != "WAVE") throw FormatError(path + ": not a WAVE file");
  AudioClip clip;
  bool have_fmt = false;
  while (r.remaining() >= 8) {
    const std::string id = r.bytes(4);
    const std::uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16) throw FormatError(path + ": short fmt chunk");
      const std::uint16_t format = r.u16(), channels = r.u16();
      clip.sample_rate = static_cast<int>(r.u32());
      r.u32();
      r.u16();
      const std::uint16_t bits = r.u16();
      if (format != 1 || channels != 1 || bits != 16)
        throw FormatError(path + ": only 16-bit mono PCM is supported");
      r.bytes(size - 16 + (size & 1));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(path + ": data chunk before fmt chunk");
      r.need(size);
      clip.samples.resize(size / 2);
      for (double& s : clip.samples) s = static_cast<std::int16_t>(r.u16()) / 32768.0;
      if (size & 1) r.bytes(std::min<std::size_t>(r.remaining(), 1));
      return clip;
    } else {
      r.bytes(size + (size & 1));
    }
  }
  throw FormatError(path + ": no data chunk");
}

inline void write_wav(const std::string& path, const AudioClip& clip) {
  std::string buf = "RIFF";
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  detail::put_u32(buf, 36 + data_bytes);
  buf += "WAVEfmt ";
  detail::put_u32(buf, 16);
  detail::put_u32(buf, 1u | (1u << 16));
  detail::put_u32(buf, static_cast<std::uint32_t>(clip.sample_rate));
  detail::put_u32(buf, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  detail::put_u32(buf, 2u | (16u << 16));
  buf += "data";
  detail::put_u32(buf, data_bytes);
  for (double s : clip.samples) {
    const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    const auto v = static_cast<std::int16_t>(std::lround(c * 32768.0));
    const auto u = static_cast<std::uint16_t>(v);
    buf.push_back(static_cast<char>(u & 0xFF));
    buf.push_back(static_cast<char>(u >> 8));
  }
  detail::dump(path, buf);
}

} // namespace pvec
