#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gdict/bytes.hpp"
#include "gdict/errors.hpp"
#include "gdict/linalg.hpp"
#include "gdict/prng.hpp"

namespace gdict {

// Single-layer autoencoder: features = ReLU(w_enc (x - b_dec) + b_enc),
// reconstruction = sum_i features[i] * w_dec.row(i) + b_dec.
// Dictionary elements are the rows of w_dec and are kept at unit norm.
struct BaselineSae {
  std::size_t d_act = 0;
  std::size_t d_feat = 0;
  Mat w_enc;  // d_feat x d_act
  Vec b_enc;  // d_feat
  Mat w_dec;  // d_feat x d_act, unit-norm rows
  Vec b_dec;  // d_act
};

enum class Tying { Tied, Untied };

// Gated encoder: a gate path decides which features fire,
//   pre_gate = w_gate (x - b_dec) + b_gate,   fires iff pre_gate > 0 (strict),
// and a magnitude path estimates how strongly,
//   mag = ReLU(w_mag (x - b_dec) + b_mag).
// When tied, w_mag is never stored; row i is exp(r_mag[i]) * w_gate row i.
struct GatedSae {
  std::size_t d_act = 0;
  std::size_t d_feat = 0;
  Tying tying = Tying::Tied;
  Mat w_gate;  // d_feat x d_act
  Vec b_gate;  // d_feat
  Vec r_mag;   // d_feat (log row rescale; all-zero and unused when untied)
  Vec b_mag;   // d_feat
  std::optional<Mat> w_mag_untied;  // present iff tying == Untied
  Mat w_dec;   // d_feat x d_act, unit-norm rows
  Vec b_dec;   // d_act
};

enum class SaeKind : std::uint8_t { Baseline = 0, GatedTied = 1, GatedUntied = 2 };

using SaeModel = std::variant<BaselineSae, GatedSae>;

inline SaeKind kind_of(const SaeModel& m) {
  if (std::holds_alternative<BaselineSae>(m)) return SaeKind::Baseline;
  return std::get<GatedSae>(m).tying == Tying::Tied ? SaeKind::GatedTied
                                                    : SaeKind::GatedUntied;
}

inline std::size_t d_act_of(const SaeModel& m) {
  return std::visit([](const auto& s) { return s.d_act; }, m);
}
inline std::size_t d_feat_of(const SaeModel& m) {
  return std::visit([](const auto& s) { return s.d_feat; }, m);
}

struct EncodeOutput {
  Vec features;                      // nonnegative; zero where the gate is closed
  Vec pre_gate;                      // gated only
  Vec mag_acts;                      // gated only
  std::vector<std::uint8_t> gate_mask;  // gated only
};

// Linear encoder view of a tied gated SAE: z = w_mag (x - b_dec) + b_mag
// passed through the jump activation z -> z if z > theta and z > 0, else 0.
struct JumpReluView {
  Mat w_mag;
  Vec b_mag;
  Vec theta;
};

namespace detail {

inline double affine_row(std::span<const double> w_row, std::span<const double> xc,
                         double b) {
  return dot(w_row, xc) + b;
}

}  // namespace detail

inline EncodeOutput baseline_encode(const BaselineSae& sae, std::span<const double> x) {
  require_dims(x.size() == sae.d_act, "baseline_encode: x dimension mismatch");
  EncodeOutput out;
  out.features.resize(sae.d_feat);
  Vec xc(sae.d_act);
  for (std::size_t k = 0; k < sae.d_act; ++k) xc[k] = x[k] - sae.b_dec[k];
  for (std::size_t i = 0; i < sae.d_feat; ++i) {
    const double pre = detail::affine_row(sae.w_enc.row_span(i), xc, sae.b_enc[i]);
    out.features[i] = pre > 0.0 ? pre : 0.0;
  }
  return out;
}

// Row i of the materialized magnitude weights is exp(r_mag[i]) * w_gate row i.
inline Mat materialize_w_mag(const GatedSae& sae) {
  if (sae.tying != Tying::Tied)
    throw std::logic_error("materialize_w_mag: only valid for tied gated SAEs");
  Mat w(sae.d_feat, sae.d_act);
  for (std::size_t i = 0; i < sae.d_feat; ++i) {
    const double s = std::exp(sae.r_mag[i]);
    const double* g = sae.w_gate.row(i);
    double* m = w.row(i);
    for (std::size_t k = 0; k < sae.d_act; ++k) m[k] = s * g[k];
  }
  return w;
}

inline const Mat& effective_w_mag(const GatedSae& sae, Mat& scratch) {
  if (sae.tying == Tying::Untied) return *sae.w_mag_untied;
  scratch = materialize_w_mag(sae);
  return scratch;
}

inline EncodeOutput gated_encode(const GatedSae& sae, std::span<const double> x) {
  require_dims(x.size() == sae.d_act, "gated_encode: x dimension mismatch");
  EncodeOutput out;
  out.features.resize(sae.d_feat);
  out.pre_gate.resize(sae.d_feat);
  out.mag_acts.resize(sae.d_feat);
  out.gate_mask.resize(sae.d_feat);
  Vec xc(sae.d_act);
  for (std::size_t k = 0; k < sae.d_act; ++k) xc[k] = x[k] - sae.b_dec[k];
  Mat scratch;
  const Mat& w_mag = effective_w_mag(sae, scratch);
  for (std::size_t i = 0; i < sae.d_feat; ++i) {
    const double pre = detail::affine_row(sae.w_gate.row_span(i), xc, sae.b_gate[i]);
    const double z = detail::affine_row(w_mag.row_span(i), xc, sae.b_mag[i]);
    const bool open = pre > 0.0;  // strictly: a pre-activation of exactly 0 stays closed
    const double mag = z > 0.0 ? z : 0.0;
    out.pre_gate[i] = pre;
    out.gate_mask[i] = open ? 1 : 0;
    out.mag_acts[i] = mag;
    out.features[i] = open ? mag : 0.0;
  }
  return out;
}

inline Vec decode(const Mat& w_dec, const Vec& b_dec, const Vec& features) {
  require_dims(features.size() == w_dec.rows && b_dec.size() == w_dec.cols,
               "decode: dimension mismatch");
  Vec out = b_dec;
  for (std::size_t i = 0; i < w_dec.rows; ++i) {
    if (features[i] != 0.0) axpy(features[i], w_dec.row_span(i), out);
  }
  return out;
}

inline Vec jumprelu_theta(const GatedSae& sae) {
  if (sae.tying != Tying::Tied)
    throw std::logic_error("jumprelu_theta: only valid for tied gated SAEs");
  Vec theta(sae.d_feat);
  for (std::size_t i = 0; i < sae.d_feat; ++i)
    theta[i] = sae.b_mag[i] - std::exp(sae.r_mag[i]) * sae.b_gate[i];
  return theta;
}

inline JumpReluView jumprelu_view(const GatedSae& sae) {
  JumpReluView v;
  v.w_mag = materialize_w_mag(sae);
  v.b_mag = sae.b_mag;
  v.theta = jumprelu_theta(sae);
  return v;
}

inline Vec jumprelu_encode(const JumpReluView& view, std::span<const double> x,
                           const Vec& b_dec) {
  require_dims(x.size() == view.w_mag.cols && b_dec.size() == view.w_mag.cols,
               "jumprelu_encode: dimension mismatch");
  Vec out(view.w_mag.rows);
  Vec xc(view.w_mag.cols);
  for (std::size_t k = 0; k < xc.size(); ++k) xc[k] = x[k] - b_dec[k];
  for (std::size_t i = 0; i < view.w_mag.rows; ++i) {
    const double z = detail::affine_row(view.w_mag.row_span(i), xc, view.b_mag[i]);
    out[i] = (z > view.theta[i] && z > 0.0) ? z : 0.0;
  }
  return out;
}

// Rescales every dictionary row to unit norm. Errors on an exactly-zero row.
inline void renormalize_decoder(Mat& w_dec) {
  for (std::size_t i = 0; i < w_dec.rows; ++i) {
    const double n = norm2(w_dec.row_span(i));
    if (n == 0.0)
      throw NumericError("renormalize_decoder: zero dictionary row at feature " +
                         std::to_string(i));
    scale(w_dec.row_span(i), 1.0 / n);
  }
}

inline void renormalize_decoder(BaselineSae& sae) { renormalize_decoder(sae.w_dec); }
inline void renormalize_decoder(GatedSae& sae) { renormalize_decoder(sae.w_dec); }

// Decoder rows uniform on the sphere; encoder directions start as copies of
// the decoder rows; all biases and r_mag start at zero. The decoder rows come
// from dedicated sub-streams, so every kind shares the same w_dec at a seed.
inline SaeModel init_params(SaeKind kind, std::size_t d_act, std::size_t d_feat,
                            std::uint64_t seed) {
  if (d_act < 1 || d_feat < 1) throw ConfigError("init_params: dims must be >= 1");
  Mat w_dec(d_feat, d_act);
  // Domain-separated from the data generator's streams: equal numeric seeds
  // must not hand the learner the true dictionary at initialization.
  CounterRng root = CounterRng(seed).split(0x1217);
  for (std::size_t i = 0; i < d_feat; ++i) root.split(i).unit_sphere(w_dec.row_span(i));

  if (kind == SaeKind::Baseline) {
    BaselineSae s;
    s.d_act = d_act;
    s.d_feat = d_feat;
    s.w_dec = w_dec;
    s.w_enc = w_dec;
    s.b_enc.assign(d_feat, 0.0);
    s.b_dec.assign(d_act, 0.0);
    return s;
  }
  GatedSae s;
  s.d_act = d_act;
  s.d_feat = d_feat;
  s.tying = kind == SaeKind::GatedTied ? Tying::Tied : Tying::Untied;
  s.w_dec = w_dec;
  s.w_gate = w_dec;
  s.b_gate.assign(d_feat, 0.0);
  s.r_mag.assign(d_feat, 0.0);
  s.b_mag.assign(d_feat, 0.0);
  s.b_dec.assign(d_act, 0.0);
  if (s.tying == Tying::Untied) s.w_mag_untied = w_dec;
  return s;
}

// Convenience wrappers used by metrics and the CLI.
inline EncodeOutput encode(const SaeModel& m, std::span<const double> x) {
  if (const auto* b = std::get_if<BaselineSae>(&m)) return baseline_encode(*b, x);
  return gated_encode(std::get<GatedSae>(m), x);
}

inline const Mat& decoder_weights(const SaeModel& m) {
  return std::visit([](const auto& s) -> const Mat& { return s.w_dec; }, m);
}
inline const Vec& decoder_bias(const SaeModel& m) {
  return std::visit([](const auto& s) -> const Vec& { return s.b_dec; }, m);
}

inline Vec reconstruct(const SaeModel& m, std::span<const double> x) {
  return decode(decoder_weights(m), decoder_bias(m), encode(m, x).features);
}

// ---------------------------------------------------------------------------
// Checkpoint format ("GSAE"):
//   magic 'G','S','A','E' | version u32 = 1 | kind u8 (0 baseline, 1 gated
//   tied, 2 gated untied) | d_act u32 | d_feat u32 | parameter tensors as
//   little-endian float64 in fixed order:
//     baseline: w_enc, b_enc, w_dec, b_dec
//     gated:    w_gate, b_gate, r_mag, b_mag, [w_mag_untied], w_dec, b_dec
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 17;

namespace detail {

inline void write_f64_le(std::ofstream& out, std::span<const double> v) {
  std::vector<unsigned char> buf(v.size() * 8);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    for (int b = 0; b < 8; ++b)
      buf[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

inline void read_f64_le(std::ifstream& in, std::span<double> v, const std::string& path) {
  std::vector<unsigned char> buf(v.size() * 8);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw FormatError(path + ": truncated tensor data");
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | buf[i * 8 + b];
    std::memcpy(&v[i], &bits, 8);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SaeModel& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  std::string header = "GSAE";
  detail::put_u32(header, kCheckpointFormatVersion);
  header.push_back(static_cast<char>(kind_of(m)));
  detail::put_u32(header, static_cast<std::uint32_t>(d_act_of(m)));
  detail::put_u32(header, static_cast<std::uint32_t>(d_feat_of(m)));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  if (const auto* b = std::get_if<BaselineSae>(&m)) {
    detail::write_f64_le(out, b->w_enc.data);
    detail::write_f64_le(out, b->b_enc);
    detail::write_f64_le(out, b->w_dec.data);
    detail::write_f64_le(out, b->b_dec);
  } else {
    const auto& g = std::get<GatedSae>(m);
    detail::write_f64_le(out, g.w_gate.data);
    detail::write_f64_le(out, g.b_gate);
    detail::write_f64_le(out, g.r_mag);
    detail::write_f64_le(out, g.b_mag);
    if (g.tying == Tying::Untied) detail::write_f64_le(out, g.w_mag_untied->data);
    detail::write_f64_le(out, g.w_dec.data);
    detail::write_f64_le(out, g.b_dec);
  }
  out.close();
  if (!out) throw FormatError("write failed: " + path);
}

inline SaeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  unsigned char header[kCheckpointHeaderBytes];
  if (!in.read(reinterpret_cast<char*>(header), kCheckpointHeaderBytes))
    throw FormatError(path + ": truncated header");
  if (std::memcmp(header, "GSAE", 4) != 0)
    throw FormatError(path + ": bad magic at byte offset 0");
  const std::uint32_t version = detail::get_u32(header + 4);
  if (version != kCheckpointFormatVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  const std::uint8_t kind = header[8];
  const std::size_t d_act = detail::get_u32(header + 9);
  const std::size_t d_feat = detail::get_u32(header + 13);
  if (kind > 2) throw FormatError(path + ": unknown kind at byte offset 8");
  if (d_act == 0 || d_feat == 0) throw FormatError(path + ": zero dims in header");

  if (kind == 0) {
    BaselineSae s;
    s.d_act = d_act;
    s.d_feat = d_feat;
    s.w_enc = Mat(d_feat, d_act);
    s.b_enc.assign(d_feat, 0.0);
    s.w_dec = Mat(d_feat, d_act);
    s.b_dec.assign(d_act, 0.0);
    detail::read_f64_le(in, s.w_enc.data, path);
    detail::read_f64_le(in, s.b_enc, path);
    detail::read_f64_le(in, s.w_dec.data, path);
    detail::read_f64_le(in, s.b_dec, path);
    return s;
  }
  GatedSae s;
  s.d_act = d_act;
  s.d_feat = d_feat;
  s.tying = kind == 1 ? Tying::Tied : Tying::Untied;
  s.w_gate = Mat(d_feat, d_act);
  s.b_gate.assign(d_feat, 0.0);
  s.r_mag.assign(d_feat, 0.0);
  s.b_mag.assign(d_feat, 0.0);
  s.w_dec = Mat(d_feat, d_act);
  s.b_dec.assign(d_act, 0.0);
  detail::read_f64_le(in, s.w_gate.data, path);
  detail::read_f64_le(in, s.b_gate, path);
  detail::read_f64_le(in, s.r_mag, path);
  detail::read_f64_le(in, s.b_mag, path);
  if (s.tying == Tying::Untied) {
    s.w_mag_untied = Mat(d_feat, d_act);
    detail::read_f64_le(in, s.w_mag_untied->data, path);
  }
  detail::read_f64_le(in, s.w_dec.data, path);
  detail::read_f64_le(in, s.b_dec, path);
  return s;
}

}  // namespace gdict
