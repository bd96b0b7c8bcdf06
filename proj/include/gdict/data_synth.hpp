#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gdict/bytes.hpp"
#include "gdict/errors.hpp"
#include "gdict/linalg.hpp"
#include "gdict/prng.hpp"

namespace gdict {

// Active-feature coefficient magnitudes: uniform on [lo, hi], hi >= lo > 0.
// lo == hi gives a constant magnitude.
struct MagnitudeDist {
  double lo = 0.5;
  double hi = 1.5;
};

// Known sparse linear generator: each sample is
//   x = bias + sum_i c_i * directions[i] + noise,
// where feature i fires independently with fire_prob and c_i is drawn from
// magnitude_dist when it does. Having more true features than activation
// dimensions puts the generator in superposition.
struct GroundTruthModel {
  std::size_t d_act = 0;
  std::size_t d_true = 0;
  Mat directions;  // d_true x d_act, unit-norm rows
  double fire_prob = 0.1;
  MagnitudeDist magnitude_dist;
  double noise_std = 0.0;
  Vec bias;  // length d_act
  std::uint64_t seed = 0;
};

struct ActivationBatch {
  Mat data;  // batch_size x d_act
  // Present only for synthetic data: per-row sparse list of (feature, c_i).
  std::optional<std::vector<std::vector<std::pair<std::uint32_t, double>>>> ground_truth_coeffs;
};

struct Toy1dSample {
  double value = 0.0;
  bool is_on = false;
};

inline GroundTruthModel gen_ground_truth(std::size_t d_act, std::size_t d_true,
                                         double fire_prob,
                                         MagnitudeDist magnitude_dist,
                                         double noise_std, std::uint64_t seed) {
  if (d_act < 1 || d_true <= d_act)
    throw ConfigError("gen_ground_truth: requires d_true > d_act >= 1");
  if (!(fire_prob > 0.0 && fire_prob < 1.0))
    throw ConfigError("gen_ground_truth: fire_prob must lie in (0, 1)");
  if (!(magnitude_dist.lo > 0.0 && magnitude_dist.hi >= magnitude_dist.lo))
    throw ConfigError("gen_ground_truth: magnitude range must satisfy 0 < lo <= hi");
  if (noise_std < 0.0) throw ConfigError("gen_ground_truth: noise_std must be >= 0");

  GroundTruthModel m;
  m.d_act = d_act;
  m.d_true = d_true;
  m.fire_prob = fire_prob;
  m.magnitude_dist = magnitude_dist;
  m.noise_std = noise_std;
  m.bias.assign(d_act, 0.0);
  m.seed = seed;
  m.directions = Mat(d_true, d_act);
  // Domain-separated stream: the same numeric seed must never reproduce rows
  // drawn for other purposes (SAE init, batch sampling).
  CounterRng root = CounterRng(seed).split(0xD19E);
  for (std::size_t i = 0; i < d_true; ++i) {
    CounterRng row_rng = root.split(i);
    row_rng.unit_sphere(m.directions.row_span(i));
  }
  return m;
}

namespace detail {

inline void sample_row(const GroundTruthModel& m, CounterRng rng, double* out,
                       std::vector<std::pair<std::uint32_t, double>>* coeffs) {
  for (std::size_t k = 0; k < m.d_act; ++k) out[k] = m.bias[k];
  for (std::size_t i = 0; i < m.d_true; ++i) {
    if (rng.next_unit() < m.fire_prob) {
      const double c = rng.uniform(m.magnitude_dist.lo, m.magnitude_dist.hi);
      axpy(c, m.directions.row_span(i), {out, m.d_act});
      if (coeffs) coeffs->emplace_back(static_cast<std::uint32_t>(i), c);
    }
  }
  if (m.noise_std > 0.0) {
    for (std::size_t k = 0; k < m.d_act; ++k) out[k] += m.noise_std * rng.normal();
  }
}

}  // namespace detail

// One private sub-stream per row, so a row's content depends only on
// (model, seed, row index).
inline ActivationBatch sample_batch(const GroundTruthModel& m, std::size_t batch_size,
                                    std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("sample_batch: batch_size must be >= 1");
  ActivationBatch b;
  b.data = Mat(batch_size, m.d_act);
  b.ground_truth_coeffs.emplace(batch_size);
  CounterRng root = CounterRng(seed).split(0x5A3B);
  for (std::size_t r = 0; r < batch_size; ++r) {
    detail::sample_row(m, root.split(r), b.data.row(r), &(*b.ground_truth_coeffs)[r]);
  }
  return b;
}

// Sparse-but-continuous 1-D mixture: on-samples ~ N(mu_on, sigma_on^2),
// off-samples ~ N(0, sigma_off^2).
inline std::vector<Toy1dSample> toy1d_sample(std::size_t n, double p_on = 0.5,
                                             double mu_on = 2.0, double sigma_on = 0.5,
                                             double sigma_off = 1.0,
                                             std::uint64_t seed = 0) {
  if (n < 1) throw ConfigError("toy1d_sample: n must be >= 1");
  if (!(p_on > 0.0 && p_on <= 1.0)) throw ConfigError("toy1d_sample: p_on must lie in (0, 1]");
  if (!(sigma_on > 0.0) || !(sigma_off > 0.0))
    throw ConfigError("toy1d_sample: sigmas must be > 0");
  std::vector<Toy1dSample> out(n);
  CounterRng root = CounterRng(seed).split(0x701D);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = root.split(i);
    const bool on = rng.next_unit() < p_on;
    out[i].is_on = on;
    out[i].value = on ? rng.normal(mu_on, sigma_on) : rng.normal(0.0, sigma_off);
  }
  return out;
}

// Fixed 1-D reconstruction maps used by the toy-model demonstration.
inline double relu_map(double v, double threshold, double magnitude) {
  return v > threshold ? magnitude * (v - threshold) : 0.0;
}
inline double jumprelu_map(double v, double threshold, double magnitude, double origin) {
  return v > threshold ? magnitude * (v - origin) : 0.0;
}

// ---------------------------------------------------------------------------
// Activation file format ("GDAC"):
//   bytes 0..3   magic 'G','D','A','C'
//   bytes 4..7   format version, u32 little-endian, = 1
//   bytes 8..11  d_act, u32 little-endian
//   bytes 12..19 row_count, u64 little-endian
//   then row_count * d_act float32 values, little-endian, row-major.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kActivationFormatVersion = 1;
inline constexpr std::size_t kActivationHeaderBytes = 20;

class ActivationFileWriter {
 public:
  ActivationFileWriter(const std::string& path, std::size_t d_act)
      : path_(path), d_act_(d_act), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw FormatError("cannot open for writing: " + path);
    std::string header = "GDAC";
    detail::put_u32(header, kActivationFormatVersion);
    detail::put_u32(header, static_cast<std::uint32_t>(d_act));
    detail::put_u64(header, 0);  // row count, patched on close
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
  }

  ~ActivationFileWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void append(const Mat& batch) {
    if (batch.cols != d_act_)
      throw std::invalid_argument("ActivationFileWriter: batch d_act mismatch");
    std::vector<unsigned char> buf(batch.rows * d_act_ * 4);
    std::size_t o = 0;
    for (std::size_t i = 0; i < batch.rows * d_act_; ++i) {
      const float f = static_cast<float>(batch.data[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      buf[o++] = static_cast<unsigned char>(bits & 0xFF);
      buf[o++] = static_cast<unsigned char>((bits >> 8) & 0xFF);
      buf[o++] = static_cast<unsigned char>((bits >> 16) & 0xFF);
      buf[o++] = static_cast<unsigned char>((bits >> 24) & 0xFF);
    }
    out_.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size()));
    rows_ += batch.rows;
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    out_.seekp(12);
    std::string count;
    detail::put_u64(count, rows_);
    out_.write(count.data(), 8);
    out_.close();
    if (!out_) throw FormatError("write failed: " + path_);
  }

  std::uint64_t rows_written() const { return rows_; }

 private:
  std::string path_;
  std::size_t d_act_;
  std::ofstream out_;
  std::uint64_t rows_ = 0;
  bool closed_ = false;
};

class ActivationFileReader {
 public:
  explicit ActivationFileReader(const std::string& path) : path_(path) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw FormatError("cannot stat: " + path);
    in_.open(path, std::ios::binary);
    if (!in_) throw FormatError("cannot open: " + path);
    unsigned char header[kActivationHeaderBytes];
    if (size < kActivationHeaderBytes || !in_.read(reinterpret_cast<char*>(header), kActivationHeaderBytes))
      throw FormatError(path + ": truncated header, expected " +
                        std::to_string(kActivationHeaderBytes) + " bytes, file has " +
                        std::to_string(size));
    if (std::memcmp(header, "GDAC", 4) != 0)
      throw FormatError(path + ": bad magic at byte offset 0");
    const std::uint32_t version = detail::get_u32(header + 4);
    if (version != kActivationFormatVersion)
      throw FormatError(path + ": unsupported version " + std::to_string(version) +
                        " at byte offset 4");
    d_act_ = detail::get_u32(header + 8);
    rows_total_ = detail::get_u64(header + 12);
    if (d_act_ == 0) throw FormatError(path + ": d_act is 0 at byte offset 8");
    const std::uint64_t expected = kActivationHeaderBytes + 4ull * d_act_ * rows_total_;
    if (size != expected)
      throw FormatError(path + ": size mismatch, expected " + std::to_string(expected) +
                        " bytes for " + std::to_string(rows_total_) + " rows, file has " +
                        std::to_string(size));
  }

  std::size_t d_act() const { return d_act_; }
  std::uint64_t rows_total() const { return rows_total_; }
  std::uint64_t rows_remaining() const { return rows_total_ - rows_read_; }

  // Reads up to max_rows rows; an empty batch signals end of stream.
  Mat read_batch(std::size_t max_rows) {
    const std::size_t n = static_cast<std::size_t>(
        std::min<std::uint64_t>(max_rows, rows_remaining()));
    Mat out(n, d_act_);
    if (n == 0) return out;
    std::vector<unsigned char> buf(n * d_act_ * 4);
    if (!in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw FormatError(path_ + ": short read at byte offset " +
                        std::to_string(kActivationHeaderBytes + 4ull * d_act_ * rows_read_));
    for (std::size_t i = 0; i < n * d_act_; ++i) {
      const std::uint32_t bits = detail::get_u32(buf.data() + 4 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      out.data[i] = f;
    }
    rows_read_ += n;
    return out;
  }

  void rewind() {
    in_.clear();
    in_.seekg(kActivationHeaderBytes);
    rows_read_ = 0;
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t d_act_ = 0;
  std::uint64_t rows_total_ = 0;
  std::uint64_t rows_read_ = 0;
};

inline void write_activations(const std::string& path, std::span<const Mat> batches) {
  std::size_t d_act = batches.empty() ? 0 : batches[0].cols;
  for (const Mat& b : batches)
    if (b.cols != d_act) throw std::invalid_argument("write_activations: mixed d_act");
  // An empty batch list still produces a valid file; d_act falls back to 1.
  ActivationFileWriter w(path, d_act == 0 ? 1 : d_act);
  for (const Mat& b : batches) w.append(b);
  w.close();
}

inline Mat read_all_activations(const std::string& path) {
  ActivationFileReader r(path);
  return r.read_batch(static_cast<std::size_t>(r.rows_total()));
}

// ---------------------------------------------------------------------------
// Row streams
// ---------------------------------------------------------------------------

// Single-consumer stream of activation rows.
class RowSource {
 public:
  virtual ~RowSource() = default;
  virtual std::size_t dim() const = 0;
  // Fills out with the next row; false once the stream is exhausted.
  virtual bool next(std::span<double> out) = 0;
};

class MemorySource final : public RowSource {
 public:
  explicit MemorySource(Mat rows) : rows_(std::move(rows)) {}
  std::size_t dim() const override { return rows_.cols; }
  bool next(std::span<double> out) override {
    if (pos_ >= rows_.rows) return false;
    const double* r = rows_.row(pos_++);
    std::copy(r, r + rows_.cols, out.begin());
    return true;
  }
  void rewind() { pos_ = 0; }

 private:
  Mat rows_;
  std::size_t pos_ = 0;
};

// Endless synthetic stream; row r is drawn from sub-stream r of the seed.
class GeneratorSource final : public RowSource {
 public:
  GeneratorSource(GroundTruthModel model, std::uint64_t seed)
      : model_(std::move(model)), root_(CounterRng(seed).split(0x5A3B)) {}
  std::size_t dim() const override { return model_.d_act; }
  bool next(std::span<double> out) override {
    detail::sample_row(model_, root_.split(row_index_++), out.data(), nullptr);
    return true;
  }

 private:
  GroundTruthModel model_;
  CounterRng root_;
  std::uint64_t row_index_ = 0;
};

class FileRowSource final : public RowSource {
 public:
  explicit FileRowSource(const std::string& path, bool cycle = false)
      : reader_(path), cycle_(cycle) {
    if (cycle_ && reader_.rows_total() == 0)
      throw FormatError(path + ": cannot cycle over an empty activation file");
  }
  std::size_t dim() const override { return reader_.d_act(); }
  bool next(std::span<double> out) override {
    if (buf_pos_ >= buf_.rows) {
      buf_ = reader_.read_batch(kChunk);
      buf_pos_ = 0;
      if (buf_.rows == 0) {
        if (!cycle_) return false;
        reader_.rewind();
        buf_ = reader_.read_batch(kChunk);
        if (buf_.rows == 0) return false;
      }
    }
    const double* r = buf_.row(buf_pos_++);
    std::copy(r, r + buf_.cols, out.begin());
    return true;
  }

 private:
  static constexpr std::size_t kChunk = 4096;
  ActivationFileReader reader_;
  bool cycle_;
  Mat buf_;
  std::size_t buf_pos_ = 0;
};

// Reservoir shuffle: holds buffer_rows rows, emits a uniformly chosen one and
// replaces it with the next source row. Constant memory, emits every source
// row exactly once per pass, and degrades to the identity when buffer_rows=1.
class ShuffledSource final : public RowSource {
 public:
  ShuffledSource(RowSource& source, std::size_t buffer_rows, std::uint64_t seed)
      : source_(source), buffer_rows_(buffer_rows), rng_(seed) {
    if (buffer_rows < 1) throw ConfigError("shuffled_stream: buffer_rows must be >= 1");
  }

  std::size_t dim() const override { return source_.dim(); }

  bool next(std::span<double> out) override {
    if (!primed_) prime();
    if (count_ == 0) return false;
    const std::size_t j = static_cast<std::size_t>(rng_.below(count_));
    double* slot = buffer_.data() + j * dim_;
    std::copy(slot, slot + dim_, out.begin());
    if (source_.next({slot, dim_})) return true;
    // Source exhausted: shrink the reservoir (swap-remove).
    const double* last = buffer_.data() + (count_ - 1) * dim_;
    if (j != count_ - 1) std::copy(last, last + dim_, slot);
    --count_;
    return true;
  }

 private:
  void prime() {
    primed_ = true;
    dim_ = source_.dim();
    buffer_.resize(buffer_rows_ * dim_);
    while (count_ < buffer_rows_ &&
           source_.next({buffer_.data() + count_ * dim_, dim_}))
      ++count_;
    buffer_.resize(count_ * dim_);
  }

  RowSource& source_;
  std::size_t buffer_rows_;
  CounterRng rng_;
  bool primed_ = false;
  std::size_t dim_ = 0;
  std::vector<double> buffer_;
  std::size_t count_ = 0;
};

}  // namespace gdict
