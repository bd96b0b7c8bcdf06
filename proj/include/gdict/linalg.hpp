#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace gdict {

using Vec = std::vector<double>;

// Dense row-major matrix. Rows are the natural unit everywhere in this
// library (dictionary elements, encoder directions), so only row views are
// provided.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<double> row_span(std::size_t i) { return {row(i), cols}; }
  std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2_sq(std::span<const double> a) { return dot(a, a); }
inline double norm2(std::span<const double> a) { return std::sqrt(norm2_sq(a)); }

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
  for (double& v : x) v *= alpha;
}

inline void fill(std::span<double> x, double v) {
  for (double& e : x) e = v;
}

// Sum with a fixed pairwise reduction order: deterministic and more accurate
// than left-to-right accumulation on long metric reductions.
inline double pairwise_sum(std::span<const double> x) {
  if (x.size() <= 8) {
    double acc = 0.0;
    for (double v : x) acc += v;
    return acc;
  }
  const std::size_t half = x.size() / 2;
  return pairwise_sum(x.subspan(0, half)) + pairwise_sum(x.subspan(half));
}

inline bool all_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void require_dims(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace gdict
