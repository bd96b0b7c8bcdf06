#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gdict/errors.hpp"
#include "gdict/linalg.hpp"
#include "gdict/metrics.hpp"

namespace gdict {

// Inference-time sparse approximation over a frozen dictionary. Nothing in
// this header can see encoder parameters: callers hand over decoder rows and
// the decoder bias only.

struct PursuitResult {
  Vec coeffs;                        // length d_feat, nonnegative under nonneg
  std::vector<std::size_t> support;  // selection order
  Vec residual_norms;                // initial norm, then one entry per selection
};

namespace detail {

inline Vec pursuit_residual(const Mat& dict, std::span<const double> x, const Vec& coeffs,
                            const std::vector<std::size_t>& support) {
  Vec r(x.begin(), x.end());
  for (std::size_t i : support)
    if (coeffs[i] != 0.0) axpy(-coeffs[i], dict.row_span(i), r);
  return r;
}

}  // namespace detail

// Greedy gradient pursuit: pick the atom most positively correlated with the
// residual (most correlated in absolute value when nonneg is off), then move
// all support coefficients along the gradient of the restricted least-squares
// objective with an exact line search, iterated until the restricted
// objective stalls. Under the nonnegativity constraint each step is truncated
// at the first coefficient to reach zero; that coefficient is clamped and
// dropped from further updates within the iteration.
inline PursuitResult gradient_pursuit(const Mat& dictionary, std::span<const double> x,
                                      std::size_t target_k, bool nonneg) {
  require_dims(x.size() == dictionary.cols, "gradient_pursuit: x dimension mismatch");
  if (!all_finite(x)) throw NumericError("gradient_pursuit: non-finite input");
  const std::size_t d_feat = dictionary.rows;
  constexpr double kCorrelationFloor = 1e-12;

  PursuitResult res;
  res.coeffs.assign(d_feat, 0.0);
  Vec r(x.begin(), x.end());
  res.residual_norms.push_back(norm2(r));

  std::vector<std::size_t> active;  // support minus coefficients clamped at zero
  for (std::size_t iter = 0; iter < std::min(target_k, d_feat); ++iter) {
    // Atom selection; lowest index wins exact ties.
    double best = 0.0;
    std::size_t best_i = d_feat;
    for (std::size_t i = 0; i < d_feat; ++i) {
      if (res.coeffs[i] != 0.0 ||
          std::find(res.support.begin(), res.support.end(), i) != res.support.end())
        continue;
      const double c = dot(dictionary.row_span(i), r);
      const double score = nonneg ? c : std::abs(c);
      if (score > best) {
        best = score;
        best_i = i;
      }
    }
    if (best_i == d_feat || best <= kCorrelationFloor) break;
    res.support.push_back(best_i);
    active = res.support;

    // Line-searched gradient updates over the active set, iterated until the
    // restricted objective stops improving.
    double prev_res_sq = norm2_sq(r);
    for (int pass = 0; pass < 512 && !active.empty(); ++pass) {
      Vec g(active.size());
      double g_sq = 0.0;
      for (std::size_t a = 0; a < active.size(); ++a) {
        g[a] = dot(dictionary.row_span(active[a]), r);
        g_sq += g[a] * g[a];
      }
      if (g_sq <= kCorrelationFloor * kCorrelationFloor) break;
      Vec q(x.size(), 0.0);
      for (std::size_t a = 0; a < active.size(); ++a)
        axpy(g[a], dictionary.row_span(active[a]), q);
      const double q_sq = norm2_sq(q);
      if (q_sq <= 0.0) break;
      double step = g_sq / q_sq;

      // Truncate at the first coefficient that would cross zero.
      std::vector<std::size_t> blocked;
      if (nonneg) {
        for (std::size_t a = 0; a < active.size(); ++a) {
          if (g[a] < 0.0) {
            const double t = -res.coeffs[active[a]] / g[a];
            if (t < step) {
              step = t;
              blocked.assign(1, a);
            } else if (t == step && !blocked.empty()) {
              blocked.push_back(a);
            }
          }
        }
      }
      for (std::size_t a = 0; a < active.size(); ++a)
        res.coeffs[active[a]] += step * g[a];
      axpy(-step, q, r);
      if (!blocked.empty()) {
        // Clamp exactly and drop from this iteration's updates.
        for (auto it = blocked.rbegin(); it != blocked.rend(); ++it) {
          res.coeffs[active[*it]] = 0.0;
          active.erase(active.begin() + static_cast<std::ptrdiff_t>(*it));
        }
        r = detail::pursuit_residual(dictionary, x, res.coeffs, res.support);
        prev_res_sq = norm2_sq(r);
        continue;
      }
      const double res_sq = norm2_sq(r);
      if (res_sq >= prev_res_sq * (1.0 - 1e-14)) break;
      prev_res_sq = res_sq;
    }
    if (nonneg) {
      // Truncated steps land on zero only up to rounding.
      for (std::size_t i : res.support)
        if (res.coeffs[i] < 0.0) res.coeffs[i] = 0.0;
    }
    r = detail::pursuit_residual(dictionary, x, res.coeffs, res.support);
    // The line search cannot increase the residual; clamp ulp-level rounding
    // wiggle so the recorded sequence keeps the nonincreasing contract.
    res.residual_norms.push_back(std::min(res.residual_norms.back(), norm2(r)));
  }
  return res;
}

namespace detail {

// Least squares restricted to a support via coordinate descent on the Gram
// system; projected onto the nonnegative orthant when nonneg is set.
inline void support_least_squares(const Mat& dict, std::span<const double> x,
                                  std::span<const std::size_t> support, bool nonneg,
                                  Vec& alpha) {
  const std::size_t k = support.size();
  alpha.assign(k, 0.0);
  Mat gram(k, k);
  Vec b(k);
  for (std::size_t a = 0; a < k; ++a) {
    b[a] = dot(dict.row_span(support[a]), x);
    for (std::size_t c = 0; c < k; ++c)
      gram.at(a, c) = dot(dict.row_span(support[a]), dict.row_span(support[c]));
  }
  constexpr double kTol = 1e-10;
  for (int sweep = 0; sweep < 2000; ++sweep) {
    double max_delta = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
      const double diag = gram.at(a, a);
      if (diag <= 0.0) continue;
      double resid = b[a];
      for (std::size_t c = 0; c < k; ++c) resid -= gram.at(a, c) * alpha[c];
      double next = alpha[a] + resid / diag;
      if (nonneg && next < 0.0) next = 0.0;
      max_delta = std::max(max_delta, std::abs(next - alpha[a]));
      alpha[a] = next;
    }
    if (max_delta < kTol) break;
  }
}

}  // namespace detail

// Small-instance ground truth: enumerates supports and solves each restricted
// (nonnegative) least-squares subproblem. Guarded by the enumeration count.
inline PursuitResult exhaustive_oracle(const Mat& dictionary, std::span<const double> x,
                                       std::size_t target_k, bool nonneg) {
  require_dims(x.size() == dictionary.cols, "exhaustive_oracle: x dimension mismatch");
  if (!all_finite(x)) throw NumericError("exhaustive_oracle: non-finite input");
  const std::size_t d_feat = dictionary.rows;
  const std::size_t k = std::min(target_k, d_feat);

  double combos = 1.0;
  for (std::size_t i = 0; i < k; ++i)
    combos *= static_cast<double>(d_feat - i) / static_cast<double>(i + 1);
  if (combos > 1e5)
    throw ConfigError("exhaustive_oracle: C(" + std::to_string(d_feat) + ", " +
                      std::to_string(k) + ") = " + std::to_string(combos) +
                      " supports exceeds the 1e5 enumeration guard");

  PursuitResult best;
  best.coeffs.assign(d_feat, 0.0);
  best.residual_norms.push_back(norm2(x));
  if (k == 0) return best;

  double best_res_sq = norm2_sq(x);
  bool have_best = false;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  Vec alpha;
  std::vector<std::size_t> best_support;
  Vec best_alpha;
  while (true) {
    detail::support_least_squares(dictionary, x, idx, nonneg, alpha);
    Vec r(x.begin(), x.end());
    for (std::size_t a = 0; a < k; ++a)
      if (alpha[a] != 0.0) axpy(-alpha[a], dictionary.row_span(idx[a]), r);
    const double res_sq = norm2_sq(r);
    if (!have_best || res_sq < best_res_sq) {
      have_best = true;
      best_res_sq = res_sq;
      best_support = idx;
      best_alpha = alpha;
    }
    // Next combination in lexicographic order.
    std::size_t pos = k;
    while (pos > 0 && idx[pos - 1] == d_feat - k + pos - 1) --pos;
    if (pos == 0) break;
    ++idx[pos - 1];
    for (std::size_t j = pos; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
  for (std::size_t a = 0; a < k; ++a) {
    if (best_alpha[a] != 0.0) {
      best.coeffs[best_support[a]] = best_alpha[a];
      best.support.push_back(best_support[a]);
    }
  }
  best.residual_norms.push_back(std::sqrt(best_res_sq));
  return best;
}

struct ItoPoint {
  std::size_t target_k = 0;
  double l0 = 0.0;  // mean strictly positive coefficients per example
  double mse = 0.0;
  double loss_recovered = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  double unused_atom_fraction = 0.0;  // atoms never selected over the eval set
};

namespace detail {

template <typename Encode>
inline std::vector<ItoPoint> ito_sweep_impl(const Mat& w_dec, const Vec& b_dec,
                                            const Mat& eval_x, const EvaluationHost* host,
                                            std::span<const std::size_t> target_ks,
                                            Encode&& encode_one) {
  require_dims(b_dec.size() == w_dec.cols && eval_x.cols == w_dec.cols,
               "ito_sweep: dimension mismatch");
  if (eval_x.rows == 0) throw std::invalid_argument("ito_sweep: empty eval set");
  std::vector<ItoPoint> out;
  Vec xc(w_dec.cols);
  for (std::size_t k : target_ks) {
    Mat recon(eval_x.rows, eval_x.cols);
    Vec nnz(eval_x.rows, 0.0);
    std::vector<std::uint8_t> used(w_dec.rows, 0);
    for (std::size_t r = 0; r < eval_x.rows; ++r) {
      const double* xr = eval_x.row(r);
      for (std::size_t c = 0; c < w_dec.cols; ++c) xc[c] = xr[c] - b_dec[c];
      PursuitResult p = encode_one(w_dec, xc, k);
      Vec xhat = b_dec;
      for (std::size_t i : p.support) {
        if (p.coeffs[i] != 0.0) {
          axpy(p.coeffs[i], w_dec.row_span(i), xhat);
          nnz[r] += 1.0;
          used[i] = 1;
        }
      }
      std::copy(xhat.begin(), xhat.end(), recon.row(r));
    }
    ItoPoint pt;
    pt.target_k = k;
    pt.l0 = pairwise_sum(nnz) / static_cast<double>(eval_x.rows);
    pt.mse = mse(eval_x, recon);
    if (host) pt.loss_recovered = loss_recovered(*host, eval_x, recon);
    try {
      pt.gamma = relative_bias_gamma(eval_x, recon);
    } catch (const NumericError&) {
    }
    std::size_t unused = 0;
    for (auto u : used)
      if (!u) ++unused;
    pt.unused_atom_fraction = static_cast<double>(unused) / static_cast<double>(w_dec.rows);
    out.push_back(pt);
  }
  return out;
}

}  // namespace detail

// Sweeps the target sparsity over a fixed dictionary: every example is
// encoded by nonnegative gradient pursuit and decoded with the frozen
// decoder, so the whole curve comes from a single trained model.
inline std::vector<ItoPoint> ito_sweep(const Mat& w_dec, const Vec& b_dec,
                                       const Mat& eval_x, const EvaluationHost* host,
                                       std::span<const std::size_t> target_ks,
                                       bool nonneg = true) {
  return detail::ito_sweep_impl(
      w_dec, b_dec, eval_x, host, target_ks,
      [nonneg](const Mat& d, std::span<const double> x, std::size_t k) {
        return gradient_pursuit(d, x, k, nonneg);
      });
}

// Same sweep with the exhaustive oracle as the encoder; subject to the
// oracle's enumeration guard.
inline std::vector<ItoPoint> ito_sweep_oracle(const Mat& w_dec, const Vec& b_dec,
                                              const Mat& eval_x, const EvaluationHost* host,
                                              std::span<const std::size_t> target_ks,
                                              bool nonneg = true) {
  return detail::ito_sweep_impl(
      w_dec, b_dec, eval_x, host, target_ks,
      [nonneg](const Mat& d, std::span<const double> x, std::size_t k) {
        return exhaustive_oracle(d, x, k, nonneg);
      });
}

}  // namespace gdict
