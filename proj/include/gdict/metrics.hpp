#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gdict/errors.hpp"
#include "gdict/linalg.hpp"
#include "gdict/prng.hpp"
#include "gdict/sae.hpp"

namespace gdict {

// Frozen random readout standing in for the downstream model that SAE
// reconstructions get spliced into. Labels are drawn once per eval set from
// softmax(w_host x / temperature) on the clean activations, so the identity
// splice attains the best possible cross-entropy and the zero splice the
// ignorant one.
struct EvaluationHost {
  Mat w_host;               // V x d_act
  std::vector<int> labels;  // one per eval example
  double temperature = 1.0;
};

struct MetricsRecord {
  std::uint64_t step = 0;
  double lambda = 0.0;
  double l0 = 0.0;
  double mse = 0.0;
  double loss_recovered = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  double dead_fraction = 0.0;
  std::optional<double> dict_recovery;
  double wallclock_s = 0.0;
};

namespace detail {

inline void softmax_logits(const Mat& w_host, std::span<const double> p,
                           double temperature, Vec& logits) {
  logits.resize(w_host.rows);
  for (std::size_t v = 0; v < w_host.rows; ++v)
    logits[v] = dot(w_host.row_span(v), p) / temperature;
}

inline double log_softmax_at(const Vec& logits, int label) {
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return logits[static_cast<std::size_t>(label)] - mx - std::log(sum);
}

}  // namespace detail

inline EvaluationHost make_host(const Mat& eval_x, std::size_t num_classes,
                                double temperature, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("make_host: need at least 2 classes");
  if (!(temperature > 0.0)) throw ConfigError("make_host: temperature must be > 0");
  EvaluationHost h;
  h.temperature = temperature;
  h.w_host = Mat(num_classes, eval_x.cols);
  CounterRng root = CounterRng(seed).split(0x4057);
  for (std::size_t v = 0; v < num_classes; ++v) {
    CounterRng rng = root.split(v);
    for (std::size_t k = 0; k < eval_x.cols; ++k) h.w_host.at(v, k) = rng.normal();
  }
  // Labels sampled from the host's own posterior on the clean activations.
  CounterRng label_rng = root.split(num_classes + 1);
  h.labels.resize(eval_x.rows);
  Vec logits;
  for (std::size_t r = 0; r < eval_x.rows; ++r) {
    detail::softmax_logits(h.w_host, eval_x.row_span(r), temperature, logits);
    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double u = label_rng.split(r).next_unit() * z;
    double acc = 0.0;
    int chosen = static_cast<int>(num_classes) - 1;
    for (std::size_t v = 0; v < num_classes; ++v) {
      acc += std::exp(logits[v] - mx);
      if (u < acc) {
        chosen = static_cast<int>(v);
        break;
      }
    }
    h.labels[r] = chosen;
  }
  return h;
}

// Mean cross-entropy of the host readout over a set of (possibly spliced)
// activations. Reduction is pairwise-summed for order-independence.
inline double mean_ce(const EvaluationHost& host, const Mat& points) {
  require_dims(points.rows == host.labels.size() && points.cols == host.w_host.cols,
               "mean_ce: eval set shape mismatch");
  if (points.rows == 0) throw std::invalid_argument("mean_ce: empty eval set");
  Vec ces(points.rows);
  Vec logits;
  for (std::size_t r = 0; r < points.rows; ++r) {
    detail::softmax_logits(host.w_host, points.row_span(r), host.temperature, logits);
    ces[r] = -detail::log_softmax_at(logits, host.labels[r]);
  }
  return pairwise_sum(ces) / static_cast<double>(points.rows);
}

// 1 - (CE(splice) - CE(identity)) / (CE(zero) - CE(identity)).
inline double loss_recovered(const EvaluationHost& host, const Mat& x_clean,
                             const Mat& x_spliced) {
  const double ce_id = mean_ce(host, x_clean);
  Mat zeros(x_clean.rows, x_clean.cols, 0.0);
  const double ce_zero = mean_ce(host, zeros);
  const double ce_sae = mean_ce(host, x_spliced);
  if (ce_zero == ce_id)
    throw NumericError("loss_recovered: degenerate host, CE(zero) == CE(identity)");
  return 1.0 - (ce_sae - ce_id) / (ce_zero - ce_id);
}

// Mean count of strictly positive activations per example.
inline double l0(const std::vector<Vec>& features_per_example) {
  if (features_per_example.empty()) throw std::invalid_argument("l0: empty eval set");
  Vec counts(features_per_example.size());
  for (std::size_t r = 0; r < features_per_example.size(); ++r) {
    std::size_t c = 0;
    for (double f : features_per_example[r])
      if (f > 0.0) ++c;
    counts[r] = static_cast<double>(c);
  }
  return pairwise_sum(counts) / static_cast<double>(counts.size());
}

inline double mse(const Mat& x, const Mat& xhat) {
  require_dims(x.same_shape(xhat), "mse: shape mismatch");
  if (x.rows == 0) throw std::invalid_argument("mse: empty eval set");
  Vec errs(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double e = 0.0;
    const double* a = x.row(r);
    const double* b = xhat.row(r);
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double d = a[k] - b[k];
      e += d * d;
    }
    errs[r] = e;
  }
  return pairwise_sum(errs) / static_cast<double>(x.rows);
}

// Relative reconstruction bias: gamma = E|xhat|^2 / E[xhat.x]. Values below 1
// indicate shrinkage. Also evaluates the equivalent form
//   2 E|xhat|^2 / (E|xhat|^2 + E|x|^2 - E|xhat - x|^2)
// and insists the two agree; they differ only by floating-point rounding.
inline double relative_bias_gamma(const Mat& x, const Mat& xhat) {
  require_dims(x.same_shape(xhat), "relative_bias_gamma: shape mismatch");
  if (x.rows == 0) throw std::invalid_argument("relative_bias_gamma: empty eval set");
  Vec rr(x.rows), rx(x.rows), xx(x.rows), ee(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* a = x.row(r);
    const double* b = xhat.row(r);
    double s_rr = 0.0, s_rx = 0.0, s_xx = 0.0, s_ee = 0.0;
    for (std::size_t k = 0; k < x.cols; ++k) {
      s_rr += b[k] * b[k];
      s_rx += b[k] * a[k];
      s_xx += a[k] * a[k];
      const double d = b[k] - a[k];
      s_ee += d * d;
    }
    rr[r] = s_rr;
    rx[r] = s_rx;
    xx[r] = s_xx;
    ee[r] = s_ee;
  }
  const double n = static_cast<double>(x.rows);
  const double m_rr = pairwise_sum(rr) / n;
  const double m_rx = pairwise_sum(rx) / n;
  const double m_xx = pairwise_sum(xx) / n;
  const double m_ee = pairwise_sum(ee) / n;
  if (m_rx == 0.0)
    throw NumericError("relative_bias_gamma: E[xhat.x] is zero");
  const double gamma = m_rr / m_rx;
  const double denom2 = m_rr + m_xx - m_ee;
  if (denom2 == 0.0)
    throw NumericError("relative_bias_gamma: degenerate denominator in analytic form");
  const double gamma2 = 2.0 * m_rr / denom2;
  const double tol = 1e-9 * std::max({1.0, std::abs(gamma), std::abs(gamma2)});
  if (std::abs(gamma - gamma2) > tol)
    throw NumericError("relative_bias_gamma: analytic forms disagree beyond tolerance");
  return gamma;
}

// Greedy one-to-one matching of true directions to learned dictionary rows by
// descending absolute cosine similarity; sign is not identifiable, hence the
// absolute value. Returns the mean matched |cosine| over the true directions.
inline double dict_recovery(const Mat& learned_w_dec, const Mat& true_directions) {
  require_dims(learned_w_dec.cols == true_directions.cols,
               "dict_recovery: dimension mismatch");
  const std::size_t n_true = true_directions.rows;
  const std::size_t n_learned = learned_w_dec.rows;
  if (n_true == 0 || n_learned == 0) return 0.0;
  Mat cos_abs(n_true, n_learned);
  for (std::size_t t = 0; t < n_true; ++t) {
    const double tn = norm2(true_directions.row_span(t));
    for (std::size_t l = 0; l < n_learned; ++l) {
      const double ln = norm2(learned_w_dec.row_span(l));
      const double denom = tn * ln;
      cos_abs.at(t, l) =
          denom > 0.0
              ? std::abs(dot(true_directions.row_span(t), learned_w_dec.row_span(l))) / denom
              : 0.0;
    }
  }
  std::vector<bool> t_used(n_true, false), l_used(n_learned, false);
  const std::size_t matches = std::min(n_true, n_learned);
  double total = 0.0;
  for (std::size_t m = 0; m < matches; ++m) {
    double best = -1.0;
    std::size_t bt = 0, bl = 0;
    for (std::size_t t = 0; t < n_true; ++t) {
      if (t_used[t]) continue;
      for (std::size_t l = 0; l < n_learned; ++l) {
        if (l_used[l]) continue;
        if (cos_abs.at(t, l) > best) {
          best = cos_abs.at(t, l);
          bt = t;
          bl = l;
        }
      }
    }
    t_used[bt] = true;
    l_used[bl] = true;
    total += best;
  }
  return total / static_cast<double>(n_true);
}

// Records not dominated by any other; dominated means another record has
// l0 <= and loss_recovered >= with at least one strict.
inline std::vector<MetricsRecord> pareto_frontier(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("pareto_frontier: empty input");
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < records.size() && !dominated; ++j) {
      if (i == j) continue;
      const bool le = records[j].l0 <= records[i].l0;
      const bool ge = records[j].loss_recovered >= records[i].loss_recovered;
      const bool strict = records[j].l0 < records[i].l0 ||
                          records[j].loss_recovered > records[i].loss_recovered;
      if (le && ge && strict) dominated = true;
    }
    if (!dominated) out.push_back(records[i]);
  }
  return out;
}

// Per-feature activity log: a feature is alive in a window iff it produced a
// strictly positive activation on at least one batch inside it.
struct FeatureActivity {
  std::uint64_t steps_seen = 0;
  std::vector<std::uint64_t> last_active;  // 1-based step index; 0 = never

  explicit FeatureActivity(std::size_t d_feat) : last_active(d_feat, 0) {}

  void record_step(std::span<const std::uint8_t> active_any) {
    ++steps_seen;
    for (std::size_t i = 0; i < last_active.size(); ++i)
      if (active_any[i]) last_active[i] = steps_seen;
  }
};

inline double dead_fraction(const FeatureActivity& history, std::uint64_t window) {
  if (window == 0) throw std::invalid_argument("dead_fraction: window must be >= 1");
  if (history.steps_seen < window)
    throw std::logic_error("dead_fraction: history covers fewer steps than the window");
  std::size_t dead = 0;
  for (std::uint64_t last : history.last_active)
    if (last <= history.steps_seen - window) ++dead;
  return static_cast<double>(dead) / static_cast<double>(history.last_active.size());
}

// ---------------------------------------------------------------------------
// Whole-model evaluation
// ---------------------------------------------------------------------------

struct EvalContext {
  Mat eval_x;
  EvaluationHost host;
  std::optional<Mat> true_directions;  // enables dict_recovery on synthetic data
};

inline MetricsRecord evaluate(const SaeModel& model, const EvalContext& ctx,
                              double lambda, std::uint64_t step,
                              const FeatureActivity* activity = nullptr,
                              std::uint64_t activity_window = 0) {
  MetricsRecord rec;
  rec.step = step;
  rec.lambda = lambda;
  const std::size_t n = ctx.eval_x.rows;
  std::vector<Vec> feats(n);
  Mat recon(n, ctx.eval_x.cols);
  std::vector<std::uint8_t> ever_active(d_feat_of(model), 0);
  for (std::size_t r = 0; r < n; ++r) {
    feats[r] = encode(model, ctx.eval_x.row_span(r)).features;
    for (std::size_t i = 0; i < feats[r].size(); ++i)
      if (feats[r][i] > 0.0) ever_active[i] = 1;
    Vec xhat = decode(decoder_weights(model), decoder_bias(model), feats[r]);
    std::copy(xhat.begin(), xhat.end(), recon.row(r));
  }
  rec.l0 = l0(feats);
  rec.mse = mse(ctx.eval_x, recon);
  rec.loss_recovered = loss_recovered(ctx.host, ctx.eval_x, recon);
  try {
    rec.gamma = relative_bias_gamma(ctx.eval_x, recon);
  } catch (const NumericError&) {
    rec.gamma = std::numeric_limits<double>::quiet_NaN();
  }
  if (activity && activity->steps_seen >= activity_window && activity_window > 0) {
    rec.dead_fraction = dead_fraction(*activity, activity_window);
  } else {
    // No training history: report the fraction never active on this eval set.
    std::size_t dead = 0;
    for (auto a : ever_active)
      if (!a) ++dead;
    rec.dead_fraction = static_cast<double>(dead) / static_cast<double>(ever_active.size());
  }
  if (ctx.true_directions)
    rec.dict_recovery = dict_recovery(decoder_weights(model), *ctx.true_directions);
  return rec;
}

// ---------------------------------------------------------------------------
// CSV output: fixed header, one row per evaluation.
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsCsvHeader =
    "step,lambda,l0,mse,loss_recovered,gamma,dead_fraction,dict_recovery,wallclock_s";

inline std::string format_csv_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_metrics_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.step);
  row += ',';
  row += format_csv_value(r.lambda);
  row += ',';
  row += format_csv_value(r.l0);
  row += ',';
  row += format_csv_value(r.mse);
  row += ',';
  row += format_csv_value(r.loss_recovered);
  row += ',';
  row += format_csv_value(r.gamma);
  row += ',';
  row += format_csv_value(r.dead_fraction);
  row += ',';
  if (r.dict_recovery) row += format_csv_value(*r.dict_recovery);
  row += ',';
  row += format_csv_value(r.wallclock_s);
  return row;
}

inline void write_metrics_csv(const std::string& path,
                              std::span<const MetricsRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out << kMetricsCsvHeader << '\n';
  for (const auto& r : records) out << format_metrics_row(r) << '\n';
  out.close();
  if (!out) throw FormatError("write failed: " + path);
}

}  // namespace gdict
