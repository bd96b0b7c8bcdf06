#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gdict/data_synth.hpp"
#include "gdict/errors.hpp"
#include "gdict/linalg.hpp"
#include "gdict/metrics.hpp"
#include "gdict/prng.hpp"
#include "gdict/sae.hpp"

namespace gdict {

struct AblationFlags {
  bool unfreeze_decoder = false;  // let the auxiliary term train the decoder
  bool no_rmag = false;           // pin the magnitude rescale at zero
  bool untied_encoders = false;   // fully separate gate and magnitude weights
};

struct TrainConfig {
  double lambda = 0.01;
  double lr = 3e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 4096;
  std::uint64_t total_steps = 10000;
  std::uint64_t warmup_steps = 1000;
  std::uint64_t resample_every = 0;  // 0 disables resampling
  std::uint64_t dead_window = 2000;
  double resample_lr_factor = 0.1;
  std::uint64_t resample_warmup_steps = 1000;
  AblationFlags ablation;
  bool normalize_recon_by_input_norm = false;
  bool freeze_decoder = false;  // hold w_dec and b_dec fixed (demo setups)
  std::uint64_t metrics_every = 1000;
  std::uint64_t checkpoint_every = 0;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lambda >= 0.0)) throw ConfigError("config: lambda must be >= 0");
  if (!(c.lr > 0.0)) throw ConfigError("config: lr must be > 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) throw ConfigError("config: beta1 must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("config: beta2 must lie in [0, 1)");
  if (!(c.eps > 0.0)) throw ConfigError("config: eps must be > 0");
  if (c.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (c.dead_window < 1) throw ConfigError("config: dead_window must be >= 1");
  if (!(c.resample_lr_factor > 0.0 && c.resample_lr_factor <= 1.0))
    throw ConfigError("config: resample_lr_factor must lie in (0, 1]");
  if (c.resample_warmup_steps < 1)
    throw ConfigError("config: resample_warmup_steps must be >= 1");
}

struct LossBreakdown {
  double total = 0.0;
  double recon = 0.0;
  double sparsity = 0.0;
  double aux = 0.0;  // gated only
};

struct BaselineGrads {
  Mat w_enc;
  Vec b_enc;
  Mat w_dec;
  Vec b_dec;
};

struct GatedGrads {
  Mat w_gate;
  Vec b_gate;
  Vec r_mag;
  Vec b_mag;
  std::optional<Mat> w_mag_untied;
  Mat w_dec;
  Vec b_dec;
};

// Extra per-batch observations the training loop needs.
struct BatchExtras {
  Vec per_example_loss;
  std::vector<std::uint8_t> feature_active;  // strictly positive on any example
};

inline BaselineGrads zero_grads_like(const BaselineSae& s) {
  return {Mat(s.d_feat, s.d_act), Vec(s.d_feat, 0.0), Mat(s.d_feat, s.d_act),
          Vec(s.d_act, 0.0)};
}

inline GatedGrads zero_grads_like(const GatedSae& s) {
  GatedGrads g{Mat(s.d_feat, s.d_act), Vec(s.d_feat, 0.0), Vec(s.d_feat, 0.0),
               Vec(s.d_feat, 0.0),     std::nullopt,       Mat(s.d_feat, s.d_act),
               Vec(s.d_act, 0.0)};
  if (s.tying == Tying::Untied) g.w_mag_untied = Mat(s.d_feat, s.d_act);
  return g;
}

// ---------------------------------------------------------------------------
// Losses and closed-form gradients. All loss terms are batch means, and the
// ReLU/Heaviside subgradient at an exact kink is taken as zero.
// ---------------------------------------------------------------------------

// total = |x - xhat|^2 + lambda |f|_1, with the reconstruction term divided
// by the batch mean input norm when normalize_recon is set.
inline LossBreakdown baseline_loss_and_grads(const BaselineSae& sae, const Mat& x,
                                             double lambda, bool normalize_recon,
                                             BaselineGrads* grads,
                                             BatchExtras* extras = nullptr) {
  require_dims(x.cols == sae.d_act, "baseline_loss: batch dimension mismatch");
  if (x.rows == 0) throw std::invalid_argument("baseline_loss: empty batch");
  if (lambda < 0.0) throw std::invalid_argument("baseline_loss: lambda must be >= 0");
  const std::size_t batch = x.rows;
  const std::size_t d_act = sae.d_act;
  const std::size_t d_feat = sae.d_feat;

  double recon_scale = 1.0;
  if (normalize_recon) {
    double mean_norm = 0.0;
    for (std::size_t r = 0; r < batch; ++r) mean_norm += norm2(x.row_span(r));
    mean_norm /= static_cast<double>(batch);
    if (mean_norm == 0.0)
      throw NumericError("baseline_loss: zero-norm batch with normalized reconstruction");
    recon_scale = 1.0 / mean_norm;
  }

  if (grads) *grads = zero_grads_like(sae);
  if (extras) {
    extras->per_example_loss.assign(batch, 0.0);
    extras->feature_active.assign(d_feat, 0);
  }

  LossBreakdown out;
  Vec xc(d_act), f(d_feat), pre(d_feat), xhat(d_act), gxhat(d_act), gpre(d_feat);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = x.row(r);
    for (std::size_t k = 0; k < d_act; ++k) xc[k] = xr[k] - sae.b_dec[k];
    for (std::size_t i = 0; i < d_feat; ++i) {
      pre[i] = detail::affine_row(sae.w_enc.row_span(i), xc, sae.b_enc[i]);
      f[i] = pre[i] > 0.0 ? pre[i] : 0.0;
    }
    xhat = sae.b_dec;
    double l1 = 0.0;
    for (std::size_t i = 0; i < d_feat; ++i) {
      if (f[i] > 0.0) {
        axpy(f[i], sae.w_dec.row_span(i), xhat);
        l1 += f[i];
        if (extras) extras->feature_active[i] = 1;
      }
    }
    double err = 0.0;
    for (std::size_t k = 0; k < d_act; ++k) {
      const double d = xhat[k] - xr[k];
      err += d * d;
      gxhat[k] = 2.0 * d * recon_scale;
    }
    const double recon_r = err * recon_scale;
    const double sparsity_r = lambda * l1;
    out.recon += recon_r;
    out.sparsity += sparsity_r;
    if (extras) extras->per_example_loss[r] = recon_r + sparsity_r;
    if (!grads) continue;

    for (std::size_t i = 0; i < d_feat; ++i) {
      double g = 0.0;
      if (f[i] > 0.0) {
        axpy(f[i], gxhat, grads->w_dec.row_span(i));
        g = dot(sae.w_dec.row_span(i), gxhat) + lambda;
      }
      gpre[i] = g;  // already zero when the unit is inactive
      grads->b_enc[i] += g;
      if (g != 0.0) axpy(g, xc, grads->w_enc.row_span(i));
    }
    // b_dec feels both the decoder output and the pre-encoder subtraction.
    for (std::size_t k = 0; k < d_act; ++k) grads->b_dec[k] += gxhat[k];
    for (std::size_t i = 0; i < d_feat; ++i) {
      if (gpre[i] != 0.0) axpy(-gpre[i], sae.w_enc.row_span(i), grads->b_dec);
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch);
  out.recon *= inv_b;
  out.sparsity *= inv_b;
  out.total = out.recon + out.sparsity;
  if (grads) {
    scale(std::span<double>(grads->w_enc.data), inv_b);
    scale(std::span<double>(grads->b_enc), inv_b);
    scale(std::span<double>(grads->w_dec.data), inv_b);
    scale(std::span<double>(grads->b_dec), inv_b);
  }
  return out;
}

inline LossBreakdown baseline_loss(const BaselineSae& sae, const Mat& x, double lambda,
                                   bool normalize_recon = false) {
  return baseline_loss_and_grads(sae, x, lambda, normalize_recon, nullptr);
}

// total = |x - xhat(f)|^2 + lambda |ReLU(pre_gate)|_1
//       + |x - xhat_frozen(ReLU(pre_gate))|^2.
// Gradient conventions: the Heaviside gate is a constant in the first term;
// the auxiliary term sees frozen decoder values and contributes nothing to
// w_dec or b_dec (lifted by the unfreeze_decoder ablation, which makes the
// auxiliary decoder application live); the sparsity and auxiliary terms train
// the gate path only, so r_mag and b_mag get gradient solely through the
// magnitude path of the first term.
inline LossBreakdown gated_loss_and_grads(const GatedSae& sae, const Mat& x, double lambda,
                                          const AblationFlags& flags, GatedGrads* grads,
                                          BatchExtras* extras = nullptr) {
  require_dims(x.cols == sae.d_act, "gated_loss: batch dimension mismatch");
  if (x.rows == 0) throw std::invalid_argument("gated_loss: empty batch");
  if (lambda < 0.0) throw std::invalid_argument("gated_loss: lambda must be >= 0");
  const std::size_t batch = x.rows;
  const std::size_t d_act = sae.d_act;
  const std::size_t d_feat = sae.d_feat;
  const bool tied = sae.tying == Tying::Tied;

  Mat scratch;
  const Mat& w_mag = effective_w_mag(sae, scratch);

  if (grads) *grads = zero_grads_like(sae);
  if (extras) {
    extras->per_example_loss.assign(batch, 0.0);
    extras->feature_active.assign(d_feat, 0);
  }

  LossBreakdown out;
  Vec xc(d_act), pi(d_feat), z(d_feat), feat(d_feat);
  Vec xhat(d_act), xaux(d_act), gxhat(d_act), gxaux(d_act);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = x.row(r);
    for (std::size_t k = 0; k < d_act; ++k) xc[k] = xr[k] - sae.b_dec[k];
    for (std::size_t i = 0; i < d_feat; ++i) {
      pi[i] = detail::affine_row(sae.w_gate.row_span(i), xc, sae.b_gate[i]);
      z[i] = detail::affine_row(w_mag.row_span(i), xc, sae.b_mag[i]);
      const double mag = z[i] > 0.0 ? z[i] : 0.0;
      feat[i] = pi[i] > 0.0 ? mag : 0.0;
    }
    xhat = sae.b_dec;
    xaux = sae.b_dec;
    double l1 = 0.0;
    for (std::size_t i = 0; i < d_feat; ++i) {
      if (feat[i] > 0.0) {
        axpy(feat[i], sae.w_dec.row_span(i), xhat);
        if (extras) extras->feature_active[i] = 1;
      }
      if (pi[i] > 0.0) {
        axpy(pi[i], sae.w_dec.row_span(i), xaux);
        l1 += pi[i];
      }
    }
    double err = 0.0, err_aux = 0.0;
    for (std::size_t k = 0; k < d_act; ++k) {
      const double d = xhat[k] - xr[k];
      const double da = xaux[k] - xr[k];
      err += d * d;
      err_aux += da * da;
      gxhat[k] = 2.0 * d;
      gxaux[k] = 2.0 * da;
    }
    out.recon += err;
    out.sparsity += lambda * l1;
    out.aux += err_aux;
    if (extras) extras->per_example_loss[r] = err + lambda * l1 + err_aux;
    if (!grads) continue;

    for (std::size_t k = 0; k < d_act; ++k) grads->b_dec[k] += gxhat[k];
    for (std::size_t i = 0; i < d_feat; ++i) {
      // Reconstruction, magnitude path (gate held constant).
      if (feat[i] > 0.0) {
        axpy(feat[i], gxhat, grads->w_dec.row_span(i));
        const double gz = dot(sae.w_dec.row_span(i), gxhat);
        grads->b_mag[i] += gz;
        if (tied) {
          const double s = std::exp(sae.r_mag[i]);
          axpy(gz * s, xc, grads->w_gate.row_span(i));
          if (!flags.no_rmag) grads->r_mag[i] += gz * (z[i] - sae.b_mag[i]);
        } else {
          axpy(gz, xc, grads->w_mag_untied->row_span(i));
        }
        // Pre-encoder bias path of the live reconstruction.
        axpy(-gz, w_mag.row_span(i), grads->b_dec);
      }
      // Sparsity and auxiliary reconstruction, gate path.
      if (pi[i] > 0.0) {
        const double g_aux = dot(sae.w_dec.row_span(i), gxaux);
        const double g_pi = lambda + g_aux;
        grads->b_gate[i] += g_pi;
        axpy(g_pi, xc, grads->w_gate.row_span(i));
        // Of the gate-path terms only the sparsity penalty reaches b_dec;
        // inside the auxiliary term b_dec is frozen everywhere.
        if (lambda != 0.0) axpy(-lambda, sae.w_gate.row_span(i), grads->b_dec);
        if (flags.unfreeze_decoder) {
          axpy(pi[i], gxaux, grads->w_dec.row_span(i));
        }
      }
    }
    if (flags.unfreeze_decoder) {
      for (std::size_t k = 0; k < d_act; ++k) grads->b_dec[k] += gxaux[k];
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch);
  out.recon *= inv_b;
  out.sparsity *= inv_b;
  out.aux *= inv_b;
  out.total = out.recon + out.sparsity + out.aux;
  if (grads) {
    scale(std::span<double>(grads->w_gate.data), inv_b);
    scale(std::span<double>(grads->b_gate), inv_b);
    scale(std::span<double>(grads->r_mag), inv_b);
    scale(std::span<double>(grads->b_mag), inv_b);
    if (grads->w_mag_untied) scale(std::span<double>(grads->w_mag_untied->data), inv_b);
    scale(std::span<double>(grads->w_dec.data), inv_b);
    scale(std::span<double>(grads->b_dec), inv_b);
  }
  return out;
}

inline LossBreakdown gated_loss(const GatedSae& sae, const Mat& x, double lambda) {
  return gated_loss_and_grads(sae, x, lambda, AblationFlags{}, nullptr);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TensorView {
  double* p = nullptr;
  std::size_t n = 0;
};

inline std::vector<TensorView> tensor_views(BaselineSae& s) {
  return {{s.w_enc.data.data(), s.w_enc.data.size()},
          {s.b_enc.data(), s.b_enc.size()},
          {s.w_dec.data.data(), s.w_dec.data.size()},
          {s.b_dec.data(), s.b_dec.size()}};
}

inline std::vector<TensorView> tensor_views(BaselineGrads& g) {
  return {{g.w_enc.data.data(), g.w_enc.data.size()},
          {g.b_enc.data(), g.b_enc.size()},
          {g.w_dec.data.data(), g.w_dec.data.size()},
          {g.b_dec.data(), g.b_dec.size()}};
}

inline std::vector<TensorView> tensor_views(GatedSae& s) {
  std::vector<TensorView> v = {{s.w_gate.data.data(), s.w_gate.data.size()},
                               {s.b_gate.data(), s.b_gate.size()},
                               {s.r_mag.data(), s.r_mag.size()},
                               {s.b_mag.data(), s.b_mag.size()}};
  if (s.w_mag_untied) v.push_back({s.w_mag_untied->data.data(), s.w_mag_untied->data.size()});
  v.push_back({s.w_dec.data.data(), s.w_dec.data.size()});
  v.push_back({s.b_dec.data(), s.b_dec.size()});
  return v;
}

inline std::vector<TensorView> tensor_views(GatedGrads& g) {
  std::vector<TensorView> v = {{g.w_gate.data.data(), g.w_gate.data.size()},
                               {g.b_gate.data(), g.b_gate.size()},
                               {g.r_mag.data(), g.r_mag.size()},
                               {g.b_mag.data(), g.b_mag.size()}};
  if (g.w_mag_untied) v.push_back({g.w_mag_untied->data.data(), g.w_mag_untied->data.size()});
  v.push_back({g.w_dec.data.data(), g.w_dec.data.size()});
  v.push_back({g.b_dec.data(), g.b_dec.size()});
  return v;
}

struct AdamState {
  std::vector<Vec> m;
  std::vector<Vec> v;
  std::uint64_t t = 0;

  static AdamState init_like(std::span<const TensorView> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.n, 0.0);
      s.v.emplace_back(p.n, 0.0);
    }
    return s;
  }
};

// Standard Adam with bias correction; with beta1 = 0 the corrected first
// moment is just the current gradient.
inline void adam_step(std::span<TensorView> params, std::span<const TensorView> grads,
                      AdamState& state, double lr_effective, double beta1 = 0.0,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: tensor list mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    if (params[ti].n != grads[ti].n || params[ti].n != state.m[ti].size())
      throw std::invalid_argument("adam_step: tensor shape mismatch");
    double* p = params[ti].p;
    const double* g = grads[ti].p;
    double* m = state.m[ti].data();
    double* v = state.v[ti].data();
    for (std::size_t i = 0; i < params[ti].n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr_effective * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Removes the component of each dictionary-row gradient parallel to the row,
// so the optimizer cannot trade reconstruction for row norm. Combined with
// post-step renormalization this keeps rows on the unit sphere.
inline void project_decoder_gradient(const Mat& w_dec, Mat& g_w_dec) {
  require_dims(w_dec.same_shape(g_w_dec), "project_decoder_gradient: shape mismatch");
  for (std::size_t i = 0; i < w_dec.rows; ++i) {
    const double row_sq = norm2_sq(w_dec.row_span(i));
    if (row_sq == 0.0)
      throw NumericError("project_decoder_gradient: zero dictionary row at feature " +
                         std::to_string(i));
    const double coef = dot(g_w_dec.row_span(i), w_dec.row_span(i)) / row_sq;
    axpy(-coef, w_dec.row_span(i), g_w_dec.row_span(i));
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warm-up from zero at the start; after each
// resampling event the multiplier restarts at resample_floor and returns to 1
// along a cosine over resample_warmup_steps.
// ---------------------------------------------------------------------------

struct LrSchedule {
  std::uint64_t warmup_steps = 1000;
  std::uint64_t resample_warmup_steps = 1000;
  double resample_floor = 0.1;
  std::optional<std::uint64_t> last_resample_step;

  double multiplier(std::uint64_t step) const {
    double m = 1.0;
    if (warmup_steps > 0 && step < warmup_steps)
      m = static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (last_resample_step && step >= *last_resample_step) {
      const std::uint64_t dt = step - *last_resample_step;
      if (dt < resample_warmup_steps) {
        const double phase = static_cast<double>(dt) / static_cast<double>(resample_warmup_steps);
        const double c = resample_floor +
                         (1.0 - resample_floor) * (1.0 - std::cos(3.14159265358979323846 * phase)) / 2.0;
        m = std::min(m, c);
      }
    }
    return m;
  }
};

inline double lr_schedule(std::uint64_t step, const LrSchedule& state) {
  return state.multiplier(step);
}

// ---------------------------------------------------------------------------
// Dead-feature resampling
// ---------------------------------------------------------------------------

// Rolling buffer of recent training examples and their losses, sampled with
// probability proportional to squared loss when reinitializing dead features.
class LossRingBuffer {
 public:
  LossRingBuffer(std::size_t capacity, std::size_t dim)
      : capacity_(capacity), dim_(dim), x_(capacity * dim), loss_(capacity) {}

  void push(std::span<const double> x, double loss) {
    std::copy(x.begin(), x.end(), x_.begin() + static_cast<std::ptrdiff_t>(head_ * dim_));
    loss_[head_] = loss;
    head_ = (head_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }

  std::size_t size() const { return size_; }
  std::span<const double> x_at(std::size_t i) const { return {x_.data() + i * dim_, dim_}; }

  std::size_t sample_by_squared_loss(CounterRng& rng) const {
    if (size_ == 0) throw std::logic_error("LossRingBuffer: sampling from empty buffer");
    double total = 0.0;
    for (std::size_t i = 0; i < size_; ++i) total += loss_[i] * loss_[i];
    if (total <= 0.0) return static_cast<std::size_t>(rng.below(size_));
    double u = rng.next_unit() * total;
    for (std::size_t i = 0; i < size_; ++i) {
      u -= loss_[i] * loss_[i];
      if (u < 0.0) return i;
    }
    return size_ - 1;
  }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::vector<double> x_;
  Vec loss_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

namespace detail {

struct FeatureLayout {
  // Indices into the tensor_views order; w_mag slot is absent for baseline
  // and tied gated models.
  std::size_t enc_w;            // w_enc or w_gate
  std::vector<std::size_t> per_feature_scalars;  // b_enc or b_gate/r_mag/b_mag
  std::optional<std::size_t> mag_w;
  std::size_t dec_w;
};

inline FeatureLayout layout_of(const BaselineSae&) { return {0, {1}, std::nullopt, 2}; }

inline FeatureLayout layout_of(const GatedSae& s) {
  if (s.tying == Tying::Untied) return {0, {1, 2, 3}, 4, 5};
  return {0, {1, 2, 3}, std::nullopt, 4};
}

}  // namespace detail

// Reinitializes features that never activated inside the trailing window:
// decoder row points at a badly reconstructed input, the encoder row follows
// the same direction at 0.2x the mean live encoder norm, biases and moments
// reset. Returns the number of features touched.
template <typename SaeT>
inline std::size_t resample_dead_features(SaeT& sae, AdamState& adam,
                                          FeatureActivity& activity,
                                          const LossRingBuffer& buffer,
                                          std::uint64_t dead_window, CounterRng& rng) {
  if (activity.steps_seen < dead_window) return 0;
  const std::size_t d_feat = sae.d_feat;
  std::vector<std::size_t> dead;
  double alive_norm_sum = 0.0;
  std::size_t alive_count = 0;
  Mat& enc_w = [&]() -> Mat& {
    if constexpr (std::is_same_v<SaeT, BaselineSae>)
      return sae.w_enc;
    else
      return sae.w_gate;
  }();
  for (std::size_t i = 0; i < d_feat; ++i) {
    if (activity.last_active[i] <= activity.steps_seen - dead_window) {
      dead.push_back(i);
    } else {
      alive_norm_sum += norm2(enc_w.row_span(i));
      ++alive_count;
    }
  }
  if (dead.empty()) return 0;
  if (alive_count == 0)
    throw NumericError("resample_dead_features: every feature is dead");
  if (buffer.size() == 0) return 0;
  const double enc_scale = 0.2 * alive_norm_sum / static_cast<double>(alive_count);

  const detail::FeatureLayout layout = detail::layout_of(sae);
  const std::size_t d_act = sae.d_act;
  Vec dir(d_act);
  for (std::size_t i : dead) {
    double n = 0.0;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const std::size_t pick = buffer.sample_by_squared_loss(rng);
      std::span<const double> xs = buffer.x_at(pick);
      for (std::size_t k = 0; k < d_act; ++k) dir[k] = xs[k] - sae.b_dec[k];
      n = norm2(dir);
      if (n > 1e-12) break;
    }
    if (n <= 1e-12) continue;  // buffer holds only bias-identical inputs
    scale(dir, 1.0 / n);
    std::copy(dir.begin(), dir.end(), sae.w_dec.row(i));
    for (std::size_t k = 0; k < d_act; ++k) enc_w.at(i, k) = enc_scale * dir[k];
    if constexpr (std::is_same_v<SaeT, BaselineSae>) {
      sae.b_enc[i] = 0.0;
    } else {
      sae.b_gate[i] = 0.0;
      sae.b_mag[i] = 0.0;
      sae.r_mag[i] = 0.0;
      if (sae.w_mag_untied)
        for (std::size_t k = 0; k < d_act; ++k) sae.w_mag_untied->at(i, k) = enc_scale * dir[k];
    }
    // Zero the Adam moments on every slice belonging to this feature.
    auto zero_row = [&](std::size_t tensor, std::size_t row) {
      std::fill(adam.m[tensor].begin() + static_cast<std::ptrdiff_t>(row * d_act),
                adam.m[tensor].begin() + static_cast<std::ptrdiff_t>((row + 1) * d_act), 0.0);
      std::fill(adam.v[tensor].begin() + static_cast<std::ptrdiff_t>(row * d_act),
                adam.v[tensor].begin() + static_cast<std::ptrdiff_t>((row + 1) * d_act), 0.0);
    };
    zero_row(layout.enc_w, i);
    zero_row(layout.dec_w, i);
    if (layout.mag_w) zero_row(*layout.mag_w, i);
    for (std::size_t t : layout.per_feature_scalars) {
      adam.m[t][i] = 0.0;
      adam.v[t][i] = 0.0;
    }
    activity.last_active[i] = activity.steps_seen;  // fresh start
  }
  return dead.size();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSinks {
  std::function<void(std::uint64_t step, const SaeModel&)> on_checkpoint;
};

struct TrainResult {
  SaeModel model;
  std::vector<MetricsRecord> metrics;
  Vec step_losses;  // total loss per step
};

namespace detail {

inline std::string breakdown_message(const LossBreakdown& b) {
  return "total=" + std::to_string(b.total) + " recon=" + std::to_string(b.recon) +
         " sparsity=" + std::to_string(b.sparsity) + " aux=" + std::to_string(b.aux);
}

}  // namespace detail

// Runs {draw batch, loss+grads, decoder-norm maintenance, adam, periodic
// resampling, periodic metrics} for total_steps. Deterministic given the
// config: one thread, fixed reduction order.
inline TrainResult train_from(SaeModel model, RowSource& data, const TrainConfig& cfg,
                              const EvalContext* eval = nullptr,
                              const TrainSinks* sinks = nullptr) {
  validate(cfg);
  const std::size_t d_act = d_act_of(model);
  const std::size_t d_feat = d_feat_of(model);
  require_dims(data.dim() == d_act, "train: data dimension mismatch");

  TrainResult result{std::move(model), {}, {}};
  FeatureActivity activity(d_feat);
  LossRingBuffer buffer(std::max<std::size_t>(cfg.batch_size, 4096), d_act);
  LrSchedule sched{cfg.warmup_steps, cfg.resample_warmup_steps, cfg.resample_lr_factor,
                   std::nullopt};
  CounterRng resample_rng = CounterRng(cfg.seed).split(0x7E5A);

  AdamState adam = std::visit(
      [](auto& s) { return AdamState::init_like(tensor_views(s)); }, result.model);

  Mat batch(cfg.batch_size, d_act);
  BatchExtras extras;
  BaselineGrads bgrads;
  GatedGrads ggrads;
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  auto emit_metrics = [&](std::uint64_t step) {
    if (!eval) return;
    MetricsRecord rec = evaluate(result.model, *eval, cfg.lambda, step,
                                 activity.steps_seen >= cfg.dead_window ? &activity : nullptr,
                                 cfg.dead_window);
    rec.wallclock_s = elapsed();
    result.metrics.push_back(rec);
  };

  for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
    for (std::size_t r = 0; r < cfg.batch_size; ++r) {
      if (!data.next(batch.row_span(r)))
        throw ConfigError("train: data stream exhausted at step " + std::to_string(step));
    }

    LossBreakdown loss;
    if (auto* b = std::get_if<BaselineSae>(&result.model)) {
      loss = baseline_loss_and_grads(*b, batch, cfg.lambda,
                                     cfg.normalize_recon_by_input_norm, &bgrads, &extras);
      if (!std::isfinite(loss.total))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) + ": " +
                           detail::breakdown_message(loss));
      if (cfg.freeze_decoder) {
        fill(std::span<double>(bgrads.w_dec.data), 0.0);
        fill(std::span<double>(bgrads.b_dec), 0.0);
      } else {
        project_decoder_gradient(b->w_dec, bgrads.w_dec);
      }
      auto params = tensor_views(*b);
      auto grads = tensor_views(bgrads);
      adam_step(params, grads, adam, cfg.lr * sched.multiplier(step), cfg.beta1, cfg.beta2,
                cfg.eps);
      if (!cfg.freeze_decoder) renormalize_decoder(b->w_dec);
    } else {
      auto& g = std::get<GatedSae>(result.model);
      loss = gated_loss_and_grads(g, batch, cfg.lambda, cfg.ablation, &ggrads, &extras);
      if (!std::isfinite(loss.total))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) + ": " +
                           detail::breakdown_message(loss));
      if (cfg.freeze_decoder) {
        fill(std::span<double>(ggrads.w_dec.data), 0.0);
        fill(std::span<double>(ggrads.b_dec), 0.0);
      } else {
        project_decoder_gradient(g.w_dec, ggrads.w_dec);
      }
      auto params = tensor_views(g);
      auto grads = tensor_views(ggrads);
      adam_step(params, grads, adam, cfg.lr * sched.multiplier(step), cfg.beta1, cfg.beta2,
                cfg.eps);
      if (!cfg.freeze_decoder) renormalize_decoder(g.w_dec);
    }
    result.step_losses.push_back(loss.total);

    activity.record_step(extras.feature_active);
    for (std::size_t r = 0; r < cfg.batch_size; ++r)
      buffer.push(batch.row_span(r), extras.per_example_loss[r]);

    if (cfg.resample_every > 0 && (step + 1) % cfg.resample_every == 0 &&
        step + 1 < cfg.total_steps) {
      const std::size_t n = std::visit(
          [&](auto& s) {
            return resample_dead_features(s, adam, activity, buffer, cfg.dead_window,
                                          resample_rng);
          },
          result.model);
      if (n > 0) sched.last_resample_step = step + 1;
    }

    if (cfg.metrics_every > 0 && (step + 1) % cfg.metrics_every == 0) emit_metrics(step + 1);
    if (sinks && sinks->on_checkpoint && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0)
      sinks->on_checkpoint(step + 1, result.model);
  }

  if (eval && (result.metrics.empty() || result.metrics.back().step != cfg.total_steps))
    emit_metrics(cfg.total_steps);
  return result;
}

inline TrainResult train(SaeKind kind, std::size_t d_feat, RowSource& data,
                         const TrainConfig& cfg, const EvalContext* eval = nullptr,
                         const TrainSinks* sinks = nullptr) {
  if (kind != SaeKind::Baseline && cfg.ablation.untied_encoders) kind = SaeKind::GatedUntied;
  return train_from(init_params(kind, data.dim(), d_feat, cfg.seed), data, cfg, eval, sinks);
}

// ---------------------------------------------------------------------------
// Rescale & shift on a frozen baseline: learns a per-feature affine map of
// the frozen encoder pre-activations that minimizes reconstruction error.
// The active set stays pinned to the frozen encoder's sign, so sparsity is
// untouched; only magnitudes move.
// ---------------------------------------------------------------------------

struct RescaleShift {
  Vec scale;  // exp of the learned log-scale, hence strictly positive
  Vec shift;
};

inline Vec rescale_shift_features(const BaselineSae& frozen, const RescaleShift& rs,
                                  std::span<const double> x) {
  Vec out(frozen.d_feat, 0.0);
  Vec xc(frozen.d_act);
  for (std::size_t k = 0; k < frozen.d_act; ++k) xc[k] = x[k] - frozen.b_dec[k];
  for (std::size_t i = 0; i < frozen.d_feat; ++i) {
    const double pre = detail::affine_row(frozen.w_enc.row_span(i), xc, frozen.b_enc[i]);
    if (pre > 0.0) {
      const double a = rs.scale[i] * pre + rs.shift[i];
      out[i] = a > 0.0 ? a : 0.0;
    }
  }
  return out;
}

inline RescaleShift rescale_shift_fit(const BaselineSae& frozen, RowSource& data,
                                      std::uint64_t steps, std::size_t batch_size = 256,
                                      double lr = 1e-2, double beta1 = 0.0,
                                      double beta2 = 0.999, double eps = 1e-8) {
  require_dims(data.dim() == frozen.d_act, "rescale_shift_fit: data dimension mismatch");
  const std::size_t d_feat = frozen.d_feat;
  const std::size_t d_act = frozen.d_act;
  Vec log_scale(d_feat, 0.0), shift(d_feat, 0.0);
  Vec g_ls(d_feat), g_sh(d_feat);
  std::vector<TensorView> params = {{log_scale.data(), d_feat}, {shift.data(), d_feat}};
  std::vector<TensorView> grads = {{g_ls.data(), d_feat}, {g_sh.data(), d_feat}};
  AdamState adam = AdamState::init_like(params);

  Mat batch(batch_size, d_act);
  Vec xc(d_act), pre(d_feat), feat(d_feat), xhat(d_act), gxhat(d_act);
  for (std::uint64_t step = 0; step < steps; ++step) {
    for (std::size_t r = 0; r < batch_size; ++r) {
      if (!data.next(batch.row_span(r)))
        throw ConfigError("rescale_shift_fit: data stream exhausted");
    }
    fill(g_ls, 0.0);
    fill(g_sh, 0.0);
    for (std::size_t r = 0; r < batch_size; ++r) {
      const double* xr = batch.row(r);
      for (std::size_t k = 0; k < d_act; ++k) xc[k] = xr[k] - frozen.b_dec[k];
      for (std::size_t i = 0; i < d_feat; ++i) {
        pre[i] = detail::affine_row(frozen.w_enc.row_span(i), xc, frozen.b_enc[i]);
        if (pre[i] > 0.0) {
          const double a = std::exp(log_scale[i]) * pre[i] + shift[i];
          feat[i] = a > 0.0 ? a : 0.0;
        } else {
          feat[i] = 0.0;
        }
      }
      xhat = frozen.b_dec;
      for (std::size_t i = 0; i < d_feat; ++i)
        if (feat[i] != 0.0) axpy(feat[i], frozen.w_dec.row_span(i), xhat);
      for (std::size_t k = 0; k < d_act; ++k) gxhat[k] = 2.0 * (xhat[k] - xr[k]);
      for (std::size_t i = 0; i < d_feat; ++i) {
        if (pre[i] > 0.0 && feat[i] > 0.0) {
          const double ga = dot(frozen.w_dec.row_span(i), gxhat);
          g_sh[i] += ga;
          g_ls[i] += ga * std::exp(log_scale[i]) * pre[i];
        }
      }
    }
    const double inv_b = 1.0 / static_cast<double>(batch_size);
    scale(g_ls, inv_b);
    scale(g_sh, inv_b);
    adam_step(params, grads, adam, lr, beta1, beta2, eps);
  }

  RescaleShift rs;
  rs.scale.resize(d_feat);
  for (std::size_t i = 0; i < d_feat; ++i) rs.scale[i] = std::exp(log_scale[i]);
  rs.shift = shift;
  return rs;
}

}  // namespace gdict
