// gdict: dictionary-learning experiments on synthetic superposition data.
//
// Subcommands: gen-data, train, sweep, eval, ito, demo-shrinkage, demo-toy1d.
// Exit codes: 0 success, 2 usage/configuration, 3 numerical abort, 4 I/O.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "gdict/config.hpp"
#include "gdict/data_synth.hpp"
#include "gdict/errors.hpp"
#include "gdict/ito.hpp"
#include "gdict/metrics.hpp"
#include "gdict/sae.hpp"
#include "gdict/training.hpp"

namespace fs = std::filesystem;
using namespace gdict;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct GeneratorOpts {
  std::size_t d_act = 16;
  std::size_t d_true = 32;
  double fire_prob = 0.05;
  double noise_std = 0.0;
  double mag_lo = 0.5;
  double mag_hi = 1.5;
  std::uint64_t seed = 0;

  GroundTruthModel build() const {
    return gen_ground_truth(d_act, d_true, fire_prob, {mag_lo, mag_hi}, noise_std, seed);
  }
};

void add_generator_flags(CLI::App* cmd, GeneratorOpts& g) {
  cmd->add_option("--d-act", g.d_act, "activation dimension");
  cmd->add_option("--d-true", g.d_true, "number of true features (must exceed --d-act)");
  cmd->add_option("--fire-prob", g.fire_prob, "per-feature firing probability");
  cmd->add_option("--noise-std", g.noise_std, "observation noise std");
  cmd->add_option("--mag-lo", g.mag_lo, "active magnitude lower bound");
  cmd->add_option("--mag-hi", g.mag_hi, "active magnitude upper bound");
  cmd->add_option("--data-seed", g.seed, "generator seed");
}

struct HostOpts {
  std::size_t classes = 32;
  double temperature = 1.0;
  std::uint64_t seed = 1;
};

void add_host_flags(CLI::App* cmd, HostOpts& h) {
  cmd->add_option("--host-classes", h.classes, "evaluation host class count");
  cmd->add_option("--host-temperature", h.temperature, "evaluation host temperature");
  cmd->add_option("--host-seed", h.seed, "evaluation host seed");
}

std::string format_double_flag(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out << text;
  out.close();
  if (!out) throw FormatError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  GeneratorOpts gen;
  std::uint64_t rows = 0;
  std::size_t batch_rows = 4096;
  std::string out;
};

int run_gen_data(const GenDataArgs& a) {
  if (a.rows == 0) throw ConfigError("gen-data: --rows must be >= 1");
  GroundTruthModel model = a.gen.build();
  ActivationFileWriter writer(a.out, model.d_act);
  std::uint64_t written = 0;
  std::uint64_t batch_index = 0;
  CounterRng root(a.gen.seed);
  while (written < a.rows) {
    const std::size_t n =
        static_cast<std::size_t>(std::min<std::uint64_t>(a.batch_rows, a.rows - written));
    Mat batch(n, model.d_act);
    // One sub-stream per batch index keeps any prefix reproducible.
    CounterRng batch_rng = root.split(batch_index++);
    for (std::size_t r = 0; r < n; ++r)
      detail::sample_row(model, batch_rng.split(r), batch.row(r), nullptr);
    writer.append(batch);
    written += n;
  }
  writer.close();

  std::ostringstream meta;
  meta << "d_act=" << a.gen.d_act << '\n'
       << "d_true=" << a.gen.d_true << '\n'
       << "fire_prob=" << format_double_flag(a.gen.fire_prob) << '\n'
       << "noise_std=" << format_double_flag(a.gen.noise_std) << '\n'
       << "mag_lo=" << format_double_flag(a.gen.mag_lo) << '\n'
       << "mag_hi=" << format_double_flag(a.gen.mag_hi) << '\n'
       << "seed=" << a.gen.seed << '\n'
       << "rows=" << a.rows << '\n';
  write_text_file(a.out + ".meta", meta.str());
  std::cout << "wrote " << a.rows << " rows of dimension " << a.gen.d_act << " to " << a.out
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string arch = "baseline";
  std::size_t d_feat = 0;
  std::string data_file;  // empty: generate on the fly
  GeneratorOpts gen;
  std::string config_file;
  std::string out_dir;
  std::size_t eval_rows = 2048;
  std::size_t shuffle_buffer = 0;
  HostOpts host;
  std::vector<std::string> ablations;
  // Optional overrides; flags win over the config file.
  std::optional<double> lambda, lr, beta1, beta2, eps, resample_lr_factor;
  std::optional<std::uint64_t> batch_size, total_steps, warmup_steps, resample_every,
      dead_window, resample_warmup_steps, metrics_every, checkpoint_every, seed;
  std::optional<bool> normalize_recon, freeze_decoder;
};

void add_train_config_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
  cmd->add_option("--lambda", a.lambda, "L1 coefficient");
  cmd->add_option("--lr", a.lr, "learning rate");
  cmd->add_option("--beta1", a.beta1, "Adam beta1");
  cmd->add_option("--beta2", a.beta2, "Adam beta2");
  cmd->add_option("--eps", a.eps, "Adam epsilon");
  cmd->add_option("--batch-size", a.batch_size, "examples per step");
  cmd->add_option("--steps", a.total_steps, "training steps");
  cmd->add_option("--warmup-steps", a.warmup_steps, "linear LR warm-up steps");
  cmd->add_option("--resample-every", a.resample_every, "resampling cadence (0 = off)");
  cmd->add_option("--dead-window", a.dead_window, "dead-feature detection window");
  cmd->add_option("--resample-lr-factor", a.resample_lr_factor,
                  "LR floor right after a resampling event");
  cmd->add_option("--resample-warmup-steps", a.resample_warmup_steps,
                  "cosine warm-up length after resampling");
  cmd->add_option("--metrics-every", a.metrics_every, "evaluation cadence (0 = final only)");
  cmd->add_option("--checkpoint-every", a.checkpoint_every, "checkpoint cadence (0 = off)");
  cmd->add_option("--seed", a.seed, "training seed");
  cmd->add_option("--normalize-recon", a.normalize_recon,
                  "divide the reconstruction loss by the mean input norm");
  cmd->add_option("--freeze-decoder", a.freeze_decoder, "hold w_dec and b_dec fixed");
  cmd->add_option("--ablation", a.ablations,
                  "ablations: unfreeze-decoder, no-rmag, untied-encoders")
      ->delimiter(',');
  cmd->add_option("--eval-rows", a.eval_rows, "held-out evaluation rows");
  cmd->add_option("--shuffle-buffer", a.shuffle_buffer,
                  "reservoir rows for stream shuffling (0 = off)");
}

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config_file.empty()) {
    const KvMap kv = parse_kv_file(a.config_file);
    // Echoed effective configs carry these extra keys; accept them back.
    require_known_keys(kv, {"arch", "d_feat", "data"});
    cfg = apply_train_keys(kv, cfg);
  }
  auto set = [](auto& dst, const auto& src) {
    if (src) dst = *src;
  };
  set(cfg.lambda, a.lambda);
  set(cfg.lr, a.lr);
  set(cfg.beta1, a.beta1);
  set(cfg.beta2, a.beta2);
  set(cfg.eps, a.eps);
  set(cfg.batch_size, a.batch_size);
  set(cfg.total_steps, a.total_steps);
  set(cfg.warmup_steps, a.warmup_steps);
  set(cfg.resample_every, a.resample_every);
  set(cfg.dead_window, a.dead_window);
  set(cfg.resample_lr_factor, a.resample_lr_factor);
  set(cfg.resample_warmup_steps, a.resample_warmup_steps);
  set(cfg.metrics_every, a.metrics_every);
  set(cfg.checkpoint_every, a.checkpoint_every);
  set(cfg.seed, a.seed);
  set(cfg.normalize_recon_by_input_norm, a.normalize_recon);
  set(cfg.freeze_decoder, a.freeze_decoder);
  for (const std::string& name : a.ablations) {
    if (name == "unfreeze-decoder")
      cfg.ablation.unfreeze_decoder = true;
    else if (name == "no-rmag")
      cfg.ablation.no_rmag = true;
    else if (name == "untied-encoders")
      cfg.ablation.untied_encoders = true;
    else
      throw ConfigError("unknown ablation: " + name);
  }
  validate(cfg);
  return cfg;
}

SaeKind resolve_kind(const std::string& arch, const AblationFlags& flags) {
  if (arch == "baseline") return SaeKind::Baseline;
  if (arch == "gated")
    return flags.untied_encoders ? SaeKind::GatedUntied : SaeKind::GatedTied;
  throw ConfigError("unknown architecture: " + arch + " (expected baseline or gated)");
}

struct PreparedData {
  std::unique_ptr<RowSource> raw_source;
  std::unique_ptr<RowSource> shuffled;  // wraps raw_source when buffering is on
  Mat eval_x;
  std::optional<Mat> true_directions;

  RowSource& source() { return shuffled ? *shuffled : *raw_source; }
};

PreparedData prepare_data(const TrainArgs& a, std::uint64_t train_seed) {
  PreparedData d;
  if (!a.data_file.empty()) {
    if (!fs::exists(a.data_file)) throw ConfigError("data file not found: " + a.data_file);
    ActivationFileReader eval_reader(a.data_file);
    if (eval_reader.rows_total() == 0)
      throw ConfigError("data file is empty: " + a.data_file);
    d.eval_x = eval_reader.read_batch(a.eval_rows);
    d.raw_source = std::make_unique<FileRowSource>(a.data_file, /*cycle=*/true);
  } else {
    GroundTruthModel model = a.gen.build();
    d.eval_x =
        sample_batch(model, a.eval_rows, CounterRng(model.seed).split(0xE7A1).next_u64())
            .data;
    d.true_directions = model.directions;
    // The training stream key differs from the eval draw, so evaluation data
    // stays held out.
    d.raw_source = std::make_unique<GeneratorSource>(std::move(model), train_seed + 1);
  }
  if (a.shuffle_buffer > 0)
    d.shuffled = std::make_unique<ShuffledSource>(*d.raw_source, a.shuffle_buffer,
                                                  train_seed ^ 0x5A5A5A5Aull);
  return d;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_train_config(a);
  const SaeKind kind = resolve_kind(a.arch, cfg.ablation);
  if (a.d_feat == 0) throw ConfigError("--d-feat is required and must be >= 1");

  fs::create_directories(a.out_dir);
  PreparedData data = prepare_data(a, cfg.seed);

  EvalContext ctx;
  ctx.eval_x = std::move(data.eval_x);
  ctx.host = make_host(ctx.eval_x, a.host.classes, a.host.temperature, a.host.seed);
  ctx.true_directions = std::move(data.true_directions);

  std::ostringstream effective;
  effective << "arch=" << a.arch << '\n'
            << "d_feat=" << a.d_feat << '\n'
            << "data=" << (a.data_file.empty() ? "<generated>" : a.data_file) << '\n'
            << serialize_train_config(cfg);
  write_text_file(fs::path(a.out_dir) / "effective_config.txt", effective.str());

  TrainSinks sinks;
  sinks.on_checkpoint = [&](std::uint64_t step, const SaeModel& m) {
    save_checkpoint(
        (fs::path(a.out_dir) / ("checkpoint_step" + std::to_string(step) + ".gsae")).string(),
        m);
  };

  TrainResult result = train(kind, a.d_feat, data.source(), cfg, &ctx, &sinks);

  save_checkpoint((fs::path(a.out_dir) / "checkpoint.gsae").string(), result.model);
  write_metrics_csv((fs::path(a.out_dir) / "metrics.csv").string(), result.metrics);
  if (!result.metrics.empty()) {
    const MetricsRecord& last = result.metrics.back();
    std::cout << "final: step=" << last.step << " l0=" << last.l0 << " mse=" << last.mse
              << " loss_recovered=" << last.loss_recovered << " gamma=" << last.gamma << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
  TrainArgs base;
  std::vector<double> lambdas;
  std::string arch = "gated";  // baseline | gated | both
  std::size_t workers = 1;
};

std::size_t thread_cap_from_env(std::size_t requested) {
  const char* env = std::getenv("GDICT_THREADS");
  if (!env || !*env) return requested;
  try {
    const std::size_t cap = std::stoull(env);
    return cap > 0 ? std::min(requested, cap) : requested;
  } catch (...) {
    throw ConfigError(std::string("GDICT_THREADS is not an integer: ") + env);
  }
}

int run_sweep(const SweepArgs& a) {
  if (a.lambdas.size() < 2)
    throw ConfigError("sweep: need at least two --lambdas values for a frontier");
  for (double l : a.lambdas)
    if (!(l > 0.0)) throw ConfigError("sweep: lambda values must be strictly positive");
  {
    std::vector<double> sorted = a.lambdas;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("sweep: lambda values must be distinct");
  }
  if (a.arch != "baseline" && a.arch != "gated" && a.arch != "both")
    throw ConfigError("sweep: --arch must be baseline, gated, or both");
  if (a.base.d_feat == 0) throw ConfigError("--d-feat is required and must be >= 1");

  struct RunSpec {
    std::string arch;
    std::size_t d_feat;
    double lambda;
    std::string dir;
  };
  std::vector<RunSpec> runs;
  // Matched training compute: when both architectures run, baselines get 50%
  // more learned features.
  const std::size_t baseline_feat =
      a.arch == "both"
          ? static_cast<std::size_t>(std::ceil(1.5 * static_cast<double>(a.base.d_feat)))
          : a.base.d_feat;
  for (double lambda : a.lambdas) {
    std::ostringstream tag;
    tag << "lam" << lambda;
    if (a.arch == "gated" || a.arch == "both")
      runs.push_back({"gated", a.base.d_feat, lambda,
                      (fs::path(a.base.out_dir) / ("run_gated_" + tag.str())).string()});
    if (a.arch == "baseline" || a.arch == "both")
      runs.push_back({"baseline", baseline_feat, lambda,
                      (fs::path(a.base.out_dir) / ("run_baseline_" + tag.str())).string()});
  }

  fs::create_directories(a.base.out_dir);
  const std::size_t workers = std::max<std::size_t>(1, thread_cap_from_env(a.workers));

  std::vector<std::optional<MetricsRecord>> finals(runs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> failure_code{kExitOk};
  std::mutex io_mutex;

  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) return;
      const RunSpec& spec = runs[i];
      TrainArgs run_args = a.base;
      run_args.arch = spec.arch;
      run_args.d_feat = spec.d_feat;
      run_args.lambda = spec.lambda;
      run_args.out_dir = spec.dir;
      try {
        run_train(run_args);
        // Re-evaluate the checkpoint for the combined CSV row.
        TrainConfig cfg = resolve_train_config(run_args);
        PreparedData data = prepare_data(run_args, cfg.seed);
        EvalContext ctx;
        ctx.eval_x = std::move(data.eval_x);
        ctx.host = make_host(ctx.eval_x, run_args.host.classes, run_args.host.temperature,
                             run_args.host.seed);
        ctx.true_directions = std::move(data.true_directions);
        SaeModel model = load_checkpoint((fs::path(spec.dir) / "checkpoint.gsae").string());
        const MetricsRecord rec = evaluate(model, ctx, spec.lambda, cfg.total_steps);
        std::lock_guard<std::mutex> lock(io_mutex);
        finals[i] = rec;
      } catch (const NumericError& e) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "run " << spec.dir << " failed (numeric): " << e.what() << "\n";
        failure_code = kExitNumeric;
      } catch (const FormatError& e) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "run " << spec.dir << " failed (io): " << e.what() << "\n";
        if (failure_code == kExitOk) failure_code = kExitIo;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(io_mutex);
        std::cerr << "run " << spec.dir << " failed: " << e.what() << "\n";
        if (failure_code == kExitOk) failure_code = kExitUsage;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, runs.size()); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // Combined CSV tagged by architecture, then the non-dominated subset.
  std::vector<MetricsRecord> rows;
  std::vector<std::string> row_arch;
  {
    std::ofstream combined(fs::path(a.base.out_dir) / "combined.csv");
    combined << "arch," << kMetricsCsvHeader << '\n';
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (!finals[i]) continue;
      combined << runs[i].arch << ',' << format_metrics_row(*finals[i]) << '\n';
      rows.push_back(*finals[i]);
      row_arch.push_back(runs[i].arch);
    }
  }
  if (!rows.empty()) {
    std::vector<MetricsRecord> frontier = pareto_frontier(rows);
    std::ofstream pareto(fs::path(a.base.out_dir) / "pareto.csv");
    pareto << "arch," << kMetricsCsvHeader << '\n';
    for (const auto& rec : frontier) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].lambda == rec.lambda && rows[i].l0 == rec.l0 &&
            rows[i].loss_recovered == rec.loss_recovered) {
          pareto << row_arch[i] << ',' << format_metrics_row(rec) << '\n';
          break;
        }
      }
    }
  }
  return failure_code.load();
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data_file;
  GeneratorOpts gen;
  std::size_t eval_rows = 2048;
  HostOpts host;
  std::string splice = "sae";
  std::string out;  // empty: stdout
};

int run_eval(const EvalArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  SaeModel model = load_checkpoint(a.checkpoint);

  Mat eval_x;
  std::optional<Mat> truth;
  if (!a.data_file.empty()) {
    ActivationFileReader reader(a.data_file);
    eval_x = reader.read_batch(a.eval_rows);
  } else {
    GroundTruthModel gt = a.gen.build();
    eval_x = sample_batch(gt, a.eval_rows, CounterRng(gt.seed).split(0xE7A1).next_u64()).data;
    truth = gt.directions;
  }
  if (eval_x.rows == 0) throw ConfigError("eval: empty evaluation set");
  if (eval_x.cols != d_act_of(model))
    throw ConfigError("eval: data dimension does not match the checkpoint");

  EvalContext ctx;
  ctx.eval_x = std::move(eval_x);
  ctx.host = make_host(ctx.eval_x, a.host.classes, a.host.temperature, a.host.seed);
  ctx.true_directions = std::move(truth);

  MetricsRecord rec;
  if (a.splice == "sae") {
    rec = evaluate(model, ctx, 0.0, 0);
  } else if (a.splice == "identity" || a.splice == "zero") {
    // Sanity splices exercise the loss-recovered endpoints.
    Mat recon =
        a.splice == "identity" ? ctx.eval_x : Mat(ctx.eval_x.rows, ctx.eval_x.cols, 0.0);
    rec.loss_recovered = loss_recovered(ctx.host, ctx.eval_x, recon);
    rec.mse = mse(ctx.eval_x, recon);
    try {
      rec.gamma = relative_bias_gamma(ctx.eval_x, recon);
    } catch (const NumericError&) {
    }
  } else {
    throw ConfigError("eval: --splice must be sae, identity, or zero");
  }

  std::ostringstream out;
  out << kMetricsCsvHeader << '\n' << format_metrics_row(rec) << '\n';
  if (a.out.empty())
    std::cout << out.str();
  else
    write_text_file(a.out, out.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ito
// ---------------------------------------------------------------------------

struct ItoArgs {
  std::string checkpoint;
  std::string data_file;
  GeneratorOpts gen;
  std::size_t eval_rows = 512;
  HostOpts host;
  std::vector<std::size_t> target_ks;
  bool nonneg = true;
  bool oracle = false;
  std::string out;  // empty: stdout
};

int run_ito(const ItoArgs& a) {
  if (!fs::exists(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint);
  SaeModel model = load_checkpoint(a.checkpoint);
  if (a.target_ks.empty()) throw ConfigError("ito: --target-k is required");

  std::vector<std::size_t> ks = a.target_ks;
  std::sort(ks.begin(), ks.end());
  const auto unique_end = std::unique(ks.begin(), ks.end());
  if (unique_end != ks.end()) {
    std::cerr << "warning: duplicate --target-k values deduplicated\n";
    ks.erase(unique_end, ks.end());
  }

  Mat eval_x;
  if (!a.data_file.empty()) {
    ActivationFileReader reader(a.data_file);
    eval_x = reader.read_batch(a.eval_rows);
  } else {
    GroundTruthModel gt = a.gen.build();
    eval_x = sample_batch(gt, a.eval_rows, CounterRng(gt.seed).split(0xE7A1).next_u64()).data;
  }
  if (eval_x.rows == 0) throw ConfigError("ito: empty evaluation set");
  if (eval_x.cols != d_act_of(model))
    throw ConfigError("ito: data dimension does not match the checkpoint");

  EvaluationHost host = make_host(eval_x, a.host.classes, a.host.temperature, a.host.seed);

  // Only the decoder leaves the checkpoint; pursuit never sees the encoder.
  const Mat& w_dec = decoder_weights(model);
  const Vec& b_dec = decoder_bias(model);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ItoPoint> points = a.oracle
                                     ? ito_sweep_oracle(w_dec, b_dec, eval_x, &host, ks, a.nonneg)
                                     : ito_sweep(w_dec, b_dec, eval_x, &host, ks, a.nonneg);
  const double wallclock =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::ostringstream out;
  out << kMetricsCsvHeader << ",target_k\n";
  for (const ItoPoint& p : points) {
    MetricsRecord rec;
    rec.l0 = p.l0;
    rec.mse = p.mse;
    rec.loss_recovered = p.loss_recovered;
    rec.gamma = p.gamma;
    rec.dead_fraction = p.unused_atom_fraction;
    rec.wallclock_s = wallclock;
    out << format_metrics_row(rec) << ',' << p.target_k << '\n';
  }
  if (a.out.empty())
    std::cout << out.str();
  else
    write_text_file(a.out, out.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// demo-shrinkage
// ---------------------------------------------------------------------------

struct DemoShrinkageArgs {
  double lambda = 1.0;
  std::uint64_t steps = 6000;
  double lr = 1e-4;
  std::string out;  // optional CSV path
};

class ConstantOnes final : public RowSource {
 public:
  std::size_t dim() const override { return 1; }
  bool next(std::span<double> out) override {
    out[0] = 1.0;
    return true;
  }
};

int run_demo_shrinkage(const DemoShrinkageArgs& a) {
  TrainConfig cfg;
  cfg.lambda = a.lambda;
  cfg.lr = a.lr;
  cfg.batch_size = 8;
  cfg.total_steps = a.steps;
  cfg.warmup_steps = 100;
  cfg.metrics_every = 0;
  cfg.freeze_decoder = true;

  BaselineSae base;
  base.d_act = 1;
  base.d_feat = 1;
  base.w_enc = Mat(1, 1);
  base.w_enc.at(0, 0) = 1.0;
  base.b_enc = {0.0};
  base.w_dec = Mat(1, 1);
  base.w_dec.at(0, 0) = 1.0;
  base.b_dec = {0.0};

  GatedSae gate;
  gate.d_act = 1;
  gate.d_feat = 1;
  gate.tying = Tying::Tied;
  gate.w_gate = base.w_enc;
  gate.b_gate = {0.0};
  gate.r_mag = {0.0};
  gate.b_mag = {0.0};
  gate.w_dec = base.w_dec;
  gate.b_dec = {0.0};

  ConstantOnes ones;
  auto base_result = train_from(base, ones, cfg);
  const auto& trained_base = std::get<BaselineSae>(base_result.model);
  const double base_recon = decode(trained_base.w_dec, trained_base.b_dec,
                                   baseline_encode(trained_base, Vec{1.0}).features)[0];

  ConstantOnes ones2;
  RescaleShift rs = rescale_shift_fit(trained_base, ones2, a.steps, 8, 1e-2);
  const double rs_recon = decode(trained_base.w_dec, trained_base.b_dec,
                                 rescale_shift_features(trained_base, rs, Vec{1.0}))[0];

  ConstantOnes ones3;
  auto gated_result = train_from(gate, ones3, cfg);
  const auto& trained_gate = std::get<GatedSae>(gated_result.model);
  const double gated_recon = decode(trained_gate.w_dec, trained_gate.b_dec,
                                    gated_encode(trained_gate, Vec{1.0}).features)[0];

  std::cout << "constant input x = 1, lambda = " << a.lambda << ", frozen unit decoder\n"
            << "  baseline reconstruction:     " << base_recon << "\n"
            << "  baseline + rescale & shift:  " << rs_recon << "\n"
            << "  gated reconstruction:        " << gated_recon << "\n";

  if (!a.out.empty()) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "variant,lambda,reconstruction_of_one\n"
        << "baseline," << a.lambda << ',' << base_recon << '\n'
        << "baseline_rescale_shift," << a.lambda << ',' << rs_recon << '\n'
        << "gated," << a.lambda << ',' << gated_recon << '\n';
    write_text_file(a.out, csv.str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// demo-toy1d
// ---------------------------------------------------------------------------

struct DemoToy1dArgs {
  std::size_t n = 100000;
  double p_on = 0.5;
  double mu_on = 2.0;
  double sigma_on = 0.5;
  double sigma_off = 1.0;
  std::uint64_t seed = 0;
  std::string out;  // optional CSV path
};

int run_demo_toy1d(const DemoToy1dArgs& a) {
  auto samples = toy1d_sample(a.n, a.p_on, a.mu_on, a.sigma_on, a.sigma_off, a.seed);

  // Fixed parameterizations compared on the on-distribution above threshold.
  const double t_relu = 1.0, m_relu = 2.0;
  const double t_jump = 1.0, m_jump = 1.0, d_jump = 0.0;
  double mse_relu = 0.0, mse_jump = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    if (!s.is_on || s.value <= 1.0) continue;
    ++count;
    const double r = relu_map(s.value, t_relu, m_relu) - s.value;
    const double j = jumprelu_map(s.value, t_jump, m_jump, d_jump) - s.value;
    mse_relu += r * r;
    mse_jump += j * j;
  }
  if (count == 0) throw NumericError("demo-toy1d: no on-samples above threshold");
  mse_relu /= static_cast<double>(count);
  mse_jump /= static_cast<double>(count);

  std::cout << "toy 1-D feature: on ~ N(" << a.mu_on << ", " << a.sigma_on * a.sigma_on
            << "), off ~ N(0, " << a.sigma_off * a.sigma_off << "), p_on = " << a.p_on << "\n"
            << "on-samples with value > 1: " << count << "\n"
            << "  ReLU(threshold 1, magnitude 2) reconstruction MSE:      " << mse_relu << "\n"
            << "  JumpReLU(threshold 1, magnitude 1, origin 0) recon MSE: " << mse_jump
            << "\n";

  if (!a.out.empty()) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "map,threshold,magnitude,origin,mse_above_threshold,n_samples\n"
        << "relu," << t_relu << ',' << m_relu << ",," << mse_relu << ',' << count << '\n'
        << "jumprelu," << t_jump << ',' << m_jump << ',' << d_jump << ',' << mse_jump << ','
        << count << '\n';
    write_text_file(a.out, csv.str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dictionary-learning experiments on synthetic superposition data"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "generate an activation file");
  add_generator_flags(gen, gen_args.gen);
  gen->add_option("--rows", gen_args.rows, "rows to generate")->required();
  gen->add_option("--seed", gen_args.gen.seed, "generator seed (alias of --data-seed)");
  gen->add_option("--out", gen_args.out, "output activation file")->required();

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "train one SAE");
  tr->add_option("--arch", train_args.arch, "baseline or gated")->required();
  tr->add_option("--d-feat", train_args.d_feat, "learned dictionary size")->required();
  tr->add_option("--data", train_args.data_file, "activation file (omit to generate)");
  add_generator_flags(tr, train_args.gen);
  add_host_flags(tr, train_args.host);
  add_train_config_flags(tr, train_args);
  tr->add_option("--out", train_args.out_dir, "output directory")->required();

  SweepArgs sweep_args;
  auto* sw = app.add_subcommand("sweep", "lambda sweep with compute-matched baselines");
  sw->add_option("--arch", sweep_args.arch, "baseline, gated, or both");
  sw->add_option("--d-feat", sweep_args.base.d_feat, "gated dictionary size")->required();
  sw->add_option("--lambdas", sweep_args.lambdas, "lambda values")->required()->delimiter(',');
  sw->add_option("--workers", sweep_args.workers,
                 "worker pool size (capped by GDICT_THREADS)");
  sw->add_option("--data", sweep_args.base.data_file, "activation file (omit to generate)");
  add_generator_flags(sw, sweep_args.base.gen);
  add_host_flags(sw, sweep_args.base.host);
  add_train_config_flags(sw, sweep_args.base);
  sw->add_option("--out", sweep_args.base.out_dir, "output directory")->required();

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")->required();
  ev->add_option("--data", eval_args.data_file, "activation file (omit to generate)");
  add_generator_flags(ev, eval_args.gen);
  add_host_flags(ev, eval_args.host);
  ev->add_option("--eval-rows", eval_args.eval_rows, "evaluation rows");
  ev->add_option("--splice", eval_args.splice, "sae, identity, or zero");
  ev->add_option("--out", eval_args.out, "CSV output path (default stdout)");

  ItoArgs ito_args;
  auto* it = app.add_subcommand("ito", "inference-time sparse approximation sweep");
  it->add_option("--checkpoint", ito_args.checkpoint, "checkpoint file")->required();
  it->add_option("--data", ito_args.data_file, "activation file (omit to generate)");
  add_generator_flags(it, ito_args.gen);
  add_host_flags(it, ito_args.host);
  it->add_option("--eval-rows", ito_args.eval_rows, "evaluation rows");
  it->add_option("--target-k", ito_args.target_ks, "target sparsity budgets")
      ->required()
      ->delimiter(',');
  it->add_flag("--nonneg,!--no-nonneg", ito_args.nonneg, "nonnegative coefficients");
  it->add_flag("--oracle", ito_args.oracle, "use the exhaustive oracle (guarded)");
  it->add_option("--out", ito_args.out, "CSV output path (default stdout)");

  DemoShrinkageArgs shr_args;
  auto* shr = app.add_subcommand("demo-shrinkage", "1-D shrinkage demonstration");
  shr->add_option("--lambda", shr_args.lambda, "L1 coefficient");
  shr->add_option("--steps", shr_args.steps, "training steps per variant");
  shr->add_option("--lr", shr_args.lr, "learning rate");
  shr->add_option("--out", shr_args.out, "CSV output path");

  DemoToy1dArgs toy_args;
  auto* toy = app.add_subcommand("demo-toy1d", "sparse 1-D feature demonstration");
  toy->add_option("--n", toy_args.n, "sample count");
  toy->add_option("--p-on", toy_args.p_on, "probability the feature is on");
  toy->add_option("--mu-on", toy_args.mu_on, "on-distribution mean");
  toy->add_option("--sigma-on", toy_args.sigma_on, "on-distribution std");
  toy->add_option("--sigma-off", toy_args.sigma_off, "off-distribution std");
  toy->add_option("--seed", toy_args.seed, "sampling seed");
  toy->add_option("--out", toy_args.out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return run_gen_data(gen_args);
    if (*tr) return run_train(train_args);
    if (*sw) return run_sweep(sweep_args);
    if (*ev) return run_eval(eval_args);
    if (*it) return run_ito(ito_args);
    if (*shr) return run_demo_shrinkage(shr_args);
    if (*toy) return run_demo_toy1d(toy_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
