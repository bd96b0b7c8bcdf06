#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gdict/errors.hpp"
#include "gdict/training.hpp"

namespace gdict {

// Flat key=value configuration: one assignment per line, '#' starts a
// comment, blank lines ignored. Later assignments win.
using KvMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

inline KvMap parse_kv_text(const std::string& text, const std::string& origin = "<config>") {
  KvMap out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

inline KvMap parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_kv_text(buf.str(), path);
}

inline double kv_double(const KvMap& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "': not a number: '" + it->second + "'");
  }
}

inline std::uint64_t kv_u64(const KvMap& kv, const std::string& key, std::uint64_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "': not a nonnegative integer: '" +
                      it->second + "'");
  }
}

inline bool kv_bool(const KvMap& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
}

inline const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys = {
      "lambda",          "lr",
      "beta1",           "beta2",
      "eps",             "batch_size",
      "total_steps",     "warmup_steps",
      "resample_every",  "dead_window",
      "resample_lr_factor", "resample_warmup_steps",
      "unfreeze_decoder", "no_rmag",
      "untied_encoders", "normalize_recon_by_input_norm",
      "freeze_decoder",  "metrics_every",
      "checkpoint_every", "seed"};
  return keys;
}

// Rejects keys that are neither TrainConfig fields nor explicitly allowed
// experiment-level extras, so a typo cannot silently fall back to a default.
inline void require_known_keys(const KvMap& kv,
                               const std::vector<std::string>& extra_allowed = {}) {
  for (const auto& [key, value] : kv) {
    (void)value;
    const auto& known = train_config_keys();
    if (std::find(known.begin(), known.end(), key) != known.end()) continue;
    if (std::find(extra_allowed.begin(), extra_allowed.end(), key) != extra_allowed.end())
      continue;
    throw ConfigError("unknown config key: '" + key + "'");
  }
}

// Applies the TrainConfig-mirroring keys from kv on top of base.
inline TrainConfig apply_train_keys(const KvMap& kv, TrainConfig base) {
  base.lambda = kv_double(kv, "lambda", base.lambda);
  base.lr = kv_double(kv, "lr", base.lr);
  base.beta1 = kv_double(kv, "beta1", base.beta1);
  base.beta2 = kv_double(kv, "beta2", base.beta2);
  base.eps = kv_double(kv, "eps", base.eps);
  base.batch_size = static_cast<std::size_t>(kv_u64(kv, "batch_size", base.batch_size));
  base.total_steps = kv_u64(kv, "total_steps", base.total_steps);
  base.warmup_steps = kv_u64(kv, "warmup_steps", base.warmup_steps);
  base.resample_every = kv_u64(kv, "resample_every", base.resample_every);
  base.dead_window = kv_u64(kv, "dead_window", base.dead_window);
  base.resample_lr_factor = kv_double(kv, "resample_lr_factor", base.resample_lr_factor);
  base.resample_warmup_steps =
      kv_u64(kv, "resample_warmup_steps", base.resample_warmup_steps);
  base.ablation.unfreeze_decoder =
      kv_bool(kv, "unfreeze_decoder", base.ablation.unfreeze_decoder);
  base.ablation.no_rmag = kv_bool(kv, "no_rmag", base.ablation.no_rmag);
  base.ablation.untied_encoders =
      kv_bool(kv, "untied_encoders", base.ablation.untied_encoders);
  base.normalize_recon_by_input_norm =
      kv_bool(kv, "normalize_recon_by_input_norm", base.normalize_recon_by_input_norm);
  base.freeze_decoder = kv_bool(kv, "freeze_decoder", base.freeze_decoder);
  base.metrics_every = kv_u64(kv, "metrics_every", base.metrics_every);
  base.checkpoint_every = kv_u64(kv, "checkpoint_every", base.checkpoint_every);
  base.seed = kv_u64(kv, "seed", base.seed);
  return base;
}

inline std::string serialize_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "lambda=" << c.lambda << '\n'
      << "lr=" << c.lr << '\n'
      << "beta1=" << c.beta1 << '\n'
      << "beta2=" << c.beta2 << '\n'
      << "eps=" << c.eps << '\n'
      << "batch_size=" << c.batch_size << '\n'
      << "total_steps=" << c.total_steps << '\n'
      << "warmup_steps=" << c.warmup_steps << '\n'
      << "resample_every=" << c.resample_every << '\n'
      << "dead_window=" << c.dead_window << '\n'
      << "resample_lr_factor=" << c.resample_lr_factor << '\n'
      << "resample_warmup_steps=" << c.resample_warmup_steps << '\n'
      << "unfreeze_decoder=" << (c.ablation.unfreeze_decoder ? "true" : "false") << '\n'
      << "no_rmag=" << (c.ablation.no_rmag ? "true" : "false") << '\n'
      << "untied_encoders=" << (c.ablation.untied_encoders ? "true" : "false") << '\n'
      << "normalize_recon_by_input_norm="
      << (c.normalize_recon_by_input_norm ? "true" : "false") << '\n'
      << "freeze_decoder=" << (c.freeze_decoder ? "true" : "false") << '\n'
      << "metrics_every=" << c.metrics_every << '\n'
      << "checkpoint_every=" << c.checkpoint_every << '\n'
      << "seed=" << c.seed << '\n';
  return out.str();
}

}  // namespace gdict
