#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/accounting.hpp"
#include "sadnet/adam.hpp"
#include "sadnet/error.hpp"
#include "sadnet/model.hpp"
#include "sadnet/ops.hpp"

namespace sadnet {

struct TrainConfig {
  ModelConfig model{};
  LossKind loss_kind = LossKind::L2;
  std::size_t batch_size = 16;
  std::size_t patch_size = 128;
  double lr = 1e-4;
  std::uint64_t lr_halve_at = 300000;
  std::vector<std::uint64_t> lr_extra_halvings;  // further halving points
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::optional<std::uint64_t> max_iters;
  std::uint64_t seed = 0;
  std::optional<double> sigma;  // overrides the manifest noise level
  std::filesystem::path manifest;
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path resume;
  std::uint64_t log_interval = 100;
  std::uint64_t checkpoint_interval = 1000;
  int threads = 0;  // 0: runtime default

  AdamHyper adam() const { return AdamHyper{lr, beta1, beta2, eps}; }

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (patch_size == 0) throw ConfigError("patch_size must be positive");
    if (patch_size % model.size_divisor() != 0) {
      throw ConfigError("patch_size " + std::to_string(patch_size) + " must be divisible by " +
                        std::to_string(model.size_divisor()) + " (2^(scales-1))");
    }
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (log_interval == 0) throw ConfigError("log_interval must be positive");
    if (checkpoint_interval == 0) throw ConfigError("checkpoint_interval must be positive");
    if (sigma && !(*sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
  }
};

// Learning rate at an iteration: lr before lr_halve_at, halved after it and
// again after each extra halving point.
inline double lr_schedule(std::uint64_t iter, const TrainConfig& cfg) {
  double lr = cfg.lr;
  if (iter >= cfg.lr_halve_at) lr *= 0.5;
  for (auto p : cfg.lr_extra_halvings) {
    if (iter >= p) lr *= 0.5;
  }
  return lr;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    // accept scientific notation for iteration counts such as 3e5
    if (v.find_first_of("eE.") != std::string::npos) {
      const double d = std::stod(v, &used);
      if (used != v.size() || d < 0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
        throw std::invalid_argument("not an integer");
      }
      return static_cast<std::uint64_t>(d);
    }
    const auto r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::vector<std::uint64_t> parse_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  return out;
}

inline std::vector<std::size_t> to_sizes(const std::vector<std::uint64_t>& v) {
  return std::vector<std::size_t>(v.begin(), v.end());
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Returns false when the key is not a model key.
inline bool apply_model_key(ModelConfig& m, const std::string& key, const std::string& value) {
  if (key == "in_channels") m.in_channels = parse_uint(key, value);
  else if (key == "scales") m.scales = parse_uint(key, value);
  else if (key == "channels" || key == "channels_per_scale") m.channels_per_scale = to_sizes(parse_uint_list(key, value));
  else if (key == "resblocks_per_scale") m.resblocks_per_scale = parse_uint(key, value);
  else if (key == "rsabs_per_scale") m.rsabs_per_scale = parse_uint(key, value);
  else if (key == "context_dilations") m.context_dilations = to_sizes(parse_uint_list(key, value));
  else if (key == "context_compression") m.context_compression = parse_uint(key, value);
  else if (key == "leaky_slope") m.leaky_slope = parse_real(key, value);
  else if (key == "kernel_size") m.kernel_size = parse_uint(key, value);
  else if (key == "updown_kernel") m.updown_kernel = parse_uint(key, value);
  else if (key == "offset_channels") m.offset_channels = parse_uint(key, value);
  else return false;
  return true;
}

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line;
};

inline std::vector<KeyValue> parse_key_values(const std::string& text, const std::string& origin) {
  std::vector<KeyValue> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    KeyValue kv{trim(t.substr(0, eq)), trim(t.substr(eq + 1)), lineno};
    if (kv.key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!seen.insert(kv.key).second) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + kv.key + "'");
    }
    out.push_back(std::move(kv));
  }
  return out;
}

}  // namespace detail

inline std::string model_config_to_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "in_channels=" << m.in_channels << "\n";
  os << "scales=" << m.scales << "\n";
  os << "channels=" << join_sizes(m.channels_per_scale) << "\n";
  os << "resblocks_per_scale=" << m.resblocks_per_scale << "\n";
  os << "rsabs_per_scale=" << m.rsabs_per_scale << "\n";
  os << "context_dilations=" << join_sizes(m.context_dilations) << "\n";
  os << "context_compression=" << m.context_compression << "\n";
  os << "leaky_slope=" << detail::format_real(m.leaky_slope) << "\n";
  os << "kernel_size=" << m.kernel_size << "\n";
  os << "updown_kernel=" << m.updown_kernel << "\n";
  os << "offset_channels=" << m.offset_channels << "\n";
  return os.str();
}

inline ModelConfig model_config_from_text(const std::string& text, const std::string& origin = "model config") {
  ModelConfig m;
  for (const auto& kv : detail::parse_key_values(text, origin)) {
    if (!detail::apply_model_key(m, kv.key, kv.value)) {
      throw ConfigError(origin + ":" + std::to_string(kv.line) + ": unknown key '" + kv.key + "'");
    }
  }
  m.validate();
  return m;
}

// Parses a flat key=value training configuration. Unknown keys are rejected;
// relative paths are resolved against `base_dir`.
inline TrainConfig parse_train_config(const std::string& text, const std::filesystem::path& base_dir = {},
                                      const std::string& origin = "config") {
  TrainConfig c;
  auto path_value = [&](const std::string& v) {
    std::filesystem::path p(v);
    return (p.is_absolute() || base_dir.empty()) ? p : base_dir / p;
  };
  for (const auto& kv : detail::parse_key_values(text, origin)) {
    const auto& k = kv.key;
    const auto& v = kv.value;
    if (detail::apply_model_key(c.model, k, v)) continue;
    if (k == "loss") {
      if (v == "L2" || v == "l2") c.loss_kind = LossKind::L2;
      else if (v == "L1" || v == "l1") c.loss_kind = LossKind::L1;
      else throw ConfigError("key 'loss': expected L1 or L2, got '" + v + "'");
    } else if (k == "batch_size") c.batch_size = detail::parse_uint(k, v);
    else if (k == "patch_size") c.patch_size = detail::parse_uint(k, v);
    else if (k == "lr") c.lr = detail::parse_real(k, v);
    else if (k == "lr_halve_at") c.lr_halve_at = detail::parse_uint(k, v);
    else if (k == "lr_extra_halvings") c.lr_extra_halvings = v.empty() ? std::vector<std::uint64_t>{} : detail::parse_uint_list(k, v);
    else if (k == "beta1") c.beta1 = detail::parse_real(k, v);
    else if (k == "beta2") c.beta2 = detail::parse_real(k, v);
    else if (k == "eps") c.eps = detail::parse_real(k, v);
    else if (k == "max_iters") c.max_iters = detail::parse_uint(k, v);
    else if (k == "seed") c.seed = detail::parse_uint(k, v);
    else if (k == "sigma") c.sigma = detail::parse_real(k, v);
    else if (k == "manifest") c.manifest = path_value(v);
    else if (k == "checkpoint_dir") c.checkpoint_dir = path_value(v);
    else if (k == "resume") c.resume = v.empty() ? std::filesystem::path{} : path_value(v);
    else if (k == "log_interval") c.log_interval = detail::parse_uint(k, v);
    else if (k == "checkpoint_interval") c.checkpoint_interval = detail::parse_uint(k, v);
    else if (k == "threads") c.threads = static_cast<int>(detail::parse_uint(k, v));
    else throw ConfigError(origin + ":" + std::to_string(kv.line) + ": unknown key '" + k + "'");
  }
  if (c.model.channels_per_scale.size() != c.model.scales) {
    throw ConfigError("channels_per_scale has " + std::to_string(c.model.channels_per_scale.size()) +
                      " entries but scales = " + std::to_string(c.model.scales));
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), path.parent_path(), path.string());
}

// Field-by-field differences, formatted "field: a vs b".
inline std::vector<std::string> diff_model_configs(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> out;
  auto cmp = [&](const char* name, const std::string& x, const std::string& y) {
    if (x != y) out.push_back(std::string(name) + ": " + x + " vs " + y);
  };
  cmp("in_channels", std::to_string(a.in_channels), std::to_string(b.in_channels));
  cmp("scales", std::to_string(a.scales), std::to_string(b.scales));
  cmp("channels_per_scale", join_sizes(a.channels_per_scale), join_sizes(b.channels_per_scale));
  cmp("resblocks_per_scale", std::to_string(a.resblocks_per_scale), std::to_string(b.resblocks_per_scale));
  cmp("rsabs_per_scale", std::to_string(a.rsabs_per_scale), std::to_string(b.rsabs_per_scale));
  cmp("context_dilations", join_sizes(a.context_dilations), join_sizes(b.context_dilations));
  cmp("context_compression", std::to_string(a.context_compression), std::to_string(b.context_compression));
  cmp("leaky_slope", detail::format_real(a.leaky_slope), detail::format_real(b.leaky_slope));
  cmp("kernel_size", std::to_string(a.kernel_size), std::to_string(b.kernel_size));
  cmp("updown_kernel", std::to_string(a.updown_kernel), std::to_string(b.updown_kernel));
  cmp("offset_channels", std::to_string(a.offset_channels), std::to_string(b.offset_channels));
  return out;
}

inline void require_matching_config(const ModelConfig& expected, const ModelConfig& found, const std::string& what) {
  const auto diff = diff_model_configs(expected, found);
  if (diff.empty()) return;
  std::string msg = what + ": model config mismatch (expected vs found)";
  for (const auto& d : diff) msg += "\n  " + d;
  throw ConfigError(msg);
}

}  // namespace sadnet
