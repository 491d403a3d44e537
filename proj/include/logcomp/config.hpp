#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/model.hpp"

namespace logcomp {

struct ConfigKey {
  std::string_view key;
  std::string_view default_value;
  std::string_view help;
};

/// Every recognized configuration key. Anything else is rejected.
inline constexpr ConfigKey kConfigKeys[] = {
    {"model.d", "128", "embedding width"},
    {"model.n_layers", "4", "transformer blocks"},
    {"model.n_heads", "4", "attention heads per block"},
    {"model.d_mlp", "512", "MLP hidden width"},
    {"model.m", "64", "uncompressed window length (tokens)"},
    {"model.L", "21", "number of compressed slots"},
    {"model.vocab_size", "0", "vocabulary size; 0 derives it from the tokenizer, rounded up to a multiple of 64"},
    {"model.variant", "scale_invariant", "scale_invariant | delta_control"},
    {"filter.k", "50", "filter sharpness (integer >= 1)"},
    {"filter.c", "0.19", "geometric spacing of peak times"},
    {"filter.tau_min", "1", "first peak time (tokens)"},
    {"filter.M", "0", "truncation horizon; 0 uses ceil(tau_max)"},
    {"filter.normalize_rows", "false", "rescale every filter row to unit sum"},
    {"train.peak_lr", "6e-4", "learning rate at the end of warmup"},
    {"train.final_lr", "6e-5", "learning rate at the end of cosine decay"},
    {"train.warmup_steps", "100", "linear warmup steps"},
    {"train.total_steps", "2000", "optimizer steps (end of cosine decay)"},
    {"train.beta1", "0.9", "AdamW beta1"},
    {"train.beta2", "0.95", "AdamW beta2"},
    {"train.eps", "1e-8", "AdamW epsilon"},
    {"train.weight_decay", "0.1", "decoupled weight decay on matrices and embeddings"},
    {"train.clip_norm", "1.0", "global gradient-norm clip"},
    {"train.tokens_per_step", "1024", "tokens per optimizer step (rounded up to whole windows)"},
    {"train.seed", "1337", "seed for init, data order and synthetic data"},
    {"train.eval_interval", "200", "steps between validation passes and checkpoints"},
    {"train.eval_windows", "64", "validation windows per pass during training; 0 = all"},
    {"data.source", "text", "text | synthetic (lag task generated from synthetic.*)"},
    {"data.tokenizer", "byte", "byte | bpe"},
    {"data.vocab", "", "BPE vocab.json (GPT-2 format)"},
    {"data.merges", "", "BPE merges.txt (GPT-2 format)"},
    {"data.train", "", "training text file"},
    {"data.valid", "", "validation text file"},
    {"data.test", "", "test text file"},
    {"synthetic.lag", "80", "lag task: copy distance"},
    {"synthetic.vocab", "16", "lag task: alphabet size"},
    {"synthetic.length", "200000", "lag task: training stream length"},
    {"synthetic.valid_length", "20000", "lag task: validation and test stream length"},
    {"synthetic.seed", "1234", "lag task: stream seed, independent of train.seed"},
    {"eval.dump_log_probs", "false", "write per-token log-probabilities next to the report"},
};

inline bool is_known_key(std::string_view key) {
  return std::ranges::any_of(kConfigKeys, [&](const ConfigKey& k) { return k.key == key; });
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Flat `section.key = value` configuration with defaults for every known key.
class KeyValueConfig {
 public:
  KeyValueConfig() {
    for (const auto& k : kConfigKeys) values_[std::string(k.key)] = std::string(k.default_value);
  }

  /// Reads `key = value` lines. `[section]` headers prefix following keys
  /// with `section.` unless the key is already dotted; `#` starts a comment.
  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad section header");
        section = trim(std::string_view(t).substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      }
      std::string key = trim(std::string_view(t).substr(0, eq));
      if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
      set(key, trim(std::string_view(t).substr(eq + 1)));
    }
  }

  /// `key=value` override.
  void apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (!is_known_key(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key) const {
    const std::string& v = get(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an integer");
    return out;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError(key + ": '" + v + "' is not a number");
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean");
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// Resolved configuration, one `key = value` per line, sorted.
  std::string dump() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
    return out.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

inline int checked_int(const KeyValueConfig& cfg, const std::string& key) {
  const long long v = cfg.get_int(key);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(key + " out of range");
  return static_cast<int>(v);
}

/// Model shape from a resolved config. `raw_vocab` fills model.vocab_size = 0.
inline ModelConfig model_config_from(const KeyValueConfig& cfg, int raw_vocab = 256) {
  ModelConfig mc;
  mc.d = checked_int(cfg, "model.d");
  mc.n_layers = checked_int(cfg, "model.n_layers");
  mc.n_heads = checked_int(cfg, "model.n_heads");
  mc.d_mlp = checked_int(cfg, "model.d_mlp");
  mc.m = checked_int(cfg, "model.m");
  mc.L = checked_int(cfg, "model.L");
  const int vocab = checked_int(cfg, "model.vocab_size");
  mc.vocab_size = padded_vocab_size(vocab > 0 ? vocab : raw_vocab);
  mc.variant = parse_variant(cfg.get("model.variant"));
  mc.k = cfg.get_double("filter.k");
  mc.c = cfg.get_double("filter.c");
  mc.tau_min = cfg.get_double("filter.tau_min");
  mc.M = checked_int(cfg, "filter.M");
  mc.normalize_filter_rows = cfg.get_bool("filter.normalize_rows");
  mc.validate();
  return mc;
}

/// Inverse of ModelConfig::to_map (checkpoint headers).
inline ModelConfig model_config_from_map(const std::map<std::string, std::string>& header) {
  KeyValueConfig cfg;
  for (const auto& [k, v] : header) {
    if (k.starts_with("model.") || k.starts_with("filter.")) cfg.set(k, v);
  }
  return model_config_from(cfg);
}

}  // namespace logcomp
