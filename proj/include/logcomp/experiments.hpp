#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "logcomp/config.hpp"
#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/evaluator.hpp"
#include "logcomp/model.hpp"
#include "logcomp/trainer.hpp"

namespace logcomp {

/// Corpora named by a resolved config. Text splits whose path is empty stay
/// empty; synthetic splits are always generated.
struct Dataset {
  Tokenizer tokenizer = Tokenizer::byte_level();
  int raw_vocab = 256;
  Corpus train, valid, test;

  const Corpus& split(Split s) const { return s == Split::train ? train : s == Split::valid ? valid : test; }
};

inline Dataset load_dataset(const KeyValueConfig& cfg) {
  Dataset ds;
  const std::string source = cfg.get("data.source");
  if (source == "synthetic") {
    const int lag = checked_int(cfg, "synthetic.lag");
    const int vocab = checked_int(cfg, "synthetic.vocab");
    const auto length = static_cast<std::size_t>(cfg.get_int("synthetic.length"));
    const auto vlen = static_cast<std::size_t>(cfg.get_int("synthetic.valid_length"));
    const auto seed = static_cast<std::uint64_t>(cfg.get_int("synthetic.seed"));
    ds.raw_vocab = vocab;
    ds.train = synthetic_lag_task(lag, vocab, length, mix_seed(seed, 0), Split::train);
    ds.valid = synthetic_lag_task(lag, vocab, vlen, mix_seed(seed, 1), Split::valid);
    ds.test = synthetic_lag_task(lag, vocab, vlen, mix_seed(seed, 2), Split::test);
    return ds;
  }
  if (source != "text") throw ConfigError("data.source must be text or synthetic (got '" + source + "')");
  ds.tokenizer = Tokenizer::from_spec(cfg.get("data.tokenizer"), cfg.get("data.vocab"), cfg.get("data.merges"));
  ds.raw_vocab = ds.tokenizer.raw_vocab_size();
  const auto load = [&](const char* key, Split s) {
    const std::string path = cfg.get(key);
    return path.empty() ? Corpus{{}, 0, s} : load_corpus(path, ds.tokenizer, s);
  };
  ds.train = load("data.train", Split::train);
  ds.valid = load("data.valid", Split::valid);
  ds.test = load("data.test", Split::test);
  return ds;
}

struct ComparisonRow {
  int L = 0;
  std::uint64_t seed = 0;
  double scale_invariant_ce = 0;
  double delta_control_ce = 0;

  double difference() const { return scale_invariant_ce - delta_control_ce; }
  bool compression_wins() const { return scale_invariant_ce < delta_control_ce; }
};

struct Comparison {
  std::vector<ComparisonRow> rows;

  bool compression_wins_all() const {
    if (rows.empty()) return false;
    for (const auto& r : rows) {
      if (!r.compression_wins()) return false;
    }
    return true;
  }

  void write_csv(std::ostream& out) const {
    out << "L,seed,scale_invariant_ce,delta_control_ce,difference,compression_wins\n";
    for (const auto& r : rows) {
      out << r.L << ',' << r.seed << ',' << format_double(r.scale_invariant_ce) << ','
          << format_double(r.delta_control_ce) << ',' << format_double(r.difference()) << ','
          << (r.compression_wins() ? "true" : "false") << '\n';
    }
  }
};

/// Trains a fresh model and returns its mean validation CE over the full
/// validation corpus.
inline double train_and_score(const ModelConfig& config, const Corpus& train, const Corpus& valid,
                              const TrainConfig& tc, const std::filesystem::path& out_dir = {}) {
  Model model(config, tc.seed);
  Trainer trainer(model, train, &valid, tc, out_dir);
  trainer.run();
  return evaluate(model, valid).mean_ce();
}

/// Checks that two configurations differ only in `variant`, one of each kind.
inline void require_matched_pair(const ModelConfig& si, const ModelConfig& dc) {
  require(si.variant == Variant::scale_invariant && dc.variant == Variant::delta_control,
          "compare: each pair needs (scale_invariant, delta_control)");
  ModelConfig a = si;
  a.variant = Variant::delta_control;
  require(a == dc, "compare: paired configurations differ in more than the variant");
}

/// For every matched pair and seed, trains both variants under the same loop
/// and budget and records their validation cross-entropy. With `out_root`, each
/// run writes to `<out_root>/L<L>_seed<seed>_<variant>`.
inline Comparison compare_variants(const std::vector<std::pair<ModelConfig, ModelConfig>>& pairs,
                                   const Corpus& train, const Corpus& valid, const TrainConfig& base,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::function<void(const ComparisonRow&)>& on_row = {},
                                   const std::filesystem::path& out_root = {}) {
  for (const auto& [si, dc] : pairs) require_matched_pair(si, dc);
  Comparison out;
  for (const auto& [si, dc] : pairs) {
    for (auto seed : seeds) {
      TrainConfig tc = base;
      tc.seed = seed;
      ComparisonRow row;
      row.L = si.L;
      row.seed = seed;
      const auto dir = [&](const ModelConfig& c) {
        if (out_root.empty()) return std::filesystem::path{};
        return out_root / ("L" + std::to_string(c.L) + "_seed" + std::to_string(seed) + "_" + to_string(c.variant));
      };
      row.scale_invariant_ce = train_and_score(si, train, valid, tc, dir(si));
      row.delta_control_ce = train_and_score(dc, train, valid, tc, dir(dc));
      if (on_row) on_row(row);
      out.rows.push_back(row);
    }
  }
  return out;
}

}  // namespace logcomp
