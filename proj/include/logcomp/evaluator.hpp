#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/model.hpp"
#include "logcomp/random.hpp"

namespace logcomp {

/// Cross-entropy totals and both perplexities, natural log throughout.
struct EvalReport {
  double total_ce = 0;
  long long n_tokens = 0;
  long long n_words = 0;
  double raw_ppl = 0;
  double per_word_ppl = 0;
  std::string fingerprint;

  double mean_ce() const { return total_ce / static_cast<double>(n_tokens); }

  nlohmann::json to_json() const {
    return {{"total_ce", total_ce}, {"n_tokens", n_tokens},         {"n_words", n_words},
            {"mean_ce", mean_ce()}, {"raw_ppl", raw_ppl},           {"per_word_ppl", per_word_ppl},
            {"fingerprint", fingerprint}};
  }

  std::string to_text() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "tokens        %lld\nwords         %lld\ntotal CE      %.6f nats\nmean CE       %.6f nats/token\n"
                  "raw PPL       %.6f\nper-word PPL  %.6f\nconfig        %s\n",
                  n_tokens, n_words, total_ce, mean_ce(), raw_ppl, per_word_ppl, fingerprint.c_str());
    return buf;
  }
};

inline EvalReport make_report(double total_ce, long long n_tokens, long long n_words, std::string fingerprint = {}) {
  require(n_tokens > 0, "evaluation scored no tokens");
  EvalReport r;
  r.total_ce = total_ce;
  r.n_tokens = n_tokens;
  r.n_words = n_words;
  r.raw_ppl = std::exp(total_ce / static_cast<double>(n_tokens));
  r.per_word_ppl = n_words > 0 ? std::exp(total_ce / static_cast<double>(n_words)) : INFINITY;
  r.fingerprint = std::move(fingerprint);
  return r;
}

/// FNV-1a over the sorted config map, hex.
inline std::string config_fingerprint(const ModelConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [k, v] : config.to_map()) {
    for (char ch : k + "=" + v + ";") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct EvalOptions {
  /// Score only the first N windows; 0 scores all of them.
  std::size_t max_windows = 0;
  /// When set, receives the log-probability of every scored token in order.
  std::vector<double>* log_probs = nullptr;
};

/// Stride-m pass over the corpus; every token 1..T-1 is scored exactly once.
/// Sequential, so totals are bit-reproducible. Parameters are only read.
inline EvalReport evaluate(const Model& model, const Corpus& corpus, const EvalOptions& opts = {}) {
  if (corpus.size() < 2) throw ConfigError("cannot evaluate an empty corpus");
  const int m = model.config().m;
  const int M = model.history_length();
  std::size_t n = window_count(corpus.size(), m);
  const bool partial = opts.max_windows > 0 && opts.max_windows < n;
  if (partial) n = opts.max_windows;
  double total = 0.0;
  long long tokens = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Batch b = window_at(corpus.token_ids, i, m, M);
    for (double lp : model.score(b)) {
      total -= lp;
      ++tokens;
      if (opts.log_probs) opts.log_probs->push_back(lp);
    }
  }
  // A truncated pass reports words pro rata to the tokens it scored.
  long long words = corpus.n_words;
  if (partial) {
    words = static_cast<long long>(std::llround(static_cast<double>(corpus.n_words) * static_cast<double>(tokens) /
                                                static_cast<double>(corpus.size() - 1)));
  }
  return make_report(total, tokens, words, config_fingerprint(model.config()));
}

inline constexpr double kLagCopyProbability = 0.9;

/// Stream over `vocab` symbols where each token after the first `lag` copies
/// the token `lag` positions back with probability 0.9 and is otherwise drawn
/// uniformly. Every token counts as one word.
inline Corpus synthetic_lag_task(int lag, int vocab, std::size_t length, std::uint64_t seed,
                                 Split split = Split::train) {
  require(lag >= 1, "lag must be >= 1");
  require(vocab >= 2, "lag task vocabulary must have at least 2 symbols");
  require(static_cast<std::size_t>(lag) < length, "lag must be shorter than the stream");
  Rng rng(seed);
  Corpus c;
  c.split = split;
  c.token_ids.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    if (t >= static_cast<std::size_t>(lag) && rng.uniform() < kLagCopyProbability) {
      c.token_ids[t] = c.token_ids[t - static_cast<std::size_t>(lag)];
    } else {
      c.token_ids[t] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
    }
  }
  c.n_words = static_cast<long long>(length);
  return c;
}

/// Per-token entropy (nats) of the lag process for a predictor that knows the
/// token `lag` back: p(copy value) = 0.9 + 0.1/V, every other symbol 0.1/V.
inline double lag_task_informed_entropy(int vocab) {
  const double v = vocab;
  const double hit = kLagCopyProbability + (1.0 - kLagCopyProbability) / v;
  const double miss = (1.0 - kLagCopyProbability) / v;
  return -hit * std::log(hit) - (v - 1.0) * miss * std::log(miss);
}

/// Entropy without lag information: the marginal is uniform.
inline double lag_task_floor_entropy(int vocab) { return std::log(static_cast<double>(vocab)); }

}  // namespace logcomp
