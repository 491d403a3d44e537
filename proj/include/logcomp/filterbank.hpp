#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "logcomp/error.hpp"
#include "logcomp/matrix.hpp"

namespace logcomp {

/// Shape of a log-spaced filter bank.
///
/// `k` sets the sharpness of every filter, `c` the geometric spacing between
/// consecutive peak times, `tau_min` the first peak (in tokens), `L` the number
/// of filters and `M` the truncation horizon. `M == 0` means "derive it":
/// ceil(tau_min * (1 + c)^(L - 1)).
struct FilterBankConfig {
  double k = 50;
  double c = 0.19;
  double tau_min = 1.0;
  int L = 10;
  int M = 0;
  /// Rescale each discrete row to sum to one. Off by default.
  bool normalize_rows = false;

  void validate() const {
    require(k >= 1 && std::floor(k) == k, "filter k must be an integer >= 1 (got " + std::to_string(k) + ")");
    require(c > 0 && std::isfinite(c), "filter spacing c must be > 0");
    require(tau_min > 0 && std::isfinite(tau_min), "filter tau_min must be > 0");
    require(L >= 1, "filter count L must be >= 1");
    require(M >= 0, "filter horizon M must be >= 1 (or 0 for automatic)");
  }

  double tau_max() const { return tau_min * std::pow(1.0 + c, L - 1); }

  /// Resolved truncation horizon.
  int horizon() const { return M > 0 ? M : static_cast<int>(std::ceil(tau_max() - 1e-9)); }
};

/// log Φ(t, τ*) for the gamma-shaped impulse response
///   Φ(t, τ*) = k^(k+1)/k! · (t/τ*)^k · exp(-k t/τ*),
/// evaluated entirely in log space so that k in the hundreds does not overflow.
inline double log_phi(double t, double tau, double k) {
  if (!(t > 0) || !std::isfinite(t)) throw ConfigError("phi: t must be finite and > 0");
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("phi: tau must be finite and > 0");
  if (!(k >= 1) || std::floor(k) != k) throw ConfigError("phi: k must be an integer >= 1");
  const double ratio = t / tau;
  return (k + 1.0) * std::log(k) - std::lgamma(k + 1.0) + k * std::log(ratio) - k * ratio;
}

inline double eval_phi(double t, double tau, double k) { return std::exp(log_phi(t, tau, k)); }

/// Peak times tau_min · (1+c)^i for i = 0..L-1.
inline std::vector<double> tau_grid(const FilterBankConfig& config) {
  config.validate();
  std::vector<double> taus(static_cast<std::size_t>(config.L));
  double tau = config.tau_min;
  for (auto& t : taus) {
    t = tau;
    tau *= 1.0 + config.c;
  }
  return taus;
}

/// Floor for discrete weights. Far tails of sharp filters (k = 200, t' ≫ τ*)
/// fall below the double range; they are stored as this value so every lag
/// keeps a strictly positive, normal weight.
inline constexpr double kMinFilterWeight = 1e-300;

/// Discretized bank: row i holds Φ(t', τ*_i) for t' = 1..M, rows ascending in τ*.
/// Immutable once built.
class FilterBank {
 public:
  static FilterBank build(const FilterBankConfig& config) {
    config.validate();
    FilterBank bank;
    bank.config_ = config;
    bank.taus_ = tau_grid(config);
    bank.M_ = config.horizon();
    require(bank.M_ >= 1, "filter horizon M must be >= 1");
    if (bank.taus_.front() > bank.M_) {
      throw ConfigError("filter horizon M=" + std::to_string(bank.M_) +
                        " lies before every filter peak (smallest tau=" + std::to_string(bank.taus_.front()) + ")");
    }
    bank.weights_.resize(static_cast<std::size_t>(config.L) * static_cast<std::size_t>(bank.M_));
    for (int i = 0; i < config.L; ++i) {
      auto row = bank.mutable_row(i);
      double sum = 0.0;
      for (int j = 0; j < bank.M_; ++j) {
        row[j] = std::max(eval_phi(static_cast<double>(j + 1), bank.taus_[i], config.k), kMinFilterWeight);
        sum += row[j];
      }
      if (config.normalize_rows) {
        for (auto& w : row) w /= sum;
      }
    }
    bank.build_lag_major();
    return bank;
  }

  /// Shift-register bank: filter i picks exactly lag i+1. Used by the
  /// delta-pulse control; peak times are the lags themselves.
  static FilterBank delta(int L) {
    require(L >= 1, "delta bank needs L >= 1");
    FilterBank bank;
    bank.config_.L = L;
    bank.config_.M = L;
    bank.config_.tau_min = 1.0;
    bank.config_.c = 0.0;
    bank.M_ = L;
    bank.delta_ = true;
    bank.taus_.resize(static_cast<std::size_t>(L));
    bank.weights_.assign(static_cast<std::size_t>(L) * static_cast<std::size_t>(L), 0.0);
    for (int i = 0; i < L; ++i) {
      bank.taus_[i] = i + 1.0;
      bank.mutable_row(i)[i] = 1.0;
    }
    bank.build_lag_major();
    return bank;
  }

  const FilterBankConfig& config() const noexcept { return config_; }
  int size() const noexcept { return static_cast<int>(taus_.size()); }
  int horizon() const noexcept { return M_; }
  bool is_delta() const noexcept { return delta_; }
  std::span<const double> taus() const noexcept { return taus_; }

  std::span<const double> row(int i) const {
    return {weights_.data() + static_cast<std::size_t>(i) * M_, static_cast<std::size_t>(M_)};
  }
  double weight(int i, int lag_index) const { return weights_[static_cast<std::size_t>(i) * M_ + lag_index]; }
  std::span<const double> weights() const noexcept { return weights_; }

  /// Same weights transposed to M×L, lag-major, with columns in descending-τ*
  /// slot order: entry (t'-1, r) is Φ(t', τ*_{L-1-r}).
  std::span<const double> lag_major_weights() const noexcept { return lag_major_; }

 private:
  void build_lag_major() {
    const std::size_t L = taus_.size();
    lag_major_.resize(L * static_cast<std::size_t>(M_));
    for (std::size_t i = 0; i < L; ++i) {
      for (int j = 0; j < M_; ++j) lag_major_[static_cast<std::size_t>(j) * L + (L - 1 - i)] = weight(static_cast<int>(i), j);
    }
  }

  std::span<double> mutable_row(int i) {
    return {weights_.data() + static_cast<std::size_t>(i) * M_, static_cast<std::size_t>(M_)};
  }

  FilterBankConfig config_;
  std::vector<double> taus_;
  AlignedVector weights_;
  AlignedVector lag_major_;
  int M_ = 0;
  bool delta_ = false;
};

/// Weighted moments of a discrete impulse response over t' = 1..M.
struct RowMoments {
  double mass = 0;
  double mean = 0;
  double stddev = 0;
  double cv() const { return stddev / mean; }
};

inline RowMoments row_moments(std::span<const double> row) {
  RowMoments m;
  for (std::size_t j = 0; j < row.size(); ++j) {
    m.mass += row[j];
    m.mean += row[j] * static_cast<double>(j + 1);
  }
  m.mean /= m.mass;
  double var = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double dt = static_cast<double>(j + 1) - m.mean;
    var += row[j] * dt * dt;
  }
  m.stddev = std::sqrt(var / m.mass);
  return m;
}

/// Index of the largest entry; lowest index wins ties.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV `filter_index,tau_star,t_prime,weight`, filter-major, ascending t'.
inline void export_impulse_responses(const FilterBank& bank, std::ostream& out) {
  out << "filter_index,tau_star,t_prime,weight\n";
  for (int i = 0; i < bank.size(); ++i) {
    const std::string tau = format_double(bank.taus()[i]);
    const auto row = bank.row(i);
    for (int j = 0; j < bank.horizon(); ++j) {
      out << i << ',' << tau << ',' << (j + 1) << ',' << format_double(row[j]) << '\n';
    }
  }
  if (!out) throw IoError("impulse response export failed");
}

inline void export_impulse_responses(const FilterBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  export_impulse_responses(bank, out);
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace logcomp
