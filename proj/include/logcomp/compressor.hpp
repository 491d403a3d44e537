#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "logcomp/error.hpp"
#include "logcomp/filterbank.hpp"
#include "logcomp/matrix.hpp"

namespace logcomp {

/// Embeddings f(1..T) of the tokens strictly before a chunk boundary, one row
/// per token, oldest first.
using EmbeddingSequence = Matrix;

/// L compressed vectors at boundary t0. Row 0 is the most distant scale
/// (largest τ*), the last row the most recent one.
struct CompressedSlots {
  Matrix slots;
  std::vector<double> tau_grid;  // same order as `slots`
  long long t0 = 0;
};

namespace detail {

/// out[r] = Σ_{t'=1}^{min(M,T)} Φ(t', τ*_{L-1-r}) · seq[T - t'], i.e. the bank
/// applied causally with slots written in descending-τ* order. One pass over
/// the history: each group of four lags updates the L×d output, which stays in
/// cache, so the cost is exactly lags·L·d multiply-adds.
inline Matrix apply_bank(const FilterBank& bank, const Matrix& seq) {
  const std::size_t L = static_cast<std::size_t>(bank.size());
  const std::size_t d = seq.cols();
  const std::size_t T = seq.rows();
  const std::size_t lags = std::min<std::size_t>(static_cast<std::size_t>(bank.horizon()), T);
  Matrix out(L, d);
  if (lags == 0 || d == 0) return out;
  const double* w = bank.lag_major_weights().data();
  const double* x = seq.data().data();
  double* y = out.data().data();
  std::size_t j = 0;
  for (; j + 4 <= lags; j += 4) {
    const double* w_row = w + j * L;
    const double* x0 = x + (T - 1 - j) * d;
    const double* x1 = x0 - d;
    const double* x2 = x1 - d;
    const double* x3 = x2 - d;
    for (std::size_t r = 0; r < L; ++r) {
      const double w0 = w_row[r], w1 = w_row[L + r], w2 = w_row[2 * L + r], w3 = w_row[3 * L + r];
      double* y_row = y + r * d;
      for (std::size_t c = 0; c < d; ++c) y_row[c] += (w0 * x0[c] + w1 * x1[c]) + (w2 * x2[c] + w3 * x3[c]);
    }
  }
  for (; j < lags; ++j) {
    const double* w_row = w + j * L;
    const double* x_row = x + (T - 1 - j) * d;
    for (std::size_t r = 0; r < L; ++r) {
      const double wr = w_row[r];
      double* y_row = y + r * d;
      for (std::size_t c = 0; c < d; ++c) y_row[c] += wr * x_row[c];
    }
  }
  return out;
}

/// Adjoint of apply_bank: gradient w.r.t. the T×d input given the slot gradient.
inline void apply_bank_adjoint(const FilterBank& bank, const Matrix& slot_grad, Matrix& seq_grad) {
  const std::size_t L = static_cast<std::size_t>(bank.size());
  const std::size_t d = seq_grad.cols();
  const std::size_t T = seq_grad.rows();
  const std::size_t lags = std::min<std::size_t>(static_cast<std::size_t>(bank.horizon()), T);
  if (lags == 0 || d == 0) return;
  const double* w = bank.lag_major_weights().data();
  const double* g = slot_grad.data().data();
  double* x = seq_grad.data().data();
  for (std::size_t j = 0; j < lags; ++j) {
    const double* w_row = w + j * L;
    double* x_row = x + (T - 1 - j) * d;
    std::size_t r = 0;
    for (; r + 4 <= L; r += 4) {
      const double w0 = w_row[r], w1 = w_row[r + 1], w2 = w_row[r + 2], w3 = w_row[r + 3];
      const double* g0 = g + r * d;
      const double* g1 = g0 + d;
      const double* g2 = g1 + d;
      const double* g3 = g2 + d;
      for (std::size_t c = 0; c < d; ++c) x_row[c] += (w0 * g0[c] + w1 * g1[c]) + (w2 * g2[c] + w3 * g3[c]);
    }
    for (; r < L; ++r) {
      const double wr = w_row[r];
      const double* g_row = g + r * d;
      for (std::size_t c = 0; c < d; ++c) x_row[c] += wr * g_row[c];
    }
  }
}

inline std::vector<double> descending_taus(const FilterBank& bank) {
  std::vector<double> taus(bank.taus().rbegin(), bank.taus().rend());
  return taus;
}

}  // namespace detail

/// Causal depth-wise convolution of the history with every filter of the bank.
/// History shorter than the bank horizon is treated as zero-padded on the left.
inline CompressedSlots compress(const EmbeddingSequence& history, const FilterBank& bank, long long t0) {
  require(history.cols() >= 1 || history.rows() == 0, "compress: embedding dimension must be >= 1");
  CompressedSlots out;
  out.slots = detail::apply_bank(bank, history);
  out.tau_grid = detail::descending_taus(bank);
  out.t0 = t0;
  return out;
}

inline CompressedSlots compress(const EmbeddingSequence& history, const FilterBank& bank) {
  return compress(history, bank, static_cast<long long>(history.rows()) + 1);
}

/// Delta-pulse control: slot for lag i (i = 1..L) is the raw embedding
/// f(t0 - i), zero where the history is too short. Same descending order as
/// compress(): row 0 holds lag L, row L-1 holds lag 1.
inline CompressedSlots delta_slots(const EmbeddingSequence& history, int L, std::size_t d) {
  require(L >= 1, "delta_slots: L must be >= 1");
  if (history.rows() > 0) require(history.cols() == d, "delta_slots: embedding dimension mismatch");
  CompressedSlots out;
  out.slots = Matrix(static_cast<std::size_t>(L), d);
  out.tau_grid.resize(static_cast<std::size_t>(L));
  const std::size_t T = history.rows();
  for (int lag = 1; lag <= L; ++lag) {
    const std::size_t r = static_cast<std::size_t>(L - lag);
    out.tau_grid[r] = lag;
    if (static_cast<std::size_t>(lag) > T) continue;
    std::ranges::copy(history.row(T - lag), out.slots.row(r).begin());
  }
  out.t0 = static_cast<long long>(T) + 1;
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-slot standardization with one shared gain/bias pair.
inline CompressedSlots normalize_slots(const CompressedSlots& in, std::span<const double> gain,
                                       std::span<const double> bias) {
  CompressedSlots out = in;
  out.slots = layernorm_rows(in.slots, gain, bias, kLayerNormEps);
  return out;
}

}  // namespace logcomp
