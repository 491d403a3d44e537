#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "logcomp/compressor.hpp"
#include "logcomp/error.hpp"
#include "logcomp/filterbank.hpp"
#include "logcomp/matrix.hpp"

/// Define-by-run reverse-mode differentiation over 2-D double matrices.
///
/// Every op takes the Tape it records onto. Leaves (parameters, inputs) live
/// outside the tape; calling Tape::backward accumulates into every tensor that
/// requires a gradient, intermediates included, so tests can read gradients
/// of internal activations.
namespace logcomp::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Matrix(value.rows(), value.cols());
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Matrix value, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->value = std::move(value);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) t.node_->ensure_grad();
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::vector<std::size_t> shape() const { return {rows(), cols()}; }
  double item() const {
    require(rows() == 1 && cols() == 1, "item() on non-scalar tensor " + value().shape_string());
    return value()(0, 0);
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.fill(0.0);
  }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  using Backward = std::function<void(const Matrix& out_grad)>;

  /// Adds an op output. The backward closure is only kept when some input
  /// needs a gradient.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, Backward backward) {
    return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Tensor record(Matrix value, std::span<const Tensor> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    Tensor out = Tensor::leaf(std::move(value), needs);
    if (needs) entries_.push_back({out.node(), std::move(backward)});
    return out;
  }

  void backward(const Tensor& loss) {
    require(loss.rows() == 1 && loss.cols() == 1,
            "backward() needs a scalar loss, got " + loss.value().shape_string());
    if (!loss.requires_grad()) return;
    loss.node()->ensure_grad();
    loss.node()->grad(0, 0) += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward(it->output->grad);
  }

  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<Node> output;
    Backward backward;
  };
  std::vector<Entry> entries_;
};

namespace detail {

inline void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ConfigError(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                      b.value().shape_string());
  }
}

inline Matrix& grad_of(const Tensor& t) { return t.node()->grad; }

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: shape mismatch " + a.value().shape_string() + " * " + b.value().shape_string());
  }
  Matrix out(a.rows(), b.cols());
  out.eigen().noalias() = a.value().eigen() * b.value().eigen();
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) detail::grad_of(a).eigen().noalias() += g.eigen() * b.value().eigen().transpose();
    if (b.requires_grad()) detail::grad_of(b).eigen().noalias() += a.value().eigen().transpose() * g.eigen();
  });
}

/// a · bᵀ
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("matmul_nt: shape mismatch " + a.value().shape_string() + " * (" +
                      b.value().shape_string() + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  out.eigen().noalias() = a.value().eigen() * b.value().eigen().transpose();
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) detail::grad_of(a).eigen().noalias() += g.eigen() * b.value().eigen();
    if (b.requires_grad()) detail::grad_of(b).eigen().noalias() += g.eigen().transpose() * a.value().eigen();
  });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "add");
  Matrix out = a.value();
  out.eigen() += b.value().eigen();
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) detail::grad_of(a).eigen() += g.eigen();
    if (b.requires_grad()) detail::grad_of(b).eigen() += g.eigen();
  });
}

/// a + broadcast of the 1×n row vector `bias` over every row.
inline Tensor add_row(Tape& tape, const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ConfigError("add_row: bias " + bias.value().shape_string() + " does not match " +
                      a.value().shape_string());
  }
  Matrix out = a.value();
  out.eigen().rowwise() += bias.value().eigen().row(0);
  return tape.record(std::move(out), {a, bias}, [a, bias](const Matrix& g) {
    if (a.requires_grad()) detail::grad_of(a).eigen() += g.eigen();
    if (bias.requires_grad()) detail::grad_of(bias).eigen() += g.eigen().colwise().sum();
  });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same(a, b, "mul");
  Matrix out = a.value();
  out.eigen().array() *= b.value().eigen().array();
  return tape.record(std::move(out), {a, b}, [a, b](const Matrix& g) {
    if (a.requires_grad()) detail::grad_of(a).eigen().array() += g.eigen().array() * b.value().eigen().array();
    if (b.requires_grad()) detail::grad_of(b).eigen().array() += g.eigen().array() * a.value().eigen().array();
  });
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  Matrix out = a.value();
  out.eigen() *= s;
  return tape.record(std::move(out), {a}, [a, s](const Matrix& g) { detail::grad_of(a).eigen() += s * g.eigen(); });
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  Matrix out(1, 1, a.value().eigen().sum());
  return tape.record(std::move(out), {a}, [a](const Matrix& g) { detail::grad_of(a).eigen().array() += g(0, 0); });
}

/// GELU, tanh approximation.
inline Tensor gelu(Tape& tape, const Tensor& a) {
  constexpr double kAlpha = 0.044715;
  const double kBeta = std::sqrt(2.0 / std::numbers::pi);
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  auto tanh_cache = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    const double th = std::tanh(kBeta * (v + kAlpha * v * v * v));
    (*tanh_cache)[i] = th;
    out.data()[i] = 0.5 * v * (1.0 + th);
  }
  return tape.record(std::move(out), {a}, [a, tanh_cache, kBeta](const Matrix& g) {
    const auto& xv = a.value().data();
    auto& ga = detail::grad_of(a).data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double th = (*tanh_cache)[i];
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kBeta * (1.0 + 3.0 * kAlpha * v * v);
      ga[i] += g.data()[i] * d;
    }
  });
}

/// Row-wise softmax. `allowed`, when non-empty, is a rows×cols 0/1 mask;
/// disallowed entries get probability exactly zero.
inline Tensor softmax_lastdim(Tape& tape, const Tensor& a, std::span<const std::uint8_t> allowed = {}) {
  const Matrix& x = a.value();
  require(allowed.empty() || allowed.size() == x.size(), "softmax: mask size does not match input");
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    double mx = -INFINITY;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (allowed.empty() || allowed[r * x.cols() + c]) mx = std::max(mx, in[c]);
    }
    if (mx == -INFINITY) throw ConfigError("softmax: row " + std::to_string(r) + " has no allowed entries");
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      o[c] = (allowed.empty() || allowed[r * x.cols() + c]) ? std::exp(in[c] - mx) : 0.0;
      z += o[c];
    }
    for (auto& v : o) v /= z;
  }
  auto probs = std::make_shared<Matrix>(out);
  return tape.record(std::move(out), {a}, [a, probs](const Matrix& g) {
    auto& ga = detail::grad_of(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto y = probs->row(r);
      const auto gy = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < y.size(); ++c) dot += y[c] * gy[c];
      auto gx = ga.row(r);
      for (std::size_t c = 0; c < y.size(); ++c) gx[c] += y[c] * (gy[c] - dot);
    }
  });
}

/// Row-wise layer normalization with 1×n gain and bias.
inline Tensor layernorm_lastdim(Tape& tape, const Tensor& a, const Tensor& gain, const Tensor& bias,
                                double eps = kLayerNormEps) {
  auto xhat = std::make_shared<Matrix>();
  auto rstd = std::make_shared<std::vector<double>>();
  Matrix out = layernorm_rows(a.value(), gain.value().row(0), bias.value().row(0), eps, xhat.get(), rstd.get());
  return tape.record(std::move(out), {a, gain, bias}, [a, gain, bias, xhat, rstd](const Matrix& g) {
    const std::size_t n = g.cols();
    const auto gv = gain.value().row(0);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto gy = g.row(r);
      const auto xh = xhat->row(r);
      if (gain.requires_grad()) {
        auto gg = detail::grad_of(gain).row(0);
        for (std::size_t c = 0; c < n; ++c) gg[c] += gy[c] * xh[c];
      }
      if (bias.requires_grad()) {
        auto gb = detail::grad_of(bias).row(0);
        for (std::size_t c = 0; c < n; ++c) gb[c] += gy[c];
      }
      if (a.requires_grad()) {
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double dxh = gy[c] * gv[c];
          mean_d += dxh;
          mean_dx += dxh * xh[c];
        }
        mean_d /= static_cast<double>(n);
        mean_dx /= static_cast<double>(n);
        auto gx = detail::grad_of(a).row(r);
        for (std::size_t c = 0; c < n; ++c) {
          gx[c] += (*rstd)[r] * (gy[c] * gv[c] - mean_d - xh[c] * mean_dx);
        }
      }
    }
  });
}

inline Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  Matrix out(ids.size(), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= table.rows()) {
      throw ConfigError("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                        std::to_string(table.rows()) + " rows");
    }
    std::ranges::copy(table.value().row(static_cast<std::size_t>(ids[r])), out.row(r).begin());
  }
  auto idx = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [table, idx](const Matrix& g) {
    auto& gt = detail::grad_of(table);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      auto dst = gt.row(static_cast<std::size_t>((*idx)[r]));
      const auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Fixed-weight causal depth-wise convolution of a T×d sequence with a filter
/// bank, evaluated at the boundary just after the last row. Returns L×d slots
/// in descending-τ* order. Shares its kernel with compress().
inline Tensor depthwise_causal_conv(Tape& tape, const Tensor& seq, const FilterBank& bank) {
  Matrix out = logcomp::detail::apply_bank(bank, seq.value());
  return tape.record(std::move(out), {seq}, [seq, &bank](const Matrix& g) {
    logcomp::detail::apply_bank_adjoint(bank, g, detail::grad_of(seq));
  });
}

inline Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.cols(), "slice_cols: range out of bounds");
  Matrix out(a.rows(), count);
  out.eigen() = a.value().eigen().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return tape.record(std::move(out), {a}, [a, begin, count](const Matrix& g) {
    detail::grad_of(a).eigen().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        g.eigen();
  });
}

inline Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t begin, std::size_t count) {
  require(begin + count <= a.rows(), "slice_rows: range out of bounds");
  Matrix out(count, a.cols());
  out.eigen() = a.value().eigen().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return tape.record(std::move(out), {a}, [a, begin, count](const Matrix& g) {
    detail::grad_of(a).eigen().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        g.eigen();
  });
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts.front().rows(), "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  std::size_t at = 0;
  for (const auto& p : parts) {
    out.eigen().middleCols(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(p.cols())) = p.value().eigen();
    at += p.cols();
  }
  return tape.record(std::move(out), std::span<const Tensor>(parts), [parts](const Matrix& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        detail::grad_of(p).eigen() +=
            g.eigen().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.cols()));
      }
      off += p.cols();
    }
  });
}

inline Tensor concat_rows(Tape& tape, const Tensor& top, const Tensor& bottom) {
  require(top.cols() == bottom.cols(), "concat_rows: column count mismatch");
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.eigen().topRows(static_cast<Eigen::Index>(top.rows())) = top.value().eigen();
  out.eigen().bottomRows(static_cast<Eigen::Index>(bottom.rows())) = bottom.value().eigen();
  return tape.record(std::move(out), {top, bottom}, [top, bottom](const Matrix& g) {
    if (top.requires_grad()) {
      detail::grad_of(top).eigen() += g.eigen().topRows(static_cast<Eigen::Index>(top.rows()));
    }
    if (bottom.requires_grad()) {
      detail::grad_of(bottom).eigen() += g.eigen().bottomRows(static_cast<Eigen::Index>(bottom.rows()));
    }
  });
}

/// Per-row log-probability of the target class (no tape).
inline std::vector<double> target_log_probs(const Matrix& logits, std::span<const std::int32_t> targets) {
  require(targets.size() == logits.rows(), "target_log_probs: one target per logits row");
  std::vector<double> out(targets.size());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto z = logits.row(r);
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < z.size(),
            "target id " + std::to_string(targets[r]) + " >= vocab size " + std::to_string(z.size()));
    double mx = -INFINITY;
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    out[r] = z[static_cast<std::size_t>(targets[r])] - mx - std::log(s);
  }
  return out;
}

/// Mean cross-entropy over rows whose mask is 1.
inline Tensor masked_cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                                   std::span<const std::uint8_t> mask) {
  require(targets.size() == logits.rows() && mask.size() == logits.rows(),
          "cross_entropy: targets/mask must have one entry per logits row");
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw ConfigError("cross_entropy: mask selects no positions");
  // Masked-off rows may carry padding targets; score only the live ones.
  std::vector<std::int32_t> live_targets(targets.begin(), targets.end());
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) live_targets[r] = 0;
  }
  const auto lp = target_log_probs(logits.value(), live_targets);
  double total = 0.0;
  for (std::size_t r = 0; r < lp.size(); ++r) {
    if (mask[r]) total -= lp[r];
  }
  const double n = static_cast<double>(count);
  auto tgt = std::make_shared<std::vector<std::int32_t>>(std::move(live_targets));
  auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  return tape.record(Matrix(1, 1, total / n), {logits}, [logits, tgt, msk, n](const Matrix& g) {
    const Matrix& z = logits.value();
    auto& gz = detail::grad_of(logits);
    const double up = g(0, 0) / n;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      if (!(*msk)[r]) continue;
      const auto zr = z.row(r);
      double mx = -INFINITY;
      for (double v : zr) mx = std::max(mx, v);
      double s = 0.0;
      for (double v : zr) s += std::exp(v - mx);
      auto gr = gz.row(r);
      for (std::size_t c = 0; c < zr.size(); ++c) gr[c] += up * std::exp(zr[c] - mx) / s;
      gr[static_cast<std::size_t>((*tgt)[r])] -= up;
    }
  });
}

}  // namespace logcomp::ad
