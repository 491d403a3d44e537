#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "logcomp/compressor.hpp"
#include "logcomp/data.hpp"
#include "logcomp/error.hpp"
#include "logcomp/filterbank.hpp"
#include "logcomp/random.hpp"
#include "logcomp/tensor.hpp"

namespace logcomp {

enum class Variant { scale_invariant, delta_control };

inline std::string to_string(Variant v) { return v == Variant::scale_invariant ? "scale_invariant" : "delta_control"; }

inline Variant parse_variant(std::string_view s) {
  if (s == "scale_invariant") return Variant::scale_invariant;
  if (s == "delta_control") return Variant::delta_control;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected scale_invariant or delta_control)");
}

struct ModelConfig {
  int d = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_mlp = 512;
  int m = 64;
  int L = 0;
  int vocab_size = 320;
  Variant variant = Variant::scale_invariant;
  double k = 50;
  double c = 0.19;
  double tau_min = 1.0;
  int M = 0;
  bool normalize_filter_rows = false;

  void validate() const {
    require(d >= 1 && n_heads >= 1 && d % n_heads == 0, "model.d must be divisible by model.n_heads");
    require(n_layers >= 1, "model.n_layers must be >= 1");
    require(d_mlp >= 1, "model.d_mlp must be >= 1");
    require(m >= 1, "model.m must be >= 1");
    require(L >= 0, "model.L must be >= 0");
    require(vocab_size >= 1 && vocab_size % 64 == 0, "model.vocab_size must be a positive multiple of 64");
    if (L > 0 && variant == Variant::scale_invariant) bank_config().validate();
  }

  int seq_len() const { return m + L; }
  int head_dim() const { return d / n_heads; }

  FilterBankConfig bank_config() const {
    FilterBankConfig f;
    f.k = k;
    f.c = c;
    f.tau_min = tau_min;
    f.L = L;
    f.M = M;
    f.normalize_rows = normalize_filter_rows;
    return f;
  }

  /// Tokens of history a window must carry for this model.
  int history_length() const {
    if (L == 0) return 0;
    return variant == Variant::delta_control ? L : bank_config().horizon();
  }

  std::map<std::string, std::string> to_map() const {
    return {{"model.d", std::to_string(d)},
            {"model.n_layers", std::to_string(n_layers)},
            {"model.n_heads", std::to_string(n_heads)},
            {"model.d_mlp", std::to_string(d_mlp)},
            {"model.m", std::to_string(m)},
            {"model.L", std::to_string(L)},
            {"model.vocab_size", std::to_string(vocab_size)},
            {"model.variant", to_string(variant)},
            {"filter.k", format_double(k)},
            {"filter.c", format_double(c)},
            {"filter.tau_min", format_double(tau_min)},
            {"filter.M", std::to_string(M)},
            {"filter.normalize_rows", normalize_filter_rows ? "true" : "false"}};
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A trainable tensor with its checkpoint name and weight-decay eligibility.
struct NamedParam {
  std::string name;
  ad::Tensor tensor;
  bool decay;
};

struct LayerParams {
  ad::Tensor ln1_gain, ln1_bias;
  ad::Tensor w_qkv, b_qkv;
  ad::Tensor w_attn_out, b_attn_out;
  ad::Tensor ln2_gain, ln2_bias;
  ad::Tensor w_fc, b_fc;
  ad::Tensor w_proj, b_proj;
};

/// Weights in declaration order. The token table doubles as the output
/// projection.
struct ModelParams {
  ad::Tensor token_embedding;       // vocab_size × d
  ad::Tensor position_embedding;    // (m + L) × d
  ad::Tensor slot_gain, slot_bias;  // shared slot LayerNorm
  std::vector<LayerParams> layers;
  ad::Tensor final_gain, final_bias;

  std::vector<NamedParam> list() const {
    std::vector<NamedParam> out{{"token_embedding", token_embedding, true},
                                {"position_embedding", position_embedding, true},
                                {"slot_ln.gain", slot_gain, false},
                                {"slot_ln.bias", slot_bias, false}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.push_back({p + "ln1.gain", l.ln1_gain, false});
      out.push_back({p + "ln1.bias", l.ln1_bias, false});
      out.push_back({p + "attn.w_qkv", l.w_qkv, true});
      out.push_back({p + "attn.b_qkv", l.b_qkv, false});
      out.push_back({p + "attn.w_out", l.w_attn_out, true});
      out.push_back({p + "attn.b_out", l.b_attn_out, false});
      out.push_back({p + "ln2.gain", l.ln2_gain, false});
      out.push_back({p + "ln2.bias", l.ln2_bias, false});
      out.push_back({p + "mlp.w_fc", l.w_fc, true});
      out.push_back({p + "mlp.b_fc", l.b_fc, false});
      out.push_back({p + "mlp.w_proj", l.w_proj, true});
      out.push_back({p + "mlp.b_proj", l.b_proj, false});
    }
    out.push_back({"final_ln.gain", final_gain, false});
    out.push_back({"final_ln.bias", final_bias, false});
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : list()) n += p.tensor.value().size();
    return n;
  }

  void zero_grad() const {
    for (auto p : list()) p.tensor.zero_grad();
  }
};

struct ForwardOptions {
  /// Exclude slots from every token's attention (ablation; makes the token
  /// path identical to an L = 0 model).
  bool hide_slots = false;
  bool record_attention = false;
  /// Use these T×d history embeddings instead of gathering them from the
  /// token table. Lets callers differentiate w.r.t. individual positions.
  std::optional<ad::Tensor> history_embeddings;
};

struct ForwardResult {
  ad::Tensor logits;               // m × vocab_size
  ad::Tensor loss;                 // 1 × 1
  ad::Tensor history_embeddings;   // T × d (undefined when L == 0)
  ad::Tensor slots;                // L × d, before normalization
  std::vector<Matrix> attention;   // layer-major, then head; (m+L)×(m+L)
};

/// Decoder-only transformer over [L compressed slots ‖ m tokens].
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    make_bank();
    init_params(seed);
  }

  /// Wraps existing parameters (checkpoint loading).
  Model(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    make_bank();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const noexcept { return config_; }
  const ModelParams& params() const noexcept { return params_; }
  /// Null when L == 0.
  const FilterBank* bank() const noexcept { return bank_.get(); }

  int history_length() const { return config_.history_length(); }

  /// Attention mask over m+L positions: slots see slots; tokens see every slot
  /// and tokens up to themselves.
  std::vector<std::uint8_t> attention_mask(bool hide_slots = false) const {
    const std::size_t L = static_cast<std::size_t>(config_.L);
    const std::size_t S = static_cast<std::size_t>(config_.seq_len());
    std::vector<std::uint8_t> mask(S * S, 0);
    for (std::size_t q = 0; q < S; ++q) {
      for (std::size_t k = 0; k < S; ++k) {
        bool ok;
        if (q < L) {
          ok = k < L;
        } else {
          ok = (k < L && !hide_slots) || (k >= L && k <= q);
        }
        mask[q * S + k] = ok ? 1 : 0;
      }
    }
    return mask;
  }

  /// [normalized slots ‖ token embeddings] plus learned positions over all
  /// m+L rows. `normalized_slots` is ignored (and may be undefined) when L == 0.
  ad::Tensor assemble_input(ad::Tape& tape, const ad::Tensor& normalized_slots,
                            std::span<const std::int32_t> window_tokens) const {
    require(window_tokens.size() == static_cast<std::size_t>(config_.m),
            "expected " + std::to_string(config_.m) + " window tokens, got " + std::to_string(window_tokens.size()));
    ad::Tensor x = ad::gather_rows(tape, params_.token_embedding, window_tokens);
    if (config_.L > 0) {
      require(normalized_slots.defined() && normalized_slots.rows() == static_cast<std::size_t>(config_.L) &&
                  normalized_slots.cols() == static_cast<std::size_t>(config_.d),
              "expected " + std::to_string(config_.L) + " slots of width " + std::to_string(config_.d));
      x = ad::concat_rows(tape, normalized_slots, x);
    }
    return ad::add(tape, x, params_.position_embedding);
  }

  /// The transformer stack over an assembled (m+L)×d input, before the
  /// final LayerNorm. Appends per-head attention maps to `attention` if given.
  ad::Tensor run_blocks(ad::Tape& tape, ad::Tensor x, bool hide_slots = false,
                        std::vector<Matrix>* attention = nullptr) const {
    const auto& cfg = config_;
    const auto mask = attention_mask(hide_slots);
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t li = 0; li < params_.layers.size(); ++li) {
      const auto& lp = params_.layers[li];
      auto h = ad::layernorm_lastdim(tape, x, lp.ln1_gain, lp.ln1_bias);
      auto qkv = ad::add_row(tape, ad::matmul(tape, h, lp.w_qkv), lp.b_qkv);
      std::vector<ad::Tensor> heads;
      heads.reserve(static_cast<std::size_t>(cfg.n_heads));
      for (std::size_t hd = 0; hd < static_cast<std::size_t>(cfg.n_heads); ++hd) {
        auto q = ad::slice_cols(tape, qkv, hd * dh, dh);
        auto k = ad::slice_cols(tape, qkv, static_cast<std::size_t>(cfg.d) + hd * dh, dh);
        auto v = ad::slice_cols(tape, qkv, 2 * static_cast<std::size_t>(cfg.d) + hd * dh, dh);
        auto scores = ad::scale(tape, ad::matmul_nt(tape, q, k), attn_scale);
        auto probs = ad::softmax_lastdim(tape, scores, mask);
        if (attention) attention->push_back(probs.value());
        heads.push_back(ad::matmul(tape, probs, v));
      }
      auto attn = ad::add_row(tape, ad::matmul(tape, ad::concat_cols(tape, heads), lp.w_attn_out), lp.b_attn_out);
      x = ad::add(tape, x, attn);
      auto h2 = ad::layernorm_lastdim(tape, x, lp.ln2_gain, lp.ln2_bias);
      auto fc = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, h2, lp.w_fc), lp.b_fc));
      x = ad::add(tape, x, ad::add_row(tape, ad::matmul(tape, fc, lp.w_proj), lp.b_proj));
      if (!x.value().all_finite()) {
        throw NumericError("non-finite activations after layer " + std::to_string(li));
      }
    }
    return x;
  }

  ForwardResult forward(ad::Tape& tape, const Batch& batch, const ForwardOptions& opts = {}) const {
    const auto& cfg = config_;
    const auto m = static_cast<std::size_t>(cfg.m);
    const auto L = static_cast<std::size_t>(cfg.L);
    require(batch.inputs.size() == m && batch.targets.size() == m && batch.mask.size() == m,
            "batch window length " + std::to_string(batch.inputs.size()) + " != model.m " + std::to_string(m));
    for (auto t : batch.targets) {
      if (t < 0 || t >= cfg.vocab_size) {
        throw ConfigError("target id " + std::to_string(t) + " >= vocab size " + std::to_string(cfg.vocab_size));
      }
    }

    ForwardResult res;
    ad::Tensor normed;
    if (L > 0) {
      const std::size_t H = static_cast<std::size_t>(history_length());
      if (opts.history_embeddings) {
        res.history_embeddings = *opts.history_embeddings;
        require(res.history_embeddings.cols() == static_cast<std::size_t>(cfg.d),
                "history embeddings have the wrong width");
      } else {
        // Only the last H history tokens can reach any filter.
        const std::size_t T = batch.history.size();
        const std::size_t from = T > H ? T - H : 0;
        res.history_embeddings = ad::gather_rows(
            tape, params_.token_embedding,
            std::span<const std::int32_t>(batch.history.data() + from, T - from));
      }
      res.slots = ad::depthwise_causal_conv(tape, res.history_embeddings, *bank_);
      normed = ad::layernorm_lastdim(tape, res.slots, params_.slot_gain, params_.slot_bias);
    }
    ad::Tensor x = assemble_input(tape, normed, batch.inputs);
    x = run_blocks(tape, x, opts.hide_slots, opts.record_attention ? &res.attention : nullptr);
    auto hf = ad::layernorm_lastdim(tape, x, params_.final_gain, params_.final_bias);
    auto tokens = L > 0 ? ad::slice_rows(tape, hf, L, m) : hf;
    res.logits = ad::matmul_nt(tape, tokens, params_.token_embedding);
    if (!res.logits.value().all_finite()) throw NumericError("non-finite logits");
    res.loss = ad::masked_cross_entropy(tape, res.logits, batch.targets, batch.mask);
    return res;
  }

  /// Per-position log-probabilities of the targets (masked positions only).
  std::vector<double> score(const Batch& batch) const {
    ad::Tape tape;
    auto res = forward(tape, batch);
    const auto lp = ad::target_log_probs(res.logits.value(), batch.targets);
    std::vector<double> out;
    for (std::size_t j = 0; j < lp.size(); ++j) {
      if (batch.mask[j]) out.push_back(lp[j]);
    }
    return out;
  }

 private:
  void make_bank() {
    if (config_.L == 0) return;
    bank_ = std::make_shared<const FilterBank>(config_.variant == Variant::delta_control
                                                   ? FilterBank::delta(config_.L)
                                                   : FilterBank::build(config_.bank_config()));
  }

  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    const auto d = static_cast<std::size_t>(config_.d);
    constexpr double kStd = 0.02;
    const double resid_std = kStd / std::sqrt(2.0 * config_.n_layers);
    auto normal = [&](std::size_t r, std::size_t c, double sd) {
      Matrix mtx(r, c);
      for (auto& v : mtx.data()) v = rng.normal(0.0, sd);
      return ad::Tensor::leaf(std::move(mtx), true);
    };
    auto constant = [](std::size_t n, double v) { return ad::Tensor::leaf(Matrix(1, n, v), true); };

    params_.token_embedding = normal(static_cast<std::size_t>(config_.vocab_size), d, kStd);
    params_.position_embedding = normal(static_cast<std::size_t>(config_.seq_len()), d, kStd);
    params_.slot_gain = constant(d, 1.0);
    params_.slot_bias = constant(d, 0.0);
    const auto dm = static_cast<std::size_t>(config_.d_mlp);
    for (int i = 0; i < config_.n_layers; ++i) {
      LayerParams l;
      l.ln1_gain = constant(d, 1.0);
      l.ln1_bias = constant(d, 0.0);
      l.w_qkv = normal(d, 3 * d, kStd);
      l.b_qkv = constant(3 * d, 0.0);
      l.w_attn_out = normal(d, d, resid_std);
      l.b_attn_out = constant(d, 0.0);
      l.ln2_gain = constant(d, 1.0);
      l.ln2_bias = constant(d, 0.0);
      l.w_fc = normal(d, dm, kStd);
      l.b_fc = constant(dm, 0.0);
      l.w_proj = normal(dm, d, resid_std);
      l.b_proj = constant(d, 0.0);
      params_.layers.push_back(std::move(l));
    }
    params_.final_gain = constant(d, 1.0);
    params_.final_bias = constant(d, 0.0);
  }

  ModelConfig config_;
  ModelParams params_;
  std::shared_ptr<const FilterBank> bank_;
};

/// Builds an empty parameter set shaped like `config` (values zero); used to
/// receive checkpoint blobs.
inline ModelParams shaped_params(const ModelConfig& config) {
  Model tmp(config, 0);
  auto p = tmp.params();
  ModelParams out;
  auto clone = [](const ad::Tensor& t) { return ad::Tensor::leaf(Matrix(t.rows(), t.cols()), true); };
  out.token_embedding = clone(p.token_embedding);
  out.position_embedding = clone(p.position_embedding);
  out.slot_gain = clone(p.slot_gain);
  out.slot_bias = clone(p.slot_bias);
  for (const auto& l : p.layers) {
    out.layers.push_back({clone(l.ln1_gain), clone(l.ln1_bias), clone(l.w_qkv), clone(l.b_qkv),
                          clone(l.w_attn_out), clone(l.b_attn_out), clone(l.ln2_gain), clone(l.ln2_bias),
                          clone(l.w_fc), clone(l.b_fc), clone(l.w_proj), clone(l.b_proj)});
  }
  out.final_gain = clone(p.final_gain);
  out.final_bias = clone(p.final_bias);
  return out;
}

}  // namespace logcomp
