#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pslu/data.hpp"
#include "pslu/rng.hpp"
#include "pslu/tensor.hpp"

namespace pslu {

struct TransformerConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_layers = 4;
  std::size_t max_seq_len = 128;
  std::size_t n_classes = 0;
  double dropout_rate = 0.1;
  bool mean_pool = false;  // default pools the CLS position

  std::size_t d_k() const { return d_model / n_heads; }

  void validate() const {
    check_arg(vocab_size > 0 && d_model > 0 && n_heads > 0 && d_ff > 0 && max_seq_len > 0 && n_classes > 0,
              "transformer config: all extents must be positive");
    check_arg(d_model % n_heads == 0, "transformer config: d_model " + std::to_string(d_model) +
                                          " not divisible by n_heads " + std::to_string(n_heads));
    check_arg(dropout_rate >= 0.0 && dropout_rate < 1.0, "transformer config: dropout outside [0, 1)");
  }
};

/// Per-head Q/K/V projections plus the shared output projection.
template <typename S>
struct AttentionWeights {
  std::vector<Tensor<S>> wq, wk, wv;  // n_heads entries, each [d_model x d_k]
  Tensor<S> wo;                       // [d_model x d_model]
};

template <typename S>
struct FfnWeights {
  Tensor<S> w1, b1, w2, b2;  // [d_model x d_ff], [d_ff], [d_ff x d_model], [d_model]
};

template <typename S>
struct EncoderLayerWeights {
  AttentionWeights<S> attn;
  FfnWeights<S> ffn;
  Tensor<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

// ---------------------------------------------------------------------------
// Attention primitives
// ---------------------------------------------------------------------------

/// softmax(Q K^T / sqrt(d_k)) with masked key columns suppressed.
template <typename S>
Tensor<S> scaled_attention_weights(const Tensor<S>& q, const Tensor<S>& k,
                                   const PadMask& key_mask = {}) {
  check_arg(q.rank() == 2 && k.rank() == 2 && q.extent(1) == k.extent(1),
            "attention: d_k of Q and K disagree, " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(q.extent(1)));
  Tensor<S> scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
  if (!key_mask.empty()) scores = add_key_mask(scores, key_mask);
  return softmax(scores, 1);
}

template <typename S>
Tensor<S> scaled_dot_product_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                       const PadMask& key_mask = {}) {
  check_arg(k.extent(0) == v.extent(0), "attention: K rows " + shape_str(k.shape()) +
                                            " vs V rows " + shape_str(v.shape()));
  return matmul(scaled_attention_weights(q, k, key_mask), v);
}

/// Self-attention: every head projects x to Q/K/V, runs scaled dot-product
/// attention, and the concatenated heads are projected by W_O.
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, const AttentionWeights<S>& w,
                               const PadMask& key_mask = {}) {
  std::vector<Tensor<S>> heads;
  heads.reserve(w.wq.size());
  for (std::size_t h = 0; h < w.wq.size(); ++h) {
    Tensor<S> qh = matmul(x, w.wq[h]);
    Tensor<S> kh = matmul(x, w.wk[h]);
    Tensor<S> vh = matmul(x, w.wv[h]);
    heads.push_back(scaled_dot_product_attention(qh, kh, vh, key_mask));
  }
  return matmul(concat_cols(heads), w.wo);
}

template <typename S>
Tensor<S> feed_forward(const Tensor<S>& x, const FfnWeights<S>& w) {
  // FFN(x) = ReLU(x W1 + b1) W2 + b2
  return add_rowvec(matmul(relu(add_rowvec(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

/// Post-norm encoder layer: y = LN(x + MHA(x)); out = LN(y + FFN(y)).
template <typename S>
Tensor<S> encoder_layer(const Tensor<S>& x, const EncoderLayerWeights<S>& w, const PadMask& key_mask,
                        double dropout_rate, const ForwardOptions& opts, S ln_eps) {
  Tensor<S> a = multi_head_attention(x, w.attn, key_mask);
  if (opts.training && opts.dropout_rng && dropout_rate > 0.0)
    a = dropout(a, dropout_rate, *opts.dropout_rng);
  Tensor<S> y = layer_norm(add(x, a), w.ln1_gain, w.ln1_bias, ln_eps);
  Tensor<S> f = feed_forward(y, w.ffn);
  if (opts.training && opts.dropout_rng && dropout_rate > 0.0)
    f = dropout(f, dropout_rate, *opts.dropout_rng);
  return layer_norm(add(y, f), w.ln2_gain, w.ln2_bias, ln_eps);
}

// ---------------------------------------------------------------------------
// EncoderModel
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderModel {
  TransformerConfig config;
  Tensor<S> token_embed;  // [vocab_size x d_model]
  Tensor<S> pos_embed;    // [max_seq_len x d_model], learned positions
  std::vector<EncoderLayerWeights<S>> layers;
  Tensor<S> cls_w, cls_b;  // [d_model x n_classes], [n_classes]
  Tensor<S> mlm_w, mlm_b;  // [d_model x vocab_size], [vocab_size]
  S ln_eps = S(1e-5);

  static EncoderModel init(const TransformerConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderModel m;
    m.config = cfg;
    auto normal_init = [&rng](Shape shape, double stddev) {
      Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
      for (auto& v : t.values()) v = static_cast<S>(rng.normal() * stddev);
      return t;
    };
    auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
      Tensor<S> t = Tensor<S>::zeros({fan_in, fan_out}, true);
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : t.values()) v = static_cast<S>((rng.uniform() * 2.0 - 1.0) * limit);
      return t;
    };
    m.token_embed = normal_init({cfg.vocab_size, cfg.d_model}, 0.02);
    m.pos_embed = normal_init({cfg.max_seq_len, cfg.d_model}, 0.02);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      EncoderLayerWeights<S> layer;
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        layer.attn.wq.push_back(xavier(cfg.d_model, cfg.d_k()));
        layer.attn.wk.push_back(xavier(cfg.d_model, cfg.d_k()));
        layer.attn.wv.push_back(xavier(cfg.d_model, cfg.d_k()));
      }
      layer.attn.wo = xavier(cfg.d_model, cfg.d_model);
      layer.ffn.w1 = xavier(cfg.d_model, cfg.d_ff);
      layer.ffn.b1 = Tensor<S>::zeros({cfg.d_ff}, true);
      layer.ffn.w2 = xavier(cfg.d_ff, cfg.d_model);
      layer.ffn.b2 = Tensor<S>::zeros({cfg.d_model}, true);
      layer.ln1_gain = Tensor<S>::full({cfg.d_model}, S(1), true);
      layer.ln1_bias = Tensor<S>::zeros({cfg.d_model}, true);
      layer.ln2_gain = Tensor<S>::full({cfg.d_model}, S(1), true);
      layer.ln2_bias = Tensor<S>::zeros({cfg.d_model}, true);
      m.layers.push_back(std::move(layer));
    }
    // Heads start at zero: a fresh model predicts the uniform distribution.
    m.cls_w = Tensor<S>::zeros({cfg.d_model, cfg.n_classes}, true);
    m.cls_b = Tensor<S>::zeros({cfg.n_classes}, true);
    m.mlm_w = Tensor<S>::zeros({cfg.d_model, cfg.vocab_size}, true);
    m.mlm_b = Tensor<S>::zeros({cfg.vocab_size}, true);
    return m;
  }

  /// Trainable tensors in a stable order; names are the checkpoint keys.
  std::vector<std::pair<std::string, Tensor<S>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> ps;
    ps.emplace_back("token_embed", token_embed);
    ps.emplace_back("pos_embed", pos_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lw = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < lw.attn.wq.size(); ++h) {
        ps.emplace_back(p + "attn.wq" + std::to_string(h), lw.attn.wq[h]);
        ps.emplace_back(p + "attn.wk" + std::to_string(h), lw.attn.wk[h]);
        ps.emplace_back(p + "attn.wv" + std::to_string(h), lw.attn.wv[h]);
      }
      ps.emplace_back(p + "attn.wo", lw.attn.wo);
      ps.emplace_back(p + "ffn.w1", lw.ffn.w1);
      ps.emplace_back(p + "ffn.b1", lw.ffn.b1);
      ps.emplace_back(p + "ffn.w2", lw.ffn.w2);
      ps.emplace_back(p + "ffn.b2", lw.ffn.b2);
      ps.emplace_back(p + "ln1.gain", lw.ln1_gain);
      ps.emplace_back(p + "ln1.bias", lw.ln1_bias);
      ps.emplace_back(p + "ln2.gain", lw.ln2_gain);
      ps.emplace_back(p + "ln2.bias", lw.ln2_bias);
    }
    ps.emplace_back("cls.w", cls_w);
    ps.emplace_back("cls.b", cls_b);
    ps.emplace_back("mlm.w", mlm_w);
    ps.emplace_back("mlm.b", mlm_b);
    return ps;
  }

  /// Non-trainable tensors (none for this model; the baseline has BN stats).
  std::vector<std::pair<std::string, Tensor<S>>> state_tensors() const { return {}; }

  /// Names of the feature-extractor tensors, excluding task heads; used by
  /// the "features" warm-start policy.
  std::vector<std::string> feature_tensor_names() const {
    std::vector<std::string> names;
    for (const auto& [name, t] : parameters())
      if (name.rfind("cls.", 0) != 0 && name.rfind("mlm.", 0) != 0) names.push_back(name);
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  void validate_ids(const std::vector<int>& ids) const {
    check_arg(!ids.empty(), "encode: empty id sequence");
    check_arg(ids.size() <= config.max_seq_len,
              "encode: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                  std::to_string(config.max_seq_len));
    for (int id : ids)
      check_arg(id >= 0 && static_cast<std::size_t>(id) < config.vocab_size,
                "encode: token id " + std::to_string(id) + " outside vocab of " +
                    std::to_string(config.vocab_size));
  }

  /// Final hidden states z = (z_1 ... z_T) as a [T x d_model] tensor.
  Tensor<S> encode(const std::vector<int>& ids, const PadMask& pad_mask = {},
                   const ForwardOptions& opts = {}) const {
    validate_ids(ids);
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    std::vector<std::size_t> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    Tensor<S> x = add(take_rows(token_embed, rows), take_rows(pos_embed, positions));
    for (const auto& layer : layers)
      x = encoder_layer(x, layer, pad_mask, config.dropout_rate, opts, ln_eps);
    return x;
  }

  /// Class logits from the pooled sequence representation.
  Tensor<S> classify_logits(const std::vector<int>& ids, const ForwardOptions& opts = {},
                            const PadMask& pad_mask = {}) const {
    Tensor<S> z = encode(ids, pad_mask, opts);
    Tensor<S> pooled = config.mean_pool ? reshape(mean_rows(z), {std::size_t(1), config.d_model})
                                        : take_rows(z, {0});
    return reshape(add_rowvec(matmul(pooled, cls_w), cls_b), {config.n_classes});
  }

  /// MLM logits at the requested positions: [|positions| x vocab_size].
  Tensor<S> mlm_logits(const std::vector<int>& ids, const std::vector<std::size_t>& positions,
                       const ForwardOptions& opts = {}, const PadMask& pad_mask = {}) const {
    check_arg(!positions.empty(), "mlm: empty target position list");
    for (std::size_t p : positions)
      check_arg(p < ids.size(), "mlm: position " + std::to_string(p) + " outside sequence of " +
                                    std::to_string(ids.size()));
    Tensor<S> z = encode(ids, pad_mask, opts);
    return add_rowvec(matmul(take_rows(z, positions), mlm_w), mlm_b);
  }

  // Batch interfaces shared with the baseline; examples are independent here.
  std::vector<Tensor<S>> classify_logits_batch(const std::vector<std::vector<int>>& batch,
                                               const ForwardOptions& opts = {}) const {
    std::vector<Tensor<S>> out;
    out.reserve(batch.size());
    for (const auto& ids : batch) out.push_back(classify_logits(ids, opts));
    return out;
  }

  std::vector<Tensor<S>> mlm_logits_batch(const std::vector<std::vector<int>>& batch,
                                          const std::vector<std::vector<std::size_t>>& positions,
                                          const ForwardOptions& opts = {}) const {
    check_arg(batch.size() == positions.size(), "mlm: batch/position list size mismatch");
    std::vector<Tensor<S>> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b)
      out.push_back(mlm_logits(batch[b], positions[b], opts));
    return out;
  }
};

/// Closed-form parameter count implied by a config; must equal the
/// allocated count exactly.
inline std::size_t transformer_parameter_count(const TransformerConfig& cfg) {
  const std::size_t d = cfg.d_model, v = cfg.vocab_size;
  const std::size_t attn = 3 * cfg.n_heads * d * cfg.d_k() + d * d;
  const std::size_t ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
  const std::size_t norms = 4 * d;
  return v * d + cfg.max_seq_len * d + cfg.n_layers * (attn + ffn + norms) + d * cfg.n_classes +
         cfg.n_classes + d * v + v;
}

}  // namespace pslu
