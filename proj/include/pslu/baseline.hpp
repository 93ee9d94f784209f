#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pslu/data.hpp"
#include "pslu/rng.hpp"
#include "pslu/tensor.hpp"

namespace pslu {

struct BaselineConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::size_t conv_channels = 64;               // per kernel
  std::vector<std::size_t> kernel_sizes = {3, 5};
  std::size_t lstm_hidden = 128;
  std::size_t lstm_layers = 1;
  std::size_t n_classes = 0;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t lstm_input_dim() const { return conv_channels * kernel_sizes.size(); }

  void validate() const {
    check_arg(vocab_size > 0 && embed_dim > 0 && conv_channels > 0 && lstm_hidden > 0 &&
                  lstm_layers > 0 && n_classes > 0 && !kernel_sizes.empty(),
              "baseline config: all extents must be positive");
    for (std::size_t k : kernel_sizes)
      check_arg(k % 2 == 1, "baseline config: kernel size " + std::to_string(k) +
                                " must be odd for same-length padding");
    check_arg(bn_momentum > 0.0 && bn_momentum <= 1.0 && bn_eps > 0.0, "baseline config: bad BN settings");
  }
};

/// One conv branch: weights for the time convolution plus its batch-norm
/// parameters and running statistics (updated only in training mode).
template <typename S>
struct ConvBnWeights {
  std::size_t kernel = 3;
  Tensor<S> w;                          // [kernel*embed_dim x conv_channels]
  Tensor<S> bn_gain, bn_bias;           // [conv_channels], trainable
  Tensor<S> bn_running_mean, bn_running_var;  // [conv_channels], state
};

template <typename S>
struct LstmWeights {
  Tensor<S> wx;  // [input_dim x 4*hidden], gate order i, f, g, o
  Tensor<S> wh;  // [hidden x 4*hidden]
  Tensor<S> b;   // [4*hidden]
};

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

/// Batch norm core over the rows of `x` (time positions, possibly pooled
/// across a whole batch of utterances). Training mode normalizes with the
/// statistics of `x` and folds them into the running averages; eval mode
/// uses the stored running statistics.
template <typename S>
Tensor<S> batch_norm_rows(const Tensor<S>& x, ConvBnWeights<S>& w, bool training, double momentum,
                          double eps) {
  Tensor<S> normed;
  if (training) {
    Tensor<S> mu = mean_rows(x);
    Tensor<S> centered = sub_rowvec(x, mu);
    Tensor<S> var = mean_rows(mul(centered, centered));
    Tensor<S> inv_std = rsqrt(add_scalar(var, static_cast<S>(eps)));
    normed = mul_rowvec(centered, inv_std);
    // Running statistics track the batch statistics outside the graph.
    for (std::size_t c = 0; c < mu.numel(); ++c) {
      w.bn_running_mean.at(c) =
          static_cast<S>((1.0 - momentum) * w.bn_running_mean.at(c) + momentum * mu.at(c));
      w.bn_running_var.at(c) =
          static_cast<S>((1.0 - momentum) * w.bn_running_var.at(c) + momentum * var.at(c));
    }
  } else {
    Tensor<S> inv_std = Tensor<S>::zeros({w.bn_running_var.numel()});
    for (std::size_t c = 0; c < inv_std.numel(); ++c)
      inv_std.at(c) = S(1) / std::sqrt(w.bn_running_var.at(c) + static_cast<S>(eps));
    normed = mul_rowvec(sub_rowvec(x, w.bn_running_mean), inv_std);
  }
  return relu(add_rowvec(mul_rowvec(normed, w.bn_gain), w.bn_bias));
}

/// Same-length 1-D convolution over time, then batch norm and ReLU, for one
/// utterance standing alone as the batch.
template <typename S>
Tensor<S> conv_bn_relu(const Tensor<S>& x, ConvBnWeights<S>& w, bool training, double momentum,
                       double eps) {
  check_arg(x.rank() == 2 && x.extent(0) >= 1, "conv_bn_relu: expects [T x E] with T >= 1, got " +
                                                   shape_str(x.shape()));
  Tensor<S> conv = matmul(unfold_1d(x, w.kernel), w.w);  // [T x C]
  return batch_norm_rows(conv, w, training, momentum, eps);
}

/// Batched variant: convolutions stay per-utterance (windows never cross
/// utterance boundaries) but the normalization statistics pool every time
/// position in the batch, so the running averages track population values.
template <typename S>
std::vector<Tensor<S>> conv_bn_relu_batch(const std::vector<Tensor<S>>& xs, ConvBnWeights<S>& w,
                                          bool training, double momentum, double eps) {
  check_arg(!xs.empty(), "conv_bn_relu_batch: empty batch");
  std::vector<Tensor<S>> convs;
  convs.reserve(xs.size());
  for (const auto& x : xs) convs.push_back(matmul(unfold_1d(x, w.kernel), w.w));
  Tensor<S> pooled = convs.size() == 1 ? convs[0] : concat_rows(convs);
  Tensor<S> activated = batch_norm_rows(pooled, w, training, momentum, eps);
  std::vector<Tensor<S>> out;
  out.reserve(xs.size());
  std::size_t offset = 0;
  for (const auto& x : xs) {
    out.push_back(slice_rows(activated, offset, x.extent(0)));
    offset += x.extent(0);
  }
  return out;
}

/// Full unidirectional recurrence from zero initial state; returns all
/// per-step hidden states as [T x hidden].
template <typename S>
Tensor<S> lstm_states(const Tensor<S>& x, const LstmWeights<S>& w) {
  check_arg(x.rank() == 2 && x.extent(0) >= 1, "lstm: expects [T x D] with T >= 1, got " +
                                                   shape_str(x.shape()));
  const std::size_t hidden = w.wh.extent(0);
  check_arg(w.wx.extent(0) == x.extent(1),
            "lstm: input dim " + shape_str(x.shape()) + " vs weights " + shape_str(w.wx.shape()));
  Tensor<S> h = Tensor<S>::zeros({1, hidden});
  Tensor<S> c = Tensor<S>::zeros({1, hidden});
  std::vector<Tensor<S>> states;
  states.reserve(x.extent(0));
  for (std::size_t t = 0; t < x.extent(0); ++t) {
    Tensor<S> xt = take_rows(x, {t});
    Tensor<S> pre = add_rowvec(add(matmul(xt, w.wx), matmul(h, w.wh)), w.b);
    Tensor<S> i = sigmoid(slice_cols(pre, 0, hidden));
    Tensor<S> f = sigmoid(slice_cols(pre, hidden, hidden));
    Tensor<S> g = tanh(slice_cols(pre, 2 * hidden, hidden));
    Tensor<S> o = sigmoid(slice_cols(pre, 3 * hidden, hidden));
    c = add(mul(f, c), mul(i, g));
    h = mul(o, tanh(c));
    states.push_back(h);
  }
  return concat_rows(states);
}

/// Final hidden state h_T as [1 x hidden].
template <typename S>
Tensor<S> lstm_forward(const Tensor<S>& x, const LstmWeights<S>& w) {
  Tensor<S> states = lstm_states(x, w);
  return take_rows(states, {states.extent(0) - 1});
}

// ---------------------------------------------------------------------------
// BaselineModel
// ---------------------------------------------------------------------------

/// The reference architecture: embedding, parallel kernel-3/kernel-5
/// convolutions with batch norm and ReLU, channelwise concatenation, a
/// unidirectional LSTM, and a linear classifier over the final hidden state.
template <typename S>
struct BaselineModel {
  BaselineConfig config;
  Tensor<S> embed;  // [vocab_size x embed_dim]
  std::vector<ConvBnWeights<S>> convs;
  std::vector<LstmWeights<S>> lstm;  // lstm_layers entries
  Tensor<S> cls_w, cls_b;            // [hidden x n_classes], [n_classes]
  Tensor<S> mlm_w, mlm_b;            // [hidden x vocab_size], [vocab_size]

  static BaselineModel init(const BaselineConfig& cfg, Rng& rng) {
    cfg.validate();
    BaselineModel m;
    m.config = cfg;
    auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
      Tensor<S> t = Tensor<S>::zeros({fan_in, fan_out}, true);
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : t.values()) v = static_cast<S>((rng.uniform() * 2.0 - 1.0) * limit);
      return t;
    };
    // Without layer norm downstream, embeddings need a healthy scale or
    // optimizer steps swamp them.
    m.embed = Tensor<S>::zeros({cfg.vocab_size, cfg.embed_dim}, true);
    for (auto& v : m.embed.values()) v = static_cast<S>(rng.normal() * 0.1);
    for (std::size_t k : cfg.kernel_sizes) {
      ConvBnWeights<S> cw;
      cw.kernel = k;
      cw.w = xavier(k * cfg.embed_dim, cfg.conv_channels);
      cw.bn_gain = Tensor<S>::full({cfg.conv_channels}, S(1), true);
      cw.bn_bias = Tensor<S>::zeros({cfg.conv_channels}, true);
      cw.bn_running_mean = Tensor<S>::zeros({cfg.conv_channels});
      cw.bn_running_var = Tensor<S>::full({cfg.conv_channels}, S(1));
      m.convs.push_back(std::move(cw));
    }
    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
      LstmWeights<S> lw;
      const std::size_t in_dim = l == 0 ? cfg.lstm_input_dim() : cfg.lstm_hidden;
      lw.wx = xavier(in_dim, 4 * cfg.lstm_hidden);
      lw.wh = xavier(cfg.lstm_hidden, 4 * cfg.lstm_hidden);
      lw.b = Tensor<S>::zeros({4 * cfg.lstm_hidden}, true);
      // Forget-gate bias starts open.
      for (std::size_t j = cfg.lstm_hidden; j < 2 * cfg.lstm_hidden; ++j) lw.b.at(j) = S(1);
      m.lstm.push_back(std::move(lw));
    }
    m.cls_w = Tensor<S>::zeros({cfg.lstm_hidden, cfg.n_classes}, true);
    m.cls_b = Tensor<S>::zeros({cfg.n_classes}, true);
    m.mlm_w = Tensor<S>::zeros({cfg.lstm_hidden, cfg.vocab_size}, true);
    m.mlm_b = Tensor<S>::zeros({cfg.vocab_size}, true);
    return m;
  }

  std::vector<std::pair<std::string, Tensor<S>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> ps;
    ps.emplace_back("embed", embed);
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const std::string p = "conv" + std::to_string(convs[i].kernel) + ".";
      ps.emplace_back(p + "w", convs[i].w);
      ps.emplace_back(p + "bn.gain", convs[i].bn_gain);
      ps.emplace_back(p + "bn.bias", convs[i].bn_bias);
    }
    for (std::size_t l = 0; l < lstm.size(); ++l) {
      const std::string p = "lstm" + std::to_string(l) + ".";
      ps.emplace_back(p + "wx", lstm[l].wx);
      ps.emplace_back(p + "wh", lstm[l].wh);
      ps.emplace_back(p + "b", lstm[l].b);
    }
    ps.emplace_back("cls.w", cls_w);
    ps.emplace_back("cls.b", cls_b);
    ps.emplace_back("mlm.w", mlm_w);
    ps.emplace_back("mlm.b", mlm_b);
    return ps;
  }

  std::vector<std::pair<std::string, Tensor<S>>> state_tensors() const {
    std::vector<std::pair<std::string, Tensor<S>>> ts;
    for (const auto& cw : convs) {
      const std::string p = "conv" + std::to_string(cw.kernel) + ".bn.";
      ts.emplace_back(p + "running_mean", cw.bn_running_mean);
      ts.emplace_back(p + "running_var", cw.bn_running_var);
    }
    return ts;
  }

  /// Embedding and convolution tensors (with BN statistics). The recurrent
  /// weights are deliberately absent: masked-phone pretraining drives the
  /// LSTM toward short-horizon dynamics that final-state classification has
  /// to unlearn, so the "features" warm-start policy reinitializes them.
  std::vector<std::string> feature_tensor_names() const {
    std::vector<std::string> names = {"embed"};
    for (const auto& cw : convs) {
      const std::string p = "conv" + std::to_string(cw.kernel) + ".";
      names.push_back(p + "w");
      names.push_back(p + "bn.gain");
      names.push_back(p + "bn.bias");
      names.push_back(p + "bn.running_mean");
      names.push_back(p + "bn.running_var");
    }
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  void validate_ids(const std::vector<int>& ids) const {
    check_arg(!ids.empty(), "baseline: empty id sequence");
    for (int id : ids)
      check_arg(id >= 0 && static_cast<std::size_t>(id) < config.vocab_size,
                "baseline: token id " + std::to_string(id) + " outside vocab of " +
                    std::to_string(config.vocab_size));
  }

  /// Per-step LSTM hidden states for a batch of utterances, one [T x hidden]
  /// tensor each. In training mode BN statistics pool over the whole batch
  /// and the running averages update, so these forwards are non-const.
  std::vector<Tensor<S>> hidden_states_batch(const std::vector<std::vector<int>>& batch,
                                             const ForwardOptions& opts = {}) {
    check_arg(!batch.empty(), "baseline: empty batch");
    std::vector<Tensor<S>> embedded;
    embedded.reserve(batch.size());
    for (const auto& ids : batch) {
      validate_ids(ids);
      std::vector<std::size_t> rows(ids.begin(), ids.end());
      embedded.push_back(take_rows(embed, rows));
    }
    std::vector<std::vector<Tensor<S>>> branch_outputs;
    for (auto& cw : convs)
      branch_outputs.push_back(
          conv_bn_relu_batch(embedded, cw, opts.training, config.bn_momentum, config.bn_eps));
    std::vector<Tensor<S>> states;
    states.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::vector<Tensor<S>> branches;
      for (auto& outputs : branch_outputs) branches.push_back(outputs[b]);
      Tensor<S> features = concat_cols(branches);
      Tensor<S> s = lstm_states(features, lstm[0]);
      for (std::size_t l = 1; l < lstm.size(); ++l) s = lstm_states(s, lstm[l]);
      states.push_back(std::move(s));
    }
    return states;
  }

  Tensor<S> hidden_states(const std::vector<int>& ids, const ForwardOptions& opts = {}) {
    return hidden_states_batch({ids}, opts)[0];
  }

  std::vector<Tensor<S>> classify_logits_batch(const std::vector<std::vector<int>>& batch,
                                               const ForwardOptions& opts = {}) {
    std::vector<Tensor<S>> out;
    for (auto& states : hidden_states_batch(batch, opts)) {
      Tensor<S> last = take_rows(states, {states.extent(0) - 1});
      out.push_back(reshape(add_rowvec(matmul(last, cls_w), cls_b), {config.n_classes}));
    }
    return out;
  }

  Tensor<S> classify_logits(const std::vector<int>& ids, const ForwardOptions& opts = {}) {
    return classify_logits_batch({ids}, opts)[0];
  }

  std::vector<Tensor<S>> mlm_logits_batch(const std::vector<std::vector<int>>& batch,
                                          const std::vector<std::vector<std::size_t>>& positions,
                                          const ForwardOptions& opts = {}) {
    check_arg(batch.size() == positions.size(), "mlm: batch/position list size mismatch");
    for (std::size_t b = 0; b < batch.size(); ++b) {
      check_arg(!positions[b].empty(), "mlm: empty target position list");
      for (std::size_t p : positions[b])
        check_arg(p < batch[b].size(), "mlm: position " + std::to_string(p) +
                                           " outside sequence of " + std::to_string(batch[b].size()));
    }
    auto states = hidden_states_batch(batch, opts);
    std::vector<Tensor<S>> out;
    for (std::size_t b = 0; b < batch.size(); ++b)
      out.push_back(add_rowvec(matmul(take_rows(states[b], positions[b]), mlm_w), mlm_b));
    return out;
  }

  Tensor<S> mlm_logits(const std::vector<int>& ids, const std::vector<std::size_t>& positions,
                       const ForwardOptions& opts = {}) {
    return mlm_logits_batch({ids}, {positions}, opts)[0];
  }
};

inline std::size_t baseline_parameter_count(const BaselineConfig& cfg) {
  std::size_t n = cfg.vocab_size * cfg.embed_dim;
  for (std::size_t k : cfg.kernel_sizes) n += k * cfg.embed_dim * cfg.conv_channels + 2 * cfg.conv_channels;
  for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
    const std::size_t in_dim = l == 0 ? cfg.lstm_input_dim() : cfg.lstm_hidden;
    n += in_dim * 4 * cfg.lstm_hidden + cfg.lstm_hidden * 4 * cfg.lstm_hidden + 4 * cfg.lstm_hidden;
  }
  n += cfg.lstm_hidden * cfg.n_classes + cfg.n_classes;
  n += cfg.lstm_hidden * cfg.vocab_size + cfg.vocab_size;
  return n;
}

}  // namespace pslu
