#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pslu/gradcheck.hpp"
#include "pslu/transformer.hpp"

using namespace pslu;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.n_layers = 2;
  cfg.max_seq_len = 10;
  cfg.n_classes = 3;
  cfg.dropout_rate = 0.0;
  return cfg;
}

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, bool grad = false) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape), grad);
  for (auto& v : t.values()) v = static_cast<S>(rng.normal());
  return t;
}

/// Plain-loop multi-head attention, written independently of the tensor ops.
std::vector<std::vector<double>> reference_mha(const std::vector<std::vector<double>>& x,
                                               const AttentionWeights<double>& w,
                                               std::size_t d_k) {
  const std::size_t t_len = x.size(), d_model = x[0].size(), n_heads = w.wq.size();
  auto project = [&](const Tensor<double>& m, std::size_t t, std::size_t j) {
    double acc = 0;
    for (std::size_t i = 0; i < d_model; ++i) acc += x[t][i] * m(i, j);
    return acc;
  };
  std::vector<std::vector<double>> concat(t_len, std::vector<double>(n_heads * d_k, 0.0));
  for (std::size_t h = 0; h < n_heads; ++h) {
    std::vector<std::vector<double>> q(t_len, std::vector<double>(d_k)), k = q, v = q;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < d_k; ++j) {
        q[t][j] = project(w.wq[h], t, j);
        k[t][j] = project(w.wk[h], t, j);
        v[t][j] = project(w.wv[h], t, j);
      }
    for (std::size_t t = 0; t < t_len; ++t) {
      std::vector<double> scores(t_len);
      for (std::size_t u = 0; u < t_len; ++u) {
        double dot = 0;
        for (std::size_t j = 0; j < d_k; ++j) dot += q[t][j] * k[u][j];
        scores[u] = dot / std::sqrt(static_cast<double>(d_k));
      }
      double mx = scores[0];
      for (double s : scores) mx = std::max(mx, s);
      double z = 0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (std::size_t u = 0; u < t_len; ++u)
        for (std::size_t j = 0; j < d_k; ++j) concat[t][h * d_k + j] += scores[u] / z * v[u][j];
    }
  }
  std::vector<std::vector<double>> out(t_len, std::vector<double>(d_model, 0.0));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d_model; ++j)
      for (std::size_t i = 0; i < n_heads * d_k; ++i) out[t][j] += concat[t][i] * w.wo(i, j);
  return out;
}

}  // namespace

TEST(Attention, ZeroQueryGivesMeanOfUnmaskedValues) {
  Rng rng(3);
  auto q = Tensor<double>::zeros({2, 3});
  auto k = random_tensor<double>({4, 3}, rng);
  auto v = random_tensor<double>({4, 2}, rng);
  PadMask mask = {0, 1, 0, 0};
  auto out = scaled_dot_product_attention(q, k, v, mask);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < 2; ++j) {
      double mean = (v(0, j) + v(2, j) + v(3, j)) / 3.0;
      EXPECT_NEAR(out(t, j), mean, 1e-6);
    }
}

TEST(Attention, SingleKeyReturnsItsValueRow) {
  Rng rng(4);
  auto q = random_tensor<double>({3, 5}, rng);
  auto k = random_tensor<double>({1, 5}, rng);
  auto v = random_tensor<double>({1, 4}, rng);
  auto out = scaled_dot_product_attention(q, k, v);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out(t, j), v(0, j), 1e-12);
}

TEST(Attention, TwoKeyScalarOracle) {
  // Q=[[1,0]], K=I, V=I, d_k=2: weights are softmax([1/sqrt(2), 0]).
  auto q = Tensor<double>::from({1, 2}, {1, 0});
  auto k = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  const double s0 = 1.0 / std::sqrt(2.0);
  const double w0 = std::exp(s0) / (std::exp(s0) + 1.0);
  auto weights = scaled_attention_weights(q, k);
  EXPECT_NEAR(weights(0, 0), w0, 1e-12);
  EXPECT_NEAR(weights(0, 1), 1.0 - w0, 1e-12);
  auto out = scaled_dot_product_attention(q, k, v);
  EXPECT_NEAR(out(0, 0), w0, 1e-12);
  EXPECT_NEAR(out(0, 1), 1.0 - w0, 1e-12);
}

TEST(Attention, RowsSumToOneAndMaskedKeysSuppressed) {
  Rng rng(9);
  auto q = random_tensor<double>({6, 4}, rng);
  auto k = random_tensor<double>({5, 4}, rng);
  PadMask mask = {0, 0, 1, 0, 1};
  auto weights = scaled_attention_weights(q, k, mask);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 5; ++j) total += weights(i, j);
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_LT(weights(i, 2), 1e-12);
    EXPECT_LT(weights(i, 4), 1e-12);
  }
}

TEST(Attention, AllKeysMaskedRejected) {
  auto q = Tensor<float>::zeros({1, 2});
  auto k = Tensor<float>::zeros({2, 2});
  auto v = Tensor<float>::zeros({2, 2});
  PadMask mask = {1, 1};
  EXPECT_THROW(scaled_dot_product_attention(q, k, v, mask), std::invalid_argument);
}

TEST(MultiHead, SingleIdentityHeadEqualsPlainAttention) {
  Rng rng(5);
  auto x = random_tensor<double>({4, 3}, rng);
  AttentionWeights<double> w;
  auto eye = Tensor<double>::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  w.wq = {eye};
  w.wk = {eye};
  w.wv = {eye};
  w.wo = eye;
  auto mha = multi_head_attention(x, w);
  auto plain = scaled_dot_product_attention(x, x, x);
  for (std::size_t i = 0; i < mha.numel(); ++i) EXPECT_NEAR(mha.at(i), plain.at(i), 1e-12);
}

TEST(MultiHead, ZeroProjectionsGiveZeroOutput) {
  Rng rng(6);
  auto x = random_tensor<double>({4, 6}, rng);
  AttentionWeights<double> w;
  for (int h = 0; h < 2; ++h) {
    w.wq.push_back(Tensor<double>::zeros({6, 3}));
    w.wk.push_back(Tensor<double>::zeros({6, 3}));
    w.wv.push_back(Tensor<double>::zeros({6, 3}));
  }
  w.wo = Tensor<double>::zeros({6, 6});
  auto out = multi_head_attention(x, w);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.at(i), 0.0);
}

TEST(MultiHead, MatchesIndependentReimplementation) {
  Rng rng(7);
  const std::size_t t_len = 5, d_model = 4, d_k = 2;
  auto x = random_tensor<double>({t_len, d_model}, rng);
  AttentionWeights<double> w;
  for (int h = 0; h < 2; ++h) {
    w.wq.push_back(random_tensor<double>({d_model, d_k}, rng));
    w.wk.push_back(random_tensor<double>({d_model, d_k}, rng));
    w.wv.push_back(random_tensor<double>({d_model, d_k}, rng));
  }
  w.wo = random_tensor<double>({d_model, d_model}, rng);

  std::vector<std::vector<double>> x_rows(t_len, std::vector<double>(d_model));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d_model; ++j) x_rows[t][j] = x(t, j);
  auto expected = reference_mha(x_rows, w, d_k);
  auto got = multi_head_attention(x, w);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d_model; ++j) EXPECT_NEAR(got(t, j), expected[t][j], 1e-5);
}

TEST(EncoderLayer, ResidualOnlyPathIsDoubleLayerNorm) {
  Rng rng(8);
  const std::size_t d = 4;
  auto x = random_tensor<double>({3, d}, rng);
  EncoderLayerWeights<double> w;
  w.attn.wq = {Tensor<double>::zeros({d, d})};
  w.attn.wk = {Tensor<double>::zeros({d, d})};
  w.attn.wv = {Tensor<double>::zeros({d, d})};
  w.attn.wo = Tensor<double>::zeros({d, d});
  w.ffn.w1 = Tensor<double>::zeros({d, 8});
  w.ffn.b1 = Tensor<double>::zeros({8});
  w.ffn.w2 = Tensor<double>::zeros({8, d});
  w.ffn.b2 = Tensor<double>::zeros({d});
  w.ln1_gain = Tensor<double>::full({d}, 1.0);
  w.ln1_bias = Tensor<double>::zeros({d});
  w.ln2_gain = Tensor<double>::full({d}, 1.0);
  w.ln2_bias = Tensor<double>::zeros({d});
  auto out = encoder_layer(x, w, {}, 0.0, {}, 1e-5);
  auto gain = Tensor<double>::full({d}, 1.0);
  auto bias = Tensor<double>::zeros({d});
  auto expected = layer_norm(layer_norm(x, gain, bias, 1e-5), gain, bias, 1e-5);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.at(i), expected.at(i), 1e-12);
}

TEST(EncoderLayer, PreservesShape) {
  Rng rng(12);
  auto cfg = tiny_config();
  auto model = EncoderModel<double>::init(cfg, rng);
  for (std::size_t t_len : {std::size_t(1), std::size_t(4), std::size_t(10)}) {
    std::vector<int> ids(t_len, 5);
    auto z = model.encode(ids);
    EXPECT_EQ(z.extent(0), t_len);
    EXPECT_EQ(z.extent(1), cfg.d_model);
  }
}

TEST(Encode, EmptyStackIsEmbeddingPlusPosition) {
  Rng rng(13);
  auto cfg = tiny_config();
  cfg.n_layers = 0;
  auto model = EncoderModel<double>::init(cfg, rng);
  std::vector<int> ids = {2, 7, 4};
  auto z = model.encode(ids);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      EXPECT_DOUBLE_EQ(z(t, j), model.token_embed(static_cast<std::size_t>(ids[t]), j) +
                                    model.pos_embed(t, j));
}

TEST(Encode, PositionEmbeddingsBreakPermutationSymmetry) {
  Rng rng(14);
  auto model = EncoderModel<double>::init(tiny_config(), rng);
  auto z1 = model.encode({2, 5, 6});
  auto z2 = model.encode({2, 6, 5});
  double max_diff = 0;
  for (std::size_t i = 0; i < z1.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(z1.at(i) - z2.at(i)));
  EXPECT_GT(max_diff, 1e-6);
}

TEST(Encode, DeterministicWithDropoutDisabled) {
  Rng rng(15);
  auto model = EncoderModel<float>::init(tiny_config(), rng);
  auto z1 = model.encode({2, 5, 6, 1});
  auto z2 = model.encode({2, 5, 6, 1});
  for (std::size_t i = 0; i < z1.numel(); ++i) EXPECT_EQ(z1.at(i), z2.at(i));
}

TEST(Encode, RejectsOverlongAndOutOfVocab) {
  Rng rng(16);
  auto model = EncoderModel<float>::init(tiny_config(), rng);
  std::vector<int> too_long(11, 4);
  try {
    model.encode(too_long);
    FAIL() << "expected length error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("10"), std::string::npos);  // limit reported
  }
  EXPECT_THROW(model.encode({12}), std::invalid_argument);
}

TEST(Classify, ZeroHeadReturnsBias) {
  Rng rng(17);
  auto model = EncoderModel<double>::init(tiny_config(), rng);
  model.cls_b.at(0) = 0.3;
  model.cls_b.at(1) = -0.1;
  model.cls_b.at(2) = 0.7;
  auto logits = model.classify_logits({2, 5, 7});
  EXPECT_EQ(logits.shape(), Shape({3}));
  EXPECT_NEAR(logits.at(0), 0.3, 1e-12);
  EXPECT_NEAR(logits.at(1), -0.1, 1e-12);
  EXPECT_NEAR(logits.at(2), 0.7, 1e-12);
}

TEST(Classify, ArgmaxInvariantToConstantShift) {
  Rng rng(18);
  auto model = EncoderModel<double>::init(tiny_config(), rng);
  for (auto& v : model.cls_w.values()) v = rng.normal();
  auto logits = model.classify_logits({2, 4, 9, 3});
  auto shifted = add_scalar(logits, 123.0);
  EXPECT_EQ(argmax(logits), argmax(shifted));
}

TEST(Mlm, ZeroHeadGivesUniformDistributionAndLogVLoss) {
  Rng rng(19);
  auto cfg = tiny_config();
  auto model = EncoderModel<double>::init(cfg, rng);
  auto logits = model.mlm_logits({2, 3, 7}, {1});
  EXPECT_EQ(logits.shape(), Shape({1, cfg.vocab_size}));
  auto probs = softmax(logits, 1);
  for (std::size_t j = 0; j < cfg.vocab_size; ++j)
    EXPECT_NEAR(probs(0, j), 1.0 / static_cast<double>(cfg.vocab_size), 1e-12);
  auto loss = cross_entropy_loss(logits, {7});
  EXPECT_NEAR(loss.item(), std::log(static_cast<double>(cfg.vocab_size)), 1e-12);
}

TEST(Mlm, LogitsShapeContractAndEmptyPositionsRejected) {
  Rng rng(20);
  auto cfg = tiny_config();
  auto model = EncoderModel<double>::init(cfg, rng);
  auto logits = model.mlm_logits({2, 3, 7, 4}, {1, 3, 2});
  EXPECT_EQ(logits.shape(), Shape({3, cfg.vocab_size}));
  EXPECT_THROW(model.mlm_logits({2, 3}, {}), std::invalid_argument);
}

namespace {

/// Unit-scale weights keep every gradient well above finite-difference
/// noise; layer-norm gains and biases stay at their defaults.
template <typename ModelT>
void condition_for_gradcheck(ModelT& model, Rng& rng) {
  for (auto& [name, t] : model.parameters()) {
    if (name.find("ln") != std::string::npos) continue;
    for (auto& v : t.values()) v = rng.normal() * 0.5;
  }
}

}  // namespace

TEST(EncoderLayer, FullLayerGradientPassesFiniteDifferences) {
  Rng rng(21);
  auto cfg = tiny_config();
  cfg.n_layers = 1;
  auto model = EncoderModel<double>::init(cfg, rng);
  condition_for_gradcheck(model, rng);
  auto weight = Tensor<double>::zeros({4, cfg.d_model});
  for (auto& v : weight.values()) v = rng.normal();

  std::vector<Tensor<double>> inputs;
  for (auto& [name, t] : model.parameters())
    if (name.rfind("layer0.", 0) == 0) inputs.push_back(t);
  auto forward = [&]() { return mul(model.encode({2, 5, 7, 9}), weight); };
  Rng probe_rng(77);
  auto report = finite_diff_check<double>("encoder_layer", forward, inputs, 5, 1e-6, probe_rng);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(WholeModel, GradientSpotChecksEveryParameterTensor) {
  Rng rng(22);
  auto model = EncoderModel<double>::init(tiny_config(), rng);
  condition_for_gradcheck(model, rng);

  std::vector<int> ids = {2, 5, 7, 9, 4};
  auto forward = [&]() {
    auto cls_loss = cross_entropy_loss(model.classify_logits(ids), {1});
    auto mlm_loss = cross_entropy_loss(model.mlm_logits(ids, {1, 3}), {5, 8});
    return add(cls_loss, mlm_loss);
  };
  std::vector<Tensor<double>> inputs;
  for (auto& [name, t] : model.parameters()) inputs.push_back(t);
  Rng probe_rng(88);
  auto report = finite_diff_check<double>("encoder_model", forward, inputs, 5, 1e-6, probe_rng);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
  EXPECT_GE(report.probe_count, 5 * inputs.size());
}

TEST(ParameterCount, ClosedFormMatchesAllocation) {
  std::vector<TransformerConfig> configs;
  configs.push_back(tiny_config());
  TransformerConfig wide;
  wide.vocab_size = 50;
  wide.d_model = 32;
  wide.n_heads = 4;
  wide.d_ff = 64;
  wide.n_layers = 3;
  wide.max_seq_len = 64;
  wide.n_classes = 7;
  configs.push_back(wide);
  for (const auto& cfg : configs) {
    Rng rng(23);
    auto model = EncoderModel<float>::init(cfg, rng);
    EXPECT_EQ(model.parameter_count(), transformer_parameter_count(cfg));
  }
}

TEST(Config, ValidationCatchesBadShapes) {
  auto cfg = tiny_config();
  cfg.n_heads = 3;  // 8 % 3 != 0
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.vocab_size = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
