#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pslu/pretrain.hpp"
#include "pslu/transformer.hpp"

using namespace pslu;

namespace {

PhoneVocab vocab_of_size(std::size_t n_real) {
  PhoneVocab v;
  for (std::size_t i = 0; i < n_real; ++i) v.add("t" + std::to_string(i));
  return v;
}

std::vector<int> sample_sequence(const PhoneVocab& v, std::size_t len, Rng& rng) {
  std::vector<int> ids = {PhoneVocab::kCls};
  for (std::size_t i = 0; i < len; ++i)
    ids.push_back(PhoneVocab::kNumSpecials +
                  static_cast<int>(rng.uniform_below(v.size() - PhoneVocab::kNumSpecials)));
  return ids;
}

}  // namespace

TEST(DynamicMask, RateZeroLeavesSequenceUntouched) {
  PhoneVocab v = vocab_of_size(10);
  MaskingPolicy policy;
  policy.mask_rate = 0.0;
  Rng rng(1);
  std::vector<int> ids = {2, 4, 5, 6, 7};
  auto masked = dynamic_mask(ids, v, policy, rng);
  EXPECT_EQ(masked.corrupted, ids);
  EXPECT_TRUE(masked.positions.empty());
  EXPECT_TRUE(masked.originals.empty());
}

TEST(DynamicMask, RateOneAllMaskFractionMasksEveryRealToken) {
  PhoneVocab v = vocab_of_size(10);
  MaskingPolicy policy;
  policy.mask_rate = 1.0;
  policy.replace_mask_frac = 1.0;
  policy.replace_random_frac = 0.0;
  policy.keep_frac = 0.0;
  Rng rng(2);
  std::vector<int> ids = {2, 4, 5, 0, 7};  // CLS, three tokens, one PAD
  auto masked = dynamic_mask(ids, v, policy, rng);
  EXPECT_EQ(masked.corrupted, (std::vector<int>{2, 3, 3, 0, 3}));
  EXPECT_EQ(masked.positions, (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(masked.originals, (std::vector<int>{4, 5, 7}));
}

TEST(DynamicMask, EmpiricalRateWithinBandAndEpochsDiffer) {
  PhoneVocab v = vocab_of_size(40);
  MaskingPolicy policy;  // rate 0.15
  Rng data_rng(3);
  std::vector<std::vector<int>> corpus;
  std::size_t maskable = 0;
  while (maskable < 120000) {
    corpus.push_back(sample_sequence(v, 40, data_rng));
    maskable += 40;
  }
  Rng epoch0 = Rng::substream(9, "mask", 0);
  Rng epoch1 = Rng::substream(9, "mask", 1);
  auto pass0 = dynamic_mask(corpus, v, policy, epoch0);
  auto pass1 = dynamic_mask(corpus, v, policy, epoch1);

  std::size_t selected = 0;
  for (const auto& m : pass0) selected += m.positions.size();
  const double rate = static_cast<double>(selected) / static_cast<double>(maskable);
  EXPECT_GE(rate, 0.14);
  EXPECT_LE(rate, 0.16);

  bool any_difference = false;
  for (std::size_t i = 0; i < corpus.size() && !any_difference; ++i)
    any_difference = pass0[i].positions != pass1[i].positions;
  EXPECT_TRUE(any_difference);
}

TEST(DynamicMask, CorruptionConfinedToReportedPositions) {
  PhoneVocab v = vocab_of_size(25);
  MaskingPolicy policy;
  Rng data_rng(4), mask_rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto ids = sample_sequence(v, 30, data_rng);
    auto masked = dynamic_mask(ids, v, policy, mask_rng);
    std::set<std::size_t> positions(masked.positions.begin(), masked.positions.end());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!positions.count(i)) {
        EXPECT_EQ(masked.corrupted[i], ids[i]);
      }
    }
    for (std::size_t k = 0; k < masked.positions.size(); ++k) {
      EXPECT_NE(ids[masked.positions[k]], PhoneVocab::kPad);
      EXPECT_NE(masked.positions[k], 0u);  // CLS is position 0 here
      EXPECT_EQ(masked.originals[k], ids[masked.positions[k]]);
    }
  }
}

TEST(DynamicMask, SeededDeterminism) {
  PhoneVocab v = vocab_of_size(20);
  MaskingPolicy policy;
  Rng data_rng(6);
  auto ids = sample_sequence(v, 50, data_rng);
  Rng r1 = Rng::substream(123, "mask", 7);
  Rng r2 = Rng::substream(123, "mask", 7);
  auto m1 = dynamic_mask(ids, v, policy, r1);
  auto m2 = dynamic_mask(ids, v, policy, r2);
  EXPECT_EQ(m1.corrupted, m2.corrupted);
  EXPECT_EQ(m1.positions, m2.positions);
}

TEST(MaskingPolicy, FractionsMustSumToOne) {
  MaskingPolicy policy;
  policy.replace_mask_frac = 0.5;
  EXPECT_THROW(policy.validate(), std::invalid_argument);
}

namespace {

TransformerConfig memo_config(std::size_t vocab_size) {
  TransformerConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.n_layers = 2;
  cfg.max_seq_len = 16;
  cfg.n_classes = 2;
  cfg.dropout_rate = 0.0;
  return cfg;
}

/// Eight utterances over disjoint token sets: every masked token is fully
/// determined by its neighbors, so the MLM loss can approach zero.
std::vector<std::vector<int>> memorization_corpus(const PhoneVocab& v) {
  std::vector<std::vector<int>> corpus;
  for (int u = 0; u < 8; ++u) {
    std::vector<int> ids = {PhoneVocab::kCls};
    for (int k = 0; k < 6; ++k) ids.push_back(PhoneVocab::kNumSpecials + u * 6 + k);
    corpus.push_back(ids);
  }
  return corpus;
}

}  // namespace

TEST(Pretrain, ZeroEpochsLeaveWeightsBitIdentical) {
  PhoneVocab v = vocab_of_size(48);
  Rng init_rng(7);
  auto model = EncoderModel<float>::init(memo_config(v.size()), init_rng);
  std::vector<std::vector<float>> before;
  for (auto& [name, t] : model.parameters()) before.emplace_back(t.values().begin(), t.values().end());

  TrainOptions opt;
  opt.epochs = 0;
  auto result = pretrain(model, memorization_corpus(v), v, MaskingPolicy{}, opt);
  EXPECT_TRUE(result.loss_curve.empty());
  std::size_t i = 0;
  for (auto& [name, t] : model.parameters()) {
    std::vector<float> after(t.values().begin(), t.values().end());
    EXPECT_EQ(after, before[i++]) << name;
  }
}

TEST(Pretrain, InitialLossIsLogVocab) {
  PhoneVocab v = vocab_of_size(48);
  Rng init_rng(8);
  auto model = EncoderModel<float>::init(memo_config(v.size()), init_rng);
  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 8;
  opt.seed = 0;
  auto result = pretrain(model, memorization_corpus(v), v, MaskingPolicy{}, opt);
  ASSERT_FALSE(result.loss_curve.empty());
  EXPECT_NEAR(result.loss_curve.front().second, std::log(static_cast<double>(v.size())), 1e-3);
}

TEST(Pretrain, MemorizesEightUtterances) {
  PhoneVocab v = vocab_of_size(48);
  Rng init_rng(9);
  auto model = EncoderModel<float>::init(memo_config(v.size()), init_rng);
  MaskingPolicy policy;
  policy.mask_rate = 0.3;
  TrainOptions opt;
  opt.adam.lr = 1.5e-3;
  opt.adam.grad_clip = 0.5;
  opt.adam.eps = 1e-6;
  opt.epochs = 500;  // full batch: one optimizer step per epoch
  opt.batch_size = 8;
  opt.seed = 1;
  auto result = pretrain(model, memorization_corpus(v), v, policy, opt);
  ASSERT_LE(result.loss_curve.size(), 500u);
  double best = result.epoch_loss.front();
  for (double loss : result.epoch_loss) best = std::min(best, loss);
  EXPECT_LT(best, 0.1);

  // Epoch losses (fixed evaluation mask) are non-increasing within jitter.
  for (std::size_t e = 1; e < result.epoch_loss.size(); ++e)
    EXPECT_LE(result.epoch_loss[e], result.epoch_loss[e - 1] + 0.05) << "epoch " << e;
}

TEST(Pretrain, DeterministicUnderSeed) {
  PhoneVocab v = vocab_of_size(48);
  auto corpus = memorization_corpus(v);
  TrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 4;
  opt.seed = 3;

  Rng i1(10);
  auto m1 = EncoderModel<float>::init(memo_config(v.size()), i1);
  auto r1 = pretrain(m1, corpus, v, MaskingPolicy{}, opt);
  Rng i2(10);
  auto m2 = EncoderModel<float>::init(memo_config(v.size()), i2);
  auto r2 = pretrain(m2, corpus, v, MaskingPolicy{}, opt);

  EXPECT_EQ(r1.loss_curve, r2.loss_curve);
  auto p1 = m1.parameters();
  auto p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i)
    for (std::size_t k = 0; k < p1[i].second.numel(); ++k)
      EXPECT_EQ(p1[i].second.at(k), p2[i].second.at(k));
}
