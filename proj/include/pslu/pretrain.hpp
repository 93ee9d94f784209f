#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pslu/data.hpp"
#include "pslu/rng.hpp"
#include "pslu/tensor.hpp"
#include "pslu/train_eval.hpp"

namespace pslu {

/// Dynamic-masking policy: every pass over the data re-samples which
/// positions are hidden. Selected positions become MASK, a random token, or
/// stay unchanged per the three fractions, which must sum to 1.
struct MaskingPolicy {
  double mask_rate = 0.15;
  double replace_mask_frac = 0.8;
  double replace_random_frac = 0.1;
  double keep_frac = 0.1;

  void validate() const {
    check_arg(mask_rate >= 0.0 && mask_rate <= 1.0, "masking: rate outside [0, 1]");
    check_arg(replace_mask_frac >= 0.0 && replace_random_frac >= 0.0 && keep_frac >= 0.0,
              "masking: negative fraction");
    const double total = replace_mask_frac + replace_random_frac + keep_frac;
    check_arg(std::abs(total - 1.0) < 1e-9,
              "masking: fractions sum to " + std::to_string(total) + ", expected 1");
  }
};

struct MaskedSequence {
  std::vector<int> corrupted;
  std::vector<std::size_t> positions;  // where the loss is computed
  std::vector<int> originals;          // ids the model must recover
};

using MaskedBatch = std::vector<MaskedSequence>;

/// Mask one encoded sequence. PAD and CLS positions are never selected; each
/// remaining position is chosen independently with probability mask_rate.
inline MaskedSequence dynamic_mask(const std::vector<int>& ids, const PhoneVocab& vocab,
                                   const MaskingPolicy& policy, Rng& rng) {
  policy.validate();
  const std::size_t n_real = vocab.size() - PhoneVocab::kNumSpecials;
  check_arg(n_real > 0, "dynamic_mask: vocab has no maskable tokens");
  MaskedSequence out;
  out.corrupted = ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == PhoneVocab::kPad || ids[i] == PhoneVocab::kCls) continue;
    if (rng.uniform() >= policy.mask_rate) continue;
    out.positions.push_back(i);
    out.originals.push_back(ids[i]);
    const double action = rng.uniform();
    if (action < policy.replace_mask_frac) {
      out.corrupted[i] = PhoneVocab::kMask;
    } else if (action < policy.replace_mask_frac + policy.replace_random_frac) {
      out.corrupted[i] = PhoneVocab::kNumSpecials + static_cast<int>(rng.uniform_below(n_real));
    }
    // else keep the original token; the position still contributes loss.
  }
  return out;
}

inline MaskedBatch dynamic_mask(const std::vector<std::vector<int>>& batch, const PhoneVocab& vocab,
                                const MaskingPolicy& policy, Rng& rng) {
  MaskedBatch out;
  out.reserve(batch.size());
  for (const auto& ids : batch) out.push_back(dynamic_mask(ids, vocab, policy, rng));
  return out;
}

struct PretrainResult {
  std::vector<std::pair<std::size_t, double>> loss_curve;  // (optimizer step, batch mean loss)
  std::vector<double> epoch_loss;                          // evaluation loss per epoch, fixed mask
};

/// Position-weighted mean MLM loss over the corpus under the masks drawn
/// from `rng`. Reseeding with the same stream makes epoch-end evaluations
/// directly comparable across a run.
template <typename Model>
double mlm_eval_loss(Model& model, const std::vector<std::vector<int>>& corpus,
                     const PhoneVocab& vocab, const MaskingPolicy& policy, Rng rng) {
  using S = std::remove_reference_t<decltype(model.mlm_w.at(0))>;
  double total = 0.0;
  std::size_t positions = 0;
  for (const auto& ids : corpus) {
    MaskedSequence masked = dynamic_mask(ids, vocab, policy, rng);
    if (masked.positions.empty()) continue;
    Tensor<S> logits = model.mlm_logits(masked.corrupted, masked.positions);
    Tensor<S> loss = cross_entropy_loss(logits, masked.originals);
    total += static_cast<double>(loss.item()) * static_cast<double>(masked.positions.size());
    positions += masked.positions.size();
  }
  return positions ? total / static_cast<double>(positions) : 0.0;
}

/// Masked-phone-model pretraining over per-utterance sequences. Masks are
/// re-drawn from an epoch-indexed substream every pass, so no two epochs see
/// the same corruption. Deterministic under seed; aborts on divergence.
template <typename Model>
PretrainResult pretrain(Model& model, const std::vector<std::vector<int>>& corpus,
                        const PhoneVocab& vocab, const MaskingPolicy& policy,
                        const TrainOptions& opt) {
  using S = std::remove_reference_t<decltype(model.mlm_w.at(0))>;
  check_arg(!corpus.empty(), "pretrain: empty corpus");
  policy.validate();

  AdamOptimizer<S> adam(opt.adam, model.parameters());
  Rng dropout_rng = Rng::substream(opt.seed, "dropout");

  PretrainResult result;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng = Rng::substream(opt.seed, "shuffle", epoch);
    shuffle_rng.shuffle(order);
    Rng mask_rng = Rng::substream(opt.seed, "mask", epoch);

    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t batch_n = std::min(opt.batch_size, order.size() - start);
      std::vector<std::vector<int>> batch_ids;
      std::vector<std::vector<std::size_t>> batch_positions;
      std::vector<std::vector<int>> batch_targets;
      for (std::size_t k = 0; k < batch_n; ++k) {
        MaskedSequence masked = dynamic_mask(corpus[order[start + k]], vocab, policy, mask_rng);
        if (masked.positions.empty()) continue;  // nothing to predict this pass
        batch_ids.push_back(std::move(masked.corrupted));
        batch_positions.push_back(std::move(masked.positions));
        batch_targets.push_back(std::move(masked.originals));
      }
      if (batch_ids.empty()) continue;
      ForwardOptions fwd{true, &dropout_rng};
      auto logits = model.mlm_logits_batch(batch_ids, batch_positions, fwd);
      Tensor<S> total = cross_entropy_loss(logits[0], batch_targets[0]);
      for (std::size_t k = 1; k < batch_ids.size(); ++k)
        total = add(total, cross_entropy_loss(logits[k], batch_targets[k]));
      Tensor<S> loss = scale(total, S(1) / static_cast<S>(batch_ids.size()));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw std::runtime_error("pretrain: divergence (non-finite loss) at epoch " +
                                 std::to_string(epoch) + ", step " +
                                 std::to_string(adam.step_count()));
      adam.zero_grad();
      backward(loss);
      adam.step();
      result.loss_curve.emplace_back(adam.step_count(), lv);
    }
    // Epoch progress is measured on one fixed masking so the numbers are
    // comparable across epochs; training itself never reuses a mask set.
    result.epoch_loss.push_back(
        mlm_eval_loss(model, corpus, vocab, policy, Rng::substream(opt.seed, "eval-mask")));
  }
  return result;
}

}  // namespace pslu
