#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pslu/data.hpp"
#include "pslu/rng.hpp"
#include "pslu/tensor.hpp"

namespace pslu {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global max-norm; 0 disables
};

/// Bias-corrected Adam over a fixed parameter list. Moment buffers are
/// shaped like their parameters; the step counter starts at 0.
template <typename S>
class AdamOptimizer {
 public:
  AdamOptimizer(AdamConfig cfg, std::vector<std::pair<std::string, Tensor<S>>> params)
      : cfg_(cfg), params_(std::move(params)) {
    check_arg(cfg_.lr > 0.0, "adam: learning rate must be positive");
    for (auto& [name, p] : params_) {
      check_arg(p.requires_grad(), "adam: parameter " + name + " has no gradient state");
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    if (cfg_.grad_clip > 0.0) clip_global_norm();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t t = 0; t < params_.size(); ++t) {
      auto& p = params_[t].second;
      auto grad = p.grad();
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double g = static_cast<double>(grad[i]);
        if (!std::isfinite(g))
          throw std::runtime_error("adam: non-finite gradient in parameter " + params_[t].first);
        m_[t][i] = cfg_.beta1 * m_[t][i] + (1.0 - cfg_.beta1) * g;
        v_[t][i] = cfg_.beta2 * v_[t][i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = m_[t][i] / bc1;
        const double v_hat = v_[t][i] / bc2;
        p.at(i) -= static_cast<S>(cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::size_t step_count() const { return step_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

 private:
  void clip_global_norm() {
    double sq = 0.0;
    for (auto& [name, p] : params_)
      for (S g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= cfg_.grad_clip) return;
    const S factor = static_cast<S>(cfg_.grad_clip / norm);
    for (auto& [name, p] : params_)
      for (S& g : p.grad()) g *= factor;
  }

  AdamConfig cfg_;
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct ClassMetrics {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct EvalReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t n_correct = 0;
};

/// Accuracy n_c/n and per-class F1 = TP / (TP + 0.5 (FP + FN)), macro scores
/// as unweighted means. A class with TP = FP = FN = 0 scores 0 and still
/// counts in the macro average.
inline EvalReport evaluate(const std::vector<int>& predictions, const std::vector<int>& golds,
                           std::size_t n_classes) {
  check_arg(predictions.size() == golds.size(),
            "evaluate: " + std::to_string(predictions.size()) + " predictions vs " +
                std::to_string(golds.size()) + " golds");
  check_arg(!predictions.empty(), "evaluate: empty input");
  EvalReport r;
  r.n = predictions.size();
  r.per_class.resize(n_classes);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i], g = golds[i];
    check_arg(p >= 0 && static_cast<std::size_t>(p) < n_classes, "evaluate: prediction out of range");
    check_arg(g >= 0 && static_cast<std::size_t>(g) < n_classes, "evaluate: gold label out of range");
    if (p == g) {
      ++r.per_class[static_cast<std::size_t>(p)].tp;
      ++r.n_correct;
    } else {
      ++r.per_class[static_cast<std::size_t>(p)].fp;
      ++r.per_class[static_cast<std::size_t>(g)].fn;
    }
  }
  for (auto& c : r.per_class) {
    c.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    c.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const double denom = static_cast<double>(c.tp) + 0.5 * static_cast<double>(c.fp + c.fn);
    c.f1 = denom == 0.0 ? 0.0 : static_cast<double>(c.tp) / denom;
    r.macro_precision += c.precision;
    r.macro_recall += c.recall;
    r.macro_f1 += c.f1;
  }
  if (n_classes > 0) {
    r.macro_precision /= static_cast<double>(n_classes);
    r.macro_recall /= static_cast<double>(n_classes);
    r.macro_f1 /= static_cast<double>(n_classes);
  }
  r.accuracy = static_cast<double>(r.n_correct) / static_cast<double>(r.n);
  return r;
}

/// Macro F1 of a set of per-class F1 scores (for reports quoted to 2 decimals).
inline double macro_f1_of(const std::vector<double>& per_class_f1) {
  double acc = 0.0;
  for (double f : per_class_f1) acc += f;
  return per_class_f1.empty() ? 0.0 : acc / static_cast<double>(per_class_f1.size());
}

// ---------------------------------------------------------------------------
// Datasets, prediction, fine-tuning
// ---------------------------------------------------------------------------

struct LabeledExample {
  std::vector<int> ids;  // encoded, CLS first
  int label = 0;
};

template <typename Model>
std::vector<int> predict(Model& model, const std::vector<std::vector<int>>& sequences) {
  std::vector<int> out;
  out.reserve(sequences.size());
  for (const auto& ids : sequences)
    out.push_back(static_cast<int>(argmax(model.classify_logits(ids))));
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  double dev_macro_f1 = 0.0;
};

struct TrainOptions {
  AdamConfig adam;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t patience = 0;  // epochs without dev improvement before stopping; 0 disables
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  double best_dev_macro_f1 = 0.0;
  std::size_t best_epoch = 0;
};

namespace detail {

template <typename S>
std::vector<std::vector<S>> snapshot_tensors(const std::vector<std::pair<std::string, Tensor<S>>>& ts) {
  std::vector<std::vector<S>> out;
  out.reserve(ts.size());
  for (const auto& [name, t] : ts) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

template <typename S>
void restore_tensors(std::vector<std::pair<std::string, Tensor<S>>>& ts,
                     const std::vector<std::vector<S>>& snap) {
  for (std::size_t i = 0; i < ts.size(); ++i)
    std::copy(snap[i].begin(), snap[i].end(), ts[i].second.values().begin());
}

}  // namespace detail

/// Cross-entropy fine-tuning with per-epoch dev evaluation. Returns the model
/// at the weights whose dev macro-F1 was highest (earliest epoch on ties).
template <typename Model>
FinetuneResult finetune(Model& model, const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& dev, const TrainOptions& opt) {
  using S = std::remove_reference_t<decltype(model.cls_w.at(0))>;
  check_arg(!train.empty(), "finetune: empty train split");
  check_arg(!dev.empty(), "finetune: empty dev split");
  check_arg(opt.batch_size >= 1, "finetune: batch size must be positive");

  auto params = model.parameters();
  auto state = model.state_tensors();
  AdamOptimizer<S> adam(opt.adam, params);
  Rng dropout_rng = Rng::substream(opt.seed, "dropout");

  FinetuneResult result;
  auto best_params = detail::snapshot_tensors<S>(params);
  auto best_state = detail::snapshot_tensors<S>(state);
  double best_f1 = -1.0;
  std::size_t best_epoch = 0, since_best = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<std::vector<int>> dev_ids;
  std::vector<int> dev_gold;
  for (const auto& ex : dev) {
    dev_ids.push_back(ex.ids);
    dev_gold.push_back(ex.label);
  }

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng = Rng::substream(opt.seed, "shuffle", epoch);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t batch_n = std::min(opt.batch_size, order.size() - start);
      std::vector<std::vector<int>> batch_ids;
      std::vector<int> batch_labels;
      for (std::size_t k = 0; k < batch_n; ++k) {
        batch_ids.push_back(train[order[start + k]].ids);
        batch_labels.push_back(train[order[start + k]].label);
      }
      ForwardOptions fwd{true, &dropout_rng};
      auto logits = model.classify_logits_batch(batch_ids, fwd);
      Tensor<S> total = cross_entropy_loss(logits[0], {batch_labels[0]});
      for (std::size_t k = 1; k < batch_n; ++k)
        total = add(total, cross_entropy_loss(logits[k], {batch_labels[k]}));
      Tensor<S> loss = scale(total, S(1) / static_cast<S>(batch_n));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw std::runtime_error("finetune: divergence (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      epoch_loss += lv * static_cast<double>(batch_n);
      seen += batch_n;
      adam.zero_grad();
      backward(loss);
      adam.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(seen);
    std::vector<int> dev_pred = predict(model, dev_ids);
    std::size_t n_classes = model.config.n_classes;
    EvalReport dev_report = evaluate(dev_pred, dev_gold, n_classes);
    rec.dev_accuracy = dev_report.accuracy;
    rec.dev_macro_f1 = dev_report.macro_f1;
    result.history.push_back(rec);

    if (dev_report.macro_f1 > best_f1) {
      best_f1 = dev_report.macro_f1;
      best_epoch = epoch;
      best_params = detail::snapshot_tensors<S>(params);
      best_state = detail::snapshot_tensors<S>(state);
      since_best = 0;
    } else {
      ++since_best;
      if (opt.patience > 0 && since_best >= opt.patience) break;
    }
  }

  detail::restore_tensors<S>(params, best_params);
  detail::restore_tensors<S>(state, best_state);
  result.best_dev_macro_f1 = best_f1;
  result.best_epoch = best_epoch;
  return result;
}

}  // namespace pslu
