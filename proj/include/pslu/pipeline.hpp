#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pslu/baseline.hpp"
#include "pslu/checkpoint.hpp"
#include "pslu/data.hpp"
#include "pslu/pretrain.hpp"
#include "pslu/train_eval.hpp"
#include "pslu/transformer.hpp"

namespace pslu {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

/// Everything a training subcommand needs, resolved from a JSON config file
/// plus command-line overrides (flags win).
struct RunConfig {
  std::string model_kind = "transformer";
  std::uint64_t seed = 0;
  std::size_t vocab_min_count = 1;
  std::size_t n_classes = 2;   // pretraining default; finetuning derives it from labels
  std::size_t max_seq_len = 128;
  TransformerConfig transformer;
  BaselineConfig baseline;
  AdamConfig adam;
  bool lr_explicit = false;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t patience = 0;
  MaskingPolicy masking;
  // "full" copies every matching tensor from --init; "features" warm-starts
  // only the feature extractor (embeddings, convolutions) and reinitializes
  // the rest.
  std::string init_transfer = "full";

  /// Per-kind learning-rate default when the config does not pin one.
  double effective_lr() const {
    if (lr_explicit) return adam.lr;
    return model_kind == "baseline" ? 1e-3 : 5e-4;
  }

  TrainOptions train_options() const {
    TrainOptions opt;
    opt.adam = adam;
    opt.adam.lr = effective_lr();
    opt.epochs = epochs;
    opt.batch_size = batch_size;
    opt.patience = patience;
    opt.seed = seed;
    return opt;
  }
};

inline json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open JSON file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace cfg_detail {

template <typename T>
void get_to_if(const json& j, const char* key, T& value) {
  if (j.contains(key)) j.at(key).get_to(value);
}

}  // namespace cfg_detail

inline TransformerConfig transformer_config_from_json(const json& j, std::size_t max_seq_len) {
  TransformerConfig c;
  c.max_seq_len = max_seq_len;
  cfg_detail::get_to_if(j, "d_model", c.d_model);
  cfg_detail::get_to_if(j, "n_heads", c.n_heads);
  cfg_detail::get_to_if(j, "d_ff", c.d_ff);
  cfg_detail::get_to_if(j, "n_layers", c.n_layers);
  cfg_detail::get_to_if(j, "dropout", c.dropout_rate);
  cfg_detail::get_to_if(j, "mean_pool", c.mean_pool);
  return c;
}

inline json transformer_config_to_json(const TransformerConfig& c) {
  return json{{"d_model", c.d_model},     {"n_heads", c.n_heads},   {"d_ff", c.d_ff},
              {"n_layers", c.n_layers},   {"dropout", c.dropout_rate},
              {"mean_pool", c.mean_pool}, {"max_seq_len", c.max_seq_len},
              {"vocab_size", c.vocab_size}, {"n_classes", c.n_classes}};
}

inline TransformerConfig transformer_config_from_snapshot(const json& j) {
  TransformerConfig c;
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("n_layers").get_to(c.n_layers);
  j.at("dropout").get_to(c.dropout_rate);
  j.at("mean_pool").get_to(c.mean_pool);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("n_classes").get_to(c.n_classes);
  return c;
}

inline BaselineConfig baseline_config_from_json(const json& j) {
  BaselineConfig c;
  cfg_detail::get_to_if(j, "embed_dim", c.embed_dim);
  cfg_detail::get_to_if(j, "conv_channels", c.conv_channels);
  cfg_detail::get_to_if(j, "kernel_sizes", c.kernel_sizes);
  cfg_detail::get_to_if(j, "lstm_hidden", c.lstm_hidden);
  cfg_detail::get_to_if(j, "lstm_layers", c.lstm_layers);
  cfg_detail::get_to_if(j, "bn_momentum", c.bn_momentum);
  cfg_detail::get_to_if(j, "bn_eps", c.bn_eps);
  return c;
}

inline json baseline_config_to_json(const BaselineConfig& c) {
  return json{{"embed_dim", c.embed_dim},   {"conv_channels", c.conv_channels},
              {"kernel_sizes", c.kernel_sizes}, {"lstm_hidden", c.lstm_hidden},
              {"lstm_layers", c.lstm_layers},   {"bn_momentum", c.bn_momentum},
              {"bn_eps", c.bn_eps},             {"vocab_size", c.vocab_size},
              {"n_classes", c.n_classes}};
}

inline BaselineConfig baseline_config_from_snapshot(const json& j) {
  BaselineConfig c = baseline_config_from_json(j);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("n_classes").get_to(c.n_classes);
  return c;
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  cfg_detail::get_to_if(j, "model", c.model_kind);
  if (c.model_kind != "transformer" && c.model_kind != "baseline")
    throw std::runtime_error("config field 'model': expected transformer or baseline, got " +
                             c.model_kind);
  cfg_detail::get_to_if(j, "seed", c.seed);
  cfg_detail::get_to_if(j, "n_classes", c.n_classes);
  cfg_detail::get_to_if(j, "max_seq_len", c.max_seq_len);
  if (j.contains("vocab")) cfg_detail::get_to_if(j.at("vocab"), "min_count", c.vocab_min_count);
  if (j.contains("transformer"))
    c.transformer = transformer_config_from_json(j.at("transformer"), c.max_seq_len);
  else
    c.transformer.max_seq_len = c.max_seq_len;
  if (j.contains("baseline")) c.baseline = baseline_config_from_json(j.at("baseline"));
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    c.lr_explicit = o.contains("lr");
    cfg_detail::get_to_if(o, "lr", c.adam.lr);
    cfg_detail::get_to_if(o, "beta1", c.adam.beta1);
    cfg_detail::get_to_if(o, "beta2", c.adam.beta2);
    cfg_detail::get_to_if(o, "eps", c.adam.eps);
    cfg_detail::get_to_if(o, "grad_clip", c.adam.grad_clip);
  }
  cfg_detail::get_to_if(j, "epochs", c.epochs);
  cfg_detail::get_to_if(j, "batch_size", c.batch_size);
  cfg_detail::get_to_if(j, "patience", c.patience);
  cfg_detail::get_to_if(j, "init_transfer", c.init_transfer);
  if (c.init_transfer != "full" && c.init_transfer != "features")
    throw std::runtime_error("config field 'init_transfer': expected full or features, got " +
                             c.init_transfer);
  if (j.contains("masking")) {
    const json& m = j.at("masking");
    cfg_detail::get_to_if(m, "mask_rate", c.masking.mask_rate);
    cfg_detail::get_to_if(m, "replace_mask_frac", c.masking.replace_mask_frac);
    cfg_detail::get_to_if(m, "replace_random_frac", c.masking.replace_random_frac);
    cfg_detail::get_to_if(m, "keep_frac", c.masking.keep_frac);
    c.masking.validate();
  }
  return c;
}

inline SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  cfg_detail::get_to_if(j, "n_classes", s.n_classes);
  cfg_detail::get_to_if(j, "per_class", s.per_class);
  cfg_detail::get_to_if(j, "vocab_size", s.vocab_size);
  cfg_detail::get_to_if(j, "min_len", s.min_len);
  cfg_detail::get_to_if(j, "max_len", s.max_len);
  cfg_detail::get_to_if(j, "sig_len", s.sig_len);
  cfg_detail::get_to_if(j, "sigs_per_class", s.sigs_per_class);
  cfg_detail::get_to_if(j, "sigs_per_utterance", s.sigs_per_utterance);
  cfg_detail::get_to_if(j, "noise", s.noise);
  cfg_detail::get_to_if(j, "bg_class_skew", s.bg_class_skew);
  cfg_detail::get_to_if(j, "labeled", s.labeled);
  cfg_detail::get_to_if(j, "id_prefix", s.id_prefix);
  return s;
}

inline RebalanceTargets rebalance_targets_from_json(const json& j) {
  RebalanceTargets t;
  if (!j.contains("targets")) throw std::runtime_error("targets file: missing 'targets' object");
  for (const auto& [label, counts] : j.at("targets").items()) {
    std::array<std::size_t, 3> want{};
    want[0] = counts.at("train").get<std::size_t>();
    want[1] = counts.at("dev").get<std::size_t>();
    want[2] = counts.at("test").get<std::size_t>();
    t.counts[label] = want;
  }
  if (j.contains("rename"))
    for (const auto& [from, to] : j.at("rename").items()) t.rename[from] = to.get<std::string>();
  if (j.contains("exclude_ids"))
    for (const auto& id : j.at("exclude_ids")) t.exclude_ids.insert(id.get<std::string>());
  return t;
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces
// ---------------------------------------------------------------------------

inline void log_line(const std::string& stage, const std::string& message) {
  std::cerr << "[pslu] " << stage << " " << message << "\n";
}

inline std::vector<LabeledExample> encode_labeled(const std::vector<Utterance>& utterances,
                                                  const PhoneVocab& vocab, const LabelMap& labels,
                                                  std::size_t max_len) {
  std::vector<LabeledExample> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) {
    check_arg(u.label.has_value(), "utterance " + u.id + " has no label");
    LabeledExample ex;
    ex.ids = encode_utterance(u, vocab, max_len).ids;
    ex.label = labels.id_of(*u.label);
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<std::vector<int>> encode_unlabeled(const std::vector<Utterance>& utterances,
                                                      const PhoneVocab& vocab, std::size_t max_len) {
  std::vector<std::vector<int>> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back(encode_utterance(u, vocab, max_len).ids);
  return out;
}

inline json eval_report_to_json(const EvalReport& r, const std::vector<std::string>& label_names) {
  json classes = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    classes.push_back(json{{"label", c < label_names.size() ? label_names[c] : "class_" + std::to_string(c)},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"f1", m.f1}});
  }
  return json{{"classes", classes},
              {"macro_avg", json{{"precision", r.macro_precision},
                                 {"recall", r.macro_recall},
                                 {"f1", r.macro_f1}}},
              {"accuracy", r.accuracy},
              {"n", r.n}};
}

inline std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,dev_acc,dev_macro_f1\n";
  char buf[160];
  for (const auto& rec : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f\n", rec.epoch, rec.train_loss,
                  rec.dev_accuracy, rec.dev_macro_f1);
    out += buf;
  }
  return out;
}

inline std::string loss_curve_to_csv(const std::vector<std::pair<std::size_t, double>>& curve) {
  std::string out = "step,loss\n";
  char buf[96];
  for (const auto& [step, loss] : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f\n", step, loss);
    out += buf;
  }
  return out;
}

/// Copy checkpoint tensors into a freshly initialized model wherever name and
/// shape agree (the classifier head may legitimately differ when the class
/// count changed after pretraining). When `only` is nonempty the copy is
/// restricted to those names. Returns the skipped names.
template <typename ModelT>
std::vector<std::string> transfer_checkpoint_weights(const CheckpointData& data, ModelT& model,
                                                     const std::vector<std::string>& only = {}) {
  auto tensors = model.parameters();
  for (auto& st : model.state_tensors()) tensors.push_back(st);
  std::vector<std::string> skipped;
  for (auto& [name, t] : tensors) {
    const bool wanted =
        only.empty() || std::find(only.begin(), only.end(), name) != only.end();
    const NamedTensorData* src = nullptr;
    if (wanted)
      for (const auto& cand : data.tensors)
        if (cand.name == name && cand.shape == t.shape()) {
          src = &cand;
          break;
        }
    if (!src) {
      skipped.push_back(name);
      continue;
    }
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = src->values[i];
  }
  return skipped;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace cmd {

inline void prep(const std::string& in_path, const std::string& targets_path, std::uint64_t seed,
                 const std::string& out_dir) {
  auto utterances = load_corpus(in_path);
  auto targets = rebalance_targets_from_json(read_json_file(targets_path));
  std::size_t unlabeled = 0, unlisted = 0;
  for (const auto& u : utterances) {
    if (!u.label) {
      ++unlabeled;
    } else {
      std::string name = *u.label;
      auto it = targets.rename.find(name);
      if (it != targets.rename.end()) name = it->second;
      if (!targets.counts.count(name)) ++unlisted;
    }
  }
  if (unlabeled > 0) log_line("prep", "dropping " + std::to_string(unlabeled) + " unlabeled records");
  if (unlisted > 0)
    log_line("prep", "dropping " + std::to_string(unlisted) + " records with labels outside the target table");
  auto balanced = rebalance_splits(utterances, targets, seed);

  std::filesystem::create_directories(out_dir);
  std::array<std::vector<Utterance>, 3> by_split;
  for (const auto& u : balanced) by_split[static_cast<std::size_t>(u.split)].push_back(u);
  std::map<std::string, std::map<std::string, std::size_t>> tallies;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = split_name(static_cast<Split>(s));
    save_corpus(out_dir + "/" + name + ".tsv", by_split[s]);
    for (const auto& u : by_split[s]) ++tallies[*u.label][name];
  }
  json counts(tallies);
  LabelMap labels = LabelMap::from_utterances(balanced);
  write_text_file(out_dir + "/labels.json", json{{"labels", labels.names()}}.dump(2) + "\n");
  write_text_file(out_dir + "/counts.json", counts.dump(2) + "\n");
  log_line("prep", "wrote " + std::to_string(balanced.size()) + " utterances to " + out_dir);
}

inline void stats(const std::string& in_path, std::size_t top_k, const std::string& out_path) {
  auto utterances = load_corpus(in_path);
  CorpusStats st = corpus_stats(utterances, top_k);
  json hist = json::array();
  for (const auto& [len, count] : st.length_hist) hist.push_back(json::array({len, count}));
  json top = json::array();
  for (const auto& [tok, count] : st.top_phones) top.push_back(json::array({tok, count}));
  json out{{"phone_freq", st.phone_freq},
           {"length_hist", hist},
           {"mean_length", st.mean_length},
           {"label_counts", st.label_counts},
           {"top_phones", top},
           {"utterance_count", st.utterance_count},
           {"token_count", st.token_count}};
  write_text_file(out_path, out.dump(2) + "\n");
  log_line("stats", std::to_string(st.utterance_count) + " utterances, mean length " +
                        std::to_string(st.mean_length));
}

inline void synth(const std::string& spec_path, std::uint64_t seed, const std::string& out_path) {
  SynthSpec spec = synth_spec_from_json(read_json_file(spec_path));
  auto utterances = synthesize_corpus(spec, seed);
  save_corpus(out_path, utterances);
  log_line("synth", "wrote " + std::to_string(utterances.size()) + " utterances to " + out_path);
}

template <typename ModelT>
void pretrain_with(ModelT& model, const RunConfig& cfg, const PhoneVocab& vocab,
                   const std::vector<Utterance>& corpus, const json& snapshot,
                   const std::string& out_path) {
  auto encoded = encode_unlabeled(corpus, vocab, cfg.max_seq_len);
  PretrainResult result = pretrain(model, encoded, vocab, cfg.masking, cfg.train_options());
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
    log_line("pretrain", "epoch=" + std::to_string(e) + " mlm_loss=" + std::to_string(result.epoch_loss[e]));
  save_checkpoint(out_path, cfg.model_kind, snapshot, vocab, model);
  write_text_file(out_path + ".loss.csv", loss_curve_to_csv(result.loss_curve));
}

inline void pretrain_cmd(const RunConfig& cfg, const std::string& corpus_path,
                         const std::string& out_path) {
  auto corpus = load_corpus(corpus_path);
  PhoneVocab vocab = build_vocab(corpus, cfg.vocab_min_count);
  Rng init_rng = Rng::substream(cfg.seed, "init");
  log_line("pretrain", "model=" + cfg.model_kind + " vocab=" + std::to_string(vocab.size()) +
                           " corpus=" + std::to_string(corpus.size()));
  if (cfg.model_kind == "transformer") {
    TransformerConfig mc = cfg.transformer;
    mc.vocab_size = vocab.size();
    mc.n_classes = cfg.n_classes;
    auto model = EncoderModel<float>::init(mc, init_rng);
    json snapshot{{"model", "transformer"},
                  {"labels", json::array()},
                  {"transformer", transformer_config_to_json(mc)}};
    pretrain_with(model, cfg, vocab, corpus, snapshot, out_path);
  } else {
    BaselineConfig mc = cfg.baseline;
    mc.vocab_size = vocab.size();
    mc.n_classes = cfg.n_classes;
    auto model = BaselineModel<float>::init(mc, init_rng);
    json snapshot{{"model", "baseline"},
                  {"labels", json::array()},
                  {"baseline", baseline_config_to_json(mc)}};
    pretrain_with(model, cfg, vocab, corpus, snapshot, out_path);
  }
}

template <typename ModelT>
void finetune_with(ModelT& model, const RunConfig& cfg, const PhoneVocab& vocab,
                   const LabelMap& labels, const std::vector<Utterance>& train_utts,
                   const std::vector<Utterance>& dev_utts, const json& snapshot,
                   const std::string& out_path) {
  auto train_set = encode_labeled(train_utts, vocab, labels, cfg.max_seq_len);
  auto dev_set = encode_labeled(dev_utts, vocab, labels, cfg.max_seq_len);
  FinetuneResult result = finetune(model, train_set, dev_set, cfg.train_options());
  for (const auto& rec : result.history)
    log_line("finetune", "epoch=" + std::to_string(rec.epoch) + " train_loss=" +
                             std::to_string(rec.train_loss) + " dev_macro_f1=" +
                             std::to_string(rec.dev_macro_f1));
  log_line("finetune", "best epoch " + std::to_string(result.best_epoch) + " dev_macro_f1=" +
                           std::to_string(result.best_dev_macro_f1));
  save_checkpoint(out_path, cfg.model_kind, snapshot, vocab, model);
  write_text_file(out_path + ".history.csv", history_to_csv(result.history));
}

inline void finetune_cmd(RunConfig cfg, const std::string& train_path, const std::string& dev_path,
                         const std::optional<std::string>& init_ckpt, const std::string& out_path) {
  auto train_utts = load_corpus(train_path, Split::train);
  auto dev_utts = load_corpus(dev_path, Split::dev);
  LabelMap labels = LabelMap::from_utterances(train_utts);
  check_arg(labels.size() >= 2, "finetune: need at least 2 labels, found " +
                                    std::to_string(labels.size()));
  for (const auto& u : dev_utts)
    check_arg(u.label && labels.contains(*u.label),
              "finetune: dev utterance " + u.id + " has a label unseen in train");

  std::optional<CheckpointData> init;
  PhoneVocab vocab;
  if (init_ckpt) {
    init = load_checkpoint_data(*init_ckpt);
    check_arg(init->kind == cfg.model_kind, "finetune: checkpoint is " + init->kind +
                                                " but config requests " + cfg.model_kind);
    vocab = init->vocab;  // embeddings are tied to the pretraining vocab
  } else {
    vocab = build_vocab(train_utts, cfg.vocab_min_count);
  }

  Rng init_rng = Rng::substream(cfg.seed, "init");
  if (cfg.model_kind == "transformer") {
    TransformerConfig mc = init ? transformer_config_from_snapshot(init->config.at("transformer"))
                                : cfg.transformer;
    if (!init) {
      mc.vocab_size = vocab.size();
      mc.max_seq_len = cfg.max_seq_len;
    } else {
      cfg.max_seq_len = mc.max_seq_len;
    }
    mc.n_classes = labels.size();
    auto model = EncoderModel<float>::init(mc, init_rng);
    if (init) {
      auto only = cfg.init_transfer == "features" ? model.feature_tensor_names()
                                                  : std::vector<std::string>{};
      auto skipped = transfer_checkpoint_weights(*init, model, only);
      for (const auto& name : skipped) log_line("finetune", "fresh init for " + name);
    }
    json snapshot{{"model", "transformer"},
                  {"labels", labels.names()},
                  {"transformer", transformer_config_to_json(mc)}};
    finetune_with(model, cfg, vocab, labels, train_utts, dev_utts, snapshot, out_path);
  } else {
    BaselineConfig mc = init ? baseline_config_from_snapshot(init->config.at("baseline"))
                             : cfg.baseline;
    if (!init) mc.vocab_size = vocab.size();
    mc.n_classes = labels.size();
    auto model = BaselineModel<float>::init(mc, init_rng);
    if (init) {
      auto only = cfg.init_transfer == "features" ? model.feature_tensor_names()
                                                  : std::vector<std::string>{};
      auto skipped = transfer_checkpoint_weights(*init, model, only);
      for (const auto& name : skipped) log_line("finetune", "fresh init for " + name);
    }
    json snapshot{{"model", "baseline"},
                  {"labels", labels.names()},
                  {"baseline", baseline_config_to_json(mc)}};
    finetune_with(model, cfg, vocab, labels, train_utts, dev_utts, snapshot, out_path);
  }
}

struct LoadedModel {
  CheckpointData data;
  std::vector<std::string> label_names;
  std::size_t max_seq_len = 128;
  std::optional<EncoderModel<float>> transformer;
  std::optional<BaselineModel<float>> baseline;

  std::vector<int> predict_ids(const std::vector<std::vector<int>>& sequences) {
    return transformer ? pslu::predict(*transformer, sequences) : pslu::predict(*baseline, sequences);
  }
};

inline LoadedModel load_model(const std::string& ckpt_path) {
  LoadedModel lm{load_checkpoint_data(ckpt_path), {}, 128, std::nullopt, std::nullopt};
  lm.data.config.at("labels").get_to(lm.label_names);
  Rng dummy(0);
  if (lm.data.kind == "transformer") {
    TransformerConfig mc = transformer_config_from_snapshot(lm.data.config.at("transformer"));
    lm.max_seq_len = mc.max_seq_len;
    lm.transformer = EncoderModel<float>::init(mc, dummy);
    fill_model_from(lm.data, *lm.transformer);
  } else if (lm.data.kind == "baseline") {
    BaselineConfig mc = baseline_config_from_snapshot(lm.data.config.at("baseline"));
    lm.baseline = BaselineModel<float>::init(mc, dummy);
    fill_model_from(lm.data, *lm.baseline);
  } else {
    throw std::runtime_error(ckpt_path + ": unknown model kind " + lm.data.kind);
  }
  return lm;
}

inline void eval_cmd(const std::string& ckpt_path, const std::string& test_path,
                     const std::string& out_path) {
  LoadedModel lm = load_model(ckpt_path);
  check_arg(!lm.label_names.empty(), "eval: checkpoint has no label map (pretraining checkpoint?)");
  LabelMap labels = LabelMap::from_names(lm.label_names);
  auto test_utts = load_corpus(test_path, Split::test);
  std::vector<std::vector<int>> sequences;
  std::vector<int> golds;
  for (const auto& u : test_utts) {
    check_arg(u.label.has_value(), "eval: utterance " + u.id + " has no label");
    sequences.push_back(encode_utterance(u, lm.data.vocab, lm.max_seq_len).ids);
    golds.push_back(labels.id_of(*u.label));
  }
  std::vector<int> preds = lm.predict_ids(sequences);
  EvalReport report = evaluate(preds, golds, labels.size());
  write_text_file(out_path, eval_report_to_json(report, labels.names()).dump(2) + "\n");
  log_line("eval", "n=" + std::to_string(report.n) + " accuracy=" + std::to_string(report.accuracy) +
                       " macro_f1=" + std::to_string(report.macro_f1));
}

inline void predict_cmd(const std::string& ckpt_path, const std::string& in_path,
                        const std::string& out_path) {
  LoadedModel lm = load_model(ckpt_path);
  check_arg(!lm.label_names.empty(), "predict: checkpoint has no label map");
  auto utts = load_corpus(in_path);
  std::vector<std::vector<int>> sequences;
  for (const auto& u : utts) sequences.push_back(encode_utterance(u, lm.data.vocab, lm.max_seq_len).ids);
  std::vector<int> preds = lm.predict_ids(sequences);
  std::string out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    out += utts[i].id;
    out += '\t';
    out += lm.label_names[static_cast<std::size_t>(preds[i])];
    out += '\n';
  }
  write_text_file(out_path, out);
  log_line("predict", "wrote " + std::to_string(preds.size()) + " predictions to " + out_path);
}

}  // namespace cmd

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse argv-style arguments (without the program name) and run one
/// subcommand. Declared outputs are removed if the command fails partway.
inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"phone-level spoken language understanding toolkit"};
  app.require_subcommand(1);

  std::string in_path, out_path, targets_path, spec_path, config_path, corpus_path;
  std::string train_path, dev_path, test_path, ckpt_path, init_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t top_k = 20;
  std::string model_override;
  std::int64_t epochs_override = -1, batch_override = -1;
  double lr_override = -1.0;

  auto* prep = app.add_subcommand("prep", "rebalance labeled splits to a target table");
  prep->add_option("--in", in_path, "input corpus TSV")->required();
  prep->add_option("--targets", targets_path, "per-label per-split target counts JSON")->required();
  prep->add_option("--seed", seed, "sampling seed");
  prep->add_option("--out", out_path, "output directory")->required();

  auto* stats = app.add_subcommand("stats", "corpus statistics as JSON");
  stats->add_option("--in", in_path, "input corpus TSV")->required();
  stats->add_option("--top-k", top_k, "top phone count");
  stats->add_option("--out", out_path, "output JSON path")->required();

  auto* synth = app.add_subcommand("synth", "generate a synthetic phone corpus");
  synth->add_option("--spec", spec_path, "synthesis spec JSON")->required();
  synth->add_option("--seed", seed, "generation seed");
  synth->add_option("--out", out_path, "output corpus TSV")->required();

  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config JSON")->required();
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { seed = v; seed_set = true; }, "seed override");
    sub->add_option("--model", model_override, "model kind override (transformer|baseline)");
    sub->add_option("--epochs", epochs_override, "epoch count override");
    sub->add_option("--batch-size", batch_override, "batch size override");
    sub->add_option("--lr", lr_override, "learning rate override");
  };

  auto* pretrain = app.add_subcommand("pretrain", "masked-phone-model pretraining");
  add_train_flags(pretrain);
  pretrain->add_option("--corpus", corpus_path, "unlabeled corpus TSV")->required();
  pretrain->add_option("--out", out_path, "output checkpoint path")->required();

  std::string transfer_override;
  auto* finetune = app.add_subcommand("finetune", "intent-classification fine-tuning");
  add_train_flags(finetune);
  finetune->add_option("--train", train_path, "train split TSV")->required();
  finetune->add_option("--dev", dev_path, "dev split TSV")->required();
  finetune->add_option("--init", init_path, "initial checkpoint (pretrained weights)");
  finetune->add_option("--init-transfer", transfer_override,
                       "which tensors to take from --init (full|features)");
  finetune->add_option("--out", out_path, "output checkpoint path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labeled test set");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--test", test_path, "test split TSV")->required();
  eval->add_option("--out", out_path, "output report JSON")->required();

  auto* predict = app.add_subcommand("predict", "write predicted labels for a corpus");
  predict->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  predict->add_option("--in", in_path, "input corpus TSV")->required();
  predict->add_option("--out", out_path, "output predictions TSV")->required();

  std::vector<const char*> argv;
  argv.push_back("pslu");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  // Outputs to roll back if the command fails partway.
  std::vector<std::string> declared;
  if (prep->parsed())
    declared = {out_path + "/train.tsv", out_path + "/dev.tsv", out_path + "/test.tsv",
                out_path + "/labels.json", out_path + "/counts.json"};
  else if (pretrain->parsed())
    declared = {out_path, out_path + ".loss.csv"};
  else if (finetune->parsed())
    declared = {out_path, out_path + ".history.csv"};
  else if (!out_path.empty())
    declared = {out_path};

  try {
    if (prep->parsed()) {
      cmd::prep(in_path, targets_path, seed, out_path);
    } else if (stats->parsed()) {
      cmd::stats(in_path, top_k, out_path);
    } else if (synth->parsed()) {
      cmd::synth(spec_path, seed, out_path);
    } else if (eval->parsed()) {
      cmd::eval_cmd(ckpt_path, test_path, out_path);
    } else if (predict->parsed()) {
      cmd::predict_cmd(ckpt_path, in_path, out_path);
    } else {
      RunConfig cfg = run_config_from_json(read_json_file(config_path));
      if (seed_set) cfg.seed = seed;
      if (!model_override.empty()) {
        if (model_override != "transformer" && model_override != "baseline")
          throw std::runtime_error("--model: expected transformer or baseline, got " + model_override);
        cfg.model_kind = model_override;
      }
      if (epochs_override >= 0) cfg.epochs = static_cast<std::size_t>(epochs_override);
      if (batch_override > 0) cfg.batch_size = static_cast<std::size_t>(batch_override);
      if (lr_override > 0.0) {
        cfg.adam.lr = lr_override;
        cfg.lr_explicit = true;
      }
      if (!transfer_override.empty()) {
        if (transfer_override != "full" && transfer_override != "features")
          throw std::runtime_error("--init-transfer: expected full or features, got " +
                                   transfer_override);
        cfg.init_transfer = transfer_override;
      }
      if (pretrain->parsed()) {
        cmd::pretrain_cmd(cfg, corpus_path, out_path);
      } else if (finetune->parsed()) {
        cmd::finetune_cmd(cfg, train_path, dev_path,
                          init_path.empty() ? std::nullopt : std::make_optional(init_path), out_path);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "[pslu] error: " << e.what() << "\n";
    for (const auto& path : declared) {
      std::error_code ec;
      std::filesystem::remove(path, ec);
    }
    return 1;
  }
  return 0;
}

}  // namespace pslu
