#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pslu/rng.hpp"
#include "pslu/tensor.hpp"

namespace pslu {

enum class Split { train = 0, dev = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split name: " + name);
}

/// One phone-transcribed example. The label is the intent annotation as it
/// appears in the corpus file; LabelMap resolves it to a class id.
struct Utterance {
  std::string id;
  std::vector<std::string> phones;
  std::optional<std::string> label;
  Split split = Split::train;
};

// ---------------------------------------------------------------------------
// PhoneVocab
// ---------------------------------------------------------------------------

/// Bijection between phone strings and ids. Ids 0..3 are reserved:
/// PAD=0, UNK=1, CLS=2, MASK=3; real phones start at 4.
class PhoneVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecials = 4;

  PhoneVocab() = default;

  int add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    int id = static_cast<int>(kNumSpecials + tokens_.size());
    tokens_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
  }

  /// Id for a token, UNK when out of vocabulary.
  int id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

  const std::string& token_of(int id) const {
    static const std::array<std::string, 4> specials = {"<pad>", "<unk>", "<cls>", "<mask>"};
    check_arg(id >= 0 && static_cast<std::size_t>(id) < size(), "vocab: id " + std::to_string(id) + " out of range");
    if (id < kNumSpecials) return specials[static_cast<std::size_t>(id)];
    return tokens_[static_cast<std::size_t>(id - kNumSpecials)];
  }

  /// Total id count including the four specials.
  std::size_t size() const { return kNumSpecials + tokens_.size(); }

  /// Serialized form: header documenting the id offset, then one token per
  /// line; line k holds the token with id k + 4.
  std::string to_text() const {
    std::string out = "#pslu-vocab v1 specials=4 PAD,UNK,CLS,MASK\n";
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  static PhoneVocab from_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    check_arg(static_cast<bool>(std::getline(in, line)), "vocab: empty input");
    check_arg(line.rfind("#pslu-vocab v1", 0) == 0, "vocab: bad header line: " + line);
    PhoneVocab v;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      check_arg(!v.contains(line), "vocab: duplicate token " + line);
      v.add(line);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> token_to_id_;
};

// ---------------------------------------------------------------------------
// LabelMap
// ---------------------------------------------------------------------------

/// Intent-name -> contiguous class id, ids assigned in sorted name order.
class LabelMap {
 public:
  LabelMap() = default;

  static LabelMap from_utterances(const std::vector<Utterance>& utterances) {
    std::set<std::string> names;
    for (const auto& u : utterances)
      if (u.label) names.insert(*u.label);
    LabelMap m;
    for (const auto& n : names) {
      m.id_of_[n] = static_cast<int>(m.names_.size());
      m.names_.push_back(n);
    }
    return m;
  }

  static LabelMap from_names(std::vector<std::string> names) {
    LabelMap m;
    for (auto& n : names) {
      check_arg(!m.id_of_.count(n), "label map: duplicate label " + n);
      m.id_of_[n] = static_cast<int>(m.names_.size());
      m.names_.push_back(std::move(n));
    }
    return m;
  }

  int id_of(const std::string& name) const {
    auto it = id_of_.find(name);
    check_arg(it != id_of_.end(), "label map: unknown label " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return id_of_.count(name) > 0; }
  const std::string& name_of(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::map<std::string, int> id_of_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Corpus file I/O
// ---------------------------------------------------------------------------
//
// Format: UTF-8, one record per line, tab-separated
//   id<TAB>label<TAB>phones
// with phones space-separated and label `-` for unlabeled LM data.
// An optional fourth field names the split (train/dev/test) for files that
// mix splits (the prep subcommand's input); otherwise records default to the
// split passed by the caller.

inline std::vector<std::string> split_on_spaces(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::vector<Utterance> parse_corpus(std::istream& in, const std::string& origin,
                                           Split default_split = Split::train) {
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(origin + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 3 && fields.size() != 4) fail("expected 3 or 4 tab-separated fields, got " + std::to_string(fields.size()));
    Utterance u;
    u.id = fields[0];
    if (u.id.empty()) fail("empty id field");
    if (fields[1] != "-") {
      if (fields[1].empty()) fail("empty label field (use - for unlabeled)");
      u.label = fields[1];
    }
    u.phones = split_on_spaces(fields[2]);
    if (u.phones.empty()) fail("empty phone field");
    if (fields.size() == 4) {
      try {
        u.split = split_from_name(fields[3]);
      } catch (const std::exception&) {
        fail("bad split field: " + fields[3]);
      }
    } else {
      u.split = default_split;
    }
    out.push_back(std::move(u));
  }
  if (out.empty()) throw std::runtime_error(origin + ": no records");
  return out;
}

inline std::vector<Utterance> load_corpus(const std::string& path, Split default_split = Split::train) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  return parse_corpus(in, path, default_split);
}

inline std::string corpus_to_text(const std::vector<Utterance>& utterances, bool with_split = false) {
  std::string out;
  for (const auto& u : utterances) {
    out += u.id;
    out += '\t';
    out += u.label ? *u.label : "-";
    out += '\t';
    for (std::size_t i = 0; i < u.phones.size(); ++i) {
      if (i) out += ' ';
      out += u.phones[i];
    }
    if (with_split) {
      out += '\t';
      out += split_name(u.split);
    }
    out += '\n';
  }
  return out;
}

inline void save_corpus(const std::string& path, const std::vector<Utterance>& utterances,
                        bool with_split = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  out << corpus_to_text(utterances, with_split);
  if (!out) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Vocabulary construction and encoding
// ---------------------------------------------------------------------------

/// Tokens with frequency >= min_count get ids in descending-frequency order
/// (ties broken by token string); rarer tokens encode as UNK.
inline PhoneVocab build_vocab(const std::vector<Utterance>& utterances, std::size_t min_count = 1) {
  check_arg(!utterances.empty(), "build_vocab: no utterances");
  std::map<std::string, std::size_t> freq;
  for (const auto& u : utterances)
    for (const auto& p : u.phones) ++freq[p];
  std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  PhoneVocab v;
  for (const auto& [tok, n] : entries)
    if (n >= min_count) v.add(tok);
  return v;
}

struct EncodedUtterance {
  std::vector<int> ids;        // [CLS] + phone ids, truncated to max_len
  PadMask pad_mask;            // parallel to ids; all zero unless padded
};

inline EncodedUtterance encode_utterance(const Utterance& u, const PhoneVocab& vocab,
                                         std::size_t max_len, bool pad_to_max = false) {
  check_arg(max_len >= 2, "encode_utterance: max_len must be at least 2");
  EncodedUtterance e;
  e.ids.push_back(PhoneVocab::kCls);
  for (const auto& p : u.phones) {
    if (e.ids.size() >= max_len) break;
    e.ids.push_back(vocab.id_of(p));
  }
  e.pad_mask.assign(e.ids.size(), 0);
  if (pad_to_max)
    while (e.ids.size() < max_len) {
      e.ids.push_back(PhoneVocab::kPad);
      e.pad_mask.push_back(1);
    }
  return e;
}

/// Inverse of encode for in-vocabulary tokens; PAD/CLS/MASK are skipped.
inline std::vector<std::string> decode_ids(const std::vector<int>& ids, const PhoneVocab& vocab) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == PhoneVocab::kPad || id == PhoneVocab::kCls || id == PhoneVocab::kMask) continue;
    out.push_back(vocab.token_of(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split rebalancing
// ---------------------------------------------------------------------------

/// Per-label per-split target counts, plus the cleanup knobs the corpus
/// preparation recipe needs: id exclusions and label renames applied before
/// balancing.
struct RebalanceTargets {
  std::map<std::string, std::array<std::size_t, 3>> counts;  // label -> {train, dev, test}
  std::map<std::string, std::string> rename;
  std::set<std::string> exclude_ids;
};

/// Reshape per-label split counts to the targets. Utterances keep their
/// original split where possible, surpluses shift to deficient splits, and
/// any remaining shortfall is filled by duplicating examples already in that
/// split. Deterministic under seed; labels missing from the input are an
/// error, labels missing from the target table are dropped.
inline std::vector<Utterance> rebalance_splits(const std::vector<Utterance>& input,
                                               const RebalanceTargets& targets, std::uint64_t seed) {
  std::vector<Utterance> pool;
  pool.reserve(input.size());
  for (const auto& u : input) {
    if (targets.exclude_ids.count(u.id)) continue;
    Utterance v = u;
    if (v.label) {
      auto it = targets.rename.find(*v.label);
      if (it != targets.rename.end()) v.label = it->second;
    }
    pool.push_back(std::move(v));
  }

  std::vector<Utterance> out;
  std::uint64_t label_index = 0;
  for (const auto& [label, want] : targets.counts) {
    Rng rng = Rng::substream(seed, "rebalance", label_index++);

    std::array<std::vector<const Utterance*>, 3> by_split;
    for (const auto& u : pool)
      if (u.label && *u.label == label) by_split[static_cast<std::size_t>(u.split)].push_back(&u);
    std::size_t total = by_split[0].size() + by_split[1].size() + by_split[2].size();
    if (total == 0) throw std::runtime_error("rebalance: no utterances with label " + label);

    std::array<std::vector<const Utterance*>, 3> chosen;
    std::vector<const Utterance*> surplus;
    // Keep in place first.
    for (std::size_t s = 0; s < 3; ++s) {
      auto candidates = by_split[s];
      rng.shuffle(candidates);
      const std::size_t keep = std::min(want[s], candidates.size());
      chosen[s].assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));
      surplus.insert(surplus.end(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end());
    }
    // Shift surplus into deficient splits.
    rng.shuffle(surplus);
    for (std::size_t s = 0; s < 3; ++s)
      while (chosen[s].size() < want[s] && !surplus.empty()) {
        chosen[s].push_back(surplus.back());
        surplus.pop_back();
      }
    // Upsample within the split.
    for (std::size_t s = 0; s < 3; ++s) {
      if (chosen[s].size() < want[s] && chosen[s].empty())
        throw std::runtime_error("rebalance: cannot reach " + std::to_string(want[s]) + " " +
                                 split_name(static_cast<Split>(s)) + " examples for label " + label);
      const std::size_t base = chosen[s].size();
      while (chosen[s].size() < want[s]) chosen[s].push_back(chosen[s][rng.uniform_below(base)]);
    }
    for (std::size_t s = 0; s < 3; ++s)
      for (const Utterance* u : chosen[s]) {
        Utterance v = *u;
        v.split = static_cast<Split>(s);
        out.push_back(std::move(v));
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

struct CorpusStats {
  std::map<std::string, std::size_t> phone_freq;
  std::vector<std::pair<std::string, std::size_t>> top_phones;  // by count desc
  std::map<std::size_t, std::size_t> length_hist;               // length -> count
  double mean_length = 0.0;
  std::map<std::string, std::size_t> label_counts;
  std::size_t utterance_count = 0;
  std::size_t token_count = 0;
};

inline CorpusStats corpus_stats(const std::vector<Utterance>& utterances, std::size_t top_k = 20) {
  check_arg(!utterances.empty(), "corpus_stats: no utterances");
  CorpusStats st;
  st.utterance_count = utterances.size();
  for (const auto& u : utterances) {
    for (const auto& p : u.phones) ++st.phone_freq[p];
    st.token_count += u.phones.size();
    ++st.length_hist[u.phones.size()];
    if (u.label) ++st.label_counts[*u.label];
  }
  st.mean_length = static_cast<double>(st.token_count) / static_cast<double>(st.utterance_count);
  std::vector<std::pair<std::string, std::size_t>> entries(st.phone_freq.begin(), st.phone_freq.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (entries.size() > top_k) entries.resize(top_k);
  st.top_phones = std::move(entries);
  return st;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

/// Knobs for the synthetic intent corpus. Each class owns a family of
/// signature n-grams drawn from phones reserved for that class; background
/// phones come from the rest of the inventory. Every utterance embeds
/// `sigs_per_utterance` of its class's signatures, so corpora with several
/// signatures per class tie them together for masked-phone pretraining. At
/// noise 0 the signatures are intact and a substring matcher recovers the
/// label exactly.
struct SynthSpec {
  std::size_t n_classes = 4;
  std::size_t per_class = 16;
  std::size_t vocab_size = 30;
  std::size_t min_len = 8;
  std::size_t max_len = 24;
  std::size_t sig_len = 3;
  std::size_t sigs_per_class = 1;
  std::size_t sigs_per_utterance = 1;
  double noise = 0.0;          // probability each signature phone is corrupted
  double bg_class_skew = 0.0;  // fraction of background drawn from a class-preferred subset
  bool labeled = true;
  std::string id_prefix = "synth";

  std::size_t reserved_tokens() const { return n_classes * sigs_per_class * sig_len; }
};

/// Deterministic phone inventory used by the synthesizer: common IPA symbols
/// first, numbered extensions beyond.
inline std::vector<std::string> synth_phone_inventory(std::size_t n) {
  static const std::vector<std::string> base = {
      "a", "i", "u", "e", "o", "ə", "n", "m", "k", "t",  "p", "s",  "l",  "r", "j", "w", "h", "b",
      "d", "g", "f", "v", "z", "ʃ", "ʒ", "ŋ", "θ", "ð",  "ɛ", "ɔ",  "æ",  "ʌ", "ʊ", "ɪ", "y", "x",
      "q", "c", "ɑ", "ø"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(i < base.size() ? base[i] : "p" + std::to_string(i));
  return out;
}

/// The k-th signature n-gram of one class: a reserved slice of the inventory.
inline std::vector<std::string> synth_signature(const SynthSpec& spec, std::size_t cls,
                                                std::size_t which = 0) {
  auto inv = synth_phone_inventory(spec.vocab_size);
  check_arg(cls < spec.n_classes, "synth_signature: class out of range");
  check_arg(which < spec.sigs_per_class, "synth_signature: signature index out of range");
  std::vector<std::string> sig;
  const std::size_t base = (cls * spec.sigs_per_class + which) * spec.sig_len;
  for (std::size_t k = 0; k < spec.sig_len; ++k) sig.push_back(inv.at(base + k));
  return sig;
}

inline std::string synth_label_name(std::size_t cls) { return "intent" + std::to_string(cls); }

inline std::vector<Utterance> synthesize_corpus(const SynthSpec& spec, std::uint64_t seed) {
  check_arg(spec.n_classes > 0 && spec.per_class > 0 && spec.sig_len > 0 &&
                spec.sigs_per_class > 0 && spec.sigs_per_utterance > 0,
            "synth: extents must be positive");
  check_arg(spec.sigs_per_utterance <= spec.sigs_per_class,
            "synth: more signatures per utterance than the class owns");
  check_arg(spec.min_len >= spec.sigs_per_utterance * spec.sig_len + 1 &&
                spec.max_len >= spec.min_len,
            "synth: length range incompatible with signature length");
  check_arg(spec.vocab_size > spec.reserved_tokens(),
            "synth: vocab too small for reserved signatures");
  check_arg(spec.bg_class_skew >= 0.0 && spec.bg_class_skew < 1.0, "synth: skew outside [0, 1)");
  auto inv = synth_phone_inventory(spec.vocab_size);
  const std::size_t reserved = spec.reserved_tokens();
  const std::size_t n_bg = spec.vocab_size - reserved;
  check_arg(spec.bg_class_skew == 0.0 || n_bg >= spec.n_classes,
            "synth: class-skewed background needs at least one token per class");
  Rng rng = Rng::substream(seed, "synth");

  std::vector<Utterance> out;
  std::size_t serial = 0;
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
    // Background tokens j with j mod n_classes == cls are this class's
    // preferred subset; skew shifts mass toward them, giving the corpus a
    // topic-like long-range regularity.
    std::vector<std::size_t> preferred;
    for (std::size_t j = 0; j < n_bg; ++j)
      if (j % spec.n_classes == cls) preferred.push_back(j);
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      const std::size_t len = spec.min_len + rng.uniform_below(spec.max_len - spec.min_len + 1);
      std::vector<std::string> phones(len);
      for (auto& p : phones) {
        const bool from_preferred = spec.bg_class_skew > 0.0 && rng.uniform() < spec.bg_class_skew;
        const std::size_t j =
            from_preferred ? preferred[rng.uniform_below(preferred.size())] : rng.uniform_below(n_bg);
        p = inv[reserved + j];
      }
      // One signature per segment keeps placements from overlapping.
      const std::size_t segment = len / spec.sigs_per_utterance;
      for (std::size_t s = 0; s < spec.sigs_per_utterance; ++s) {
        auto sig = synth_signature(spec, cls, rng.uniform_below(spec.sigs_per_class));
        const std::size_t seg_start = s * segment;
        const std::size_t seg_len = s + 1 == spec.sigs_per_utterance ? len - seg_start : segment;
        const std::size_t pos = seg_start + rng.uniform_below(seg_len - spec.sig_len + 1);
        for (std::size_t t = 0; t < spec.sig_len; ++t) {
          bool corrupt = spec.noise > 0.0 && rng.uniform() < spec.noise;
          phones[pos + t] = corrupt ? inv[reserved + rng.uniform_below(n_bg)] : sig[t];
        }
      }
      Utterance u;
      u.id = spec.id_prefix + "-" + std::to_string(serial++);
      u.phones = std::move(phones);
      if (spec.labeled) u.label = synth_label_name(cls);
      out.push_back(std::move(u));
    }
  }
  // Interleave classes so file order carries no label signal.
  Rng order_rng = Rng::substream(seed, "synth-order");
  order_rng.shuffle(out);
  return out;
}

}  // namespace pslu
