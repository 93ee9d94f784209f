#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pslu/baseline.hpp"
#include "pslu/data.hpp"
#include "pslu/tensor.hpp"
#include "pslu/transformer.hpp"

namespace pslu {

// Checkpoint layout (all integers and floats little-endian):
//   magic "PSLU1"
//   u32 format version (1)
//   u32 kind length, kind bytes            ("transformer" | "baseline")
//   u64 config length, config JSON bytes   (enough to rebuild the model)
//   u64 vocab length, vocab text bytes
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u32 ndim, u64 dims..., f32 data
// Parameters come first, then state tensors (BN running statistics).

inline constexpr char kCheckpointMagic[5] = {'P', 'S', 'L', 'U', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename T>
void write_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

  template <typename T>
  T read_le() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string read_bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }

  void need(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw std::runtime_error(origin_ + ": truncated checkpoint, needed " + std::to_string(n) +
                               " bytes at offset " + std::to_string(pos_) + " of " +
                               std::to_string(buf_.size()));
  }

 private:
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline void append_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d = 0; d < t.rank(); ++d) write_le<std::uint64_t>(out, t.extent(d));
  for (float v : t.values()) write_le<float>(out, v);
}

}  // namespace ckpt_detail

struct NamedTensorData {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::string kind;
  nlohmann::json config;
  PhoneVocab vocab;
  std::vector<NamedTensorData> tensors;

  const NamedTensorData& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("checkpoint: missing tensor " + name);
  }
};

inline std::string serialize_checkpoint(const std::string& kind, const nlohmann::json& config,
                                        const PhoneVocab& vocab,
                                        const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  ckpt_detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  ckpt_detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(kind.size()));
  out += kind;
  const std::string config_text = config.dump();
  ckpt_detail::write_le<std::uint64_t>(out, config_text.size());
  out += config_text;
  const std::string vocab_text = vocab.to_text();
  ckpt_detail::write_le<std::uint64_t>(out, vocab_text.size());
  out += vocab_text;
  ckpt_detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) ckpt_detail::append_tensor(out, name, t);
  return out;
}

inline CheckpointData parse_checkpoint(const std::string& buf, const std::string& origin) {
  ckpt_detail::Reader r(buf, origin);
  const std::string magic = r.read_bytes(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw std::runtime_error(origin + ": bad magic at offset 0, not a checkpoint");
  const auto version = r.read_le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error(origin + ": unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.kind = r.read_bytes(r.read_le<std::uint32_t>());
  const auto config_len = r.read_le<std::uint64_t>();
  data.config = nlohmann::json::parse(r.read_bytes(config_len));
  const auto vocab_len = r.read_le<std::uint64_t>();
  data.vocab = PhoneVocab::from_text(r.read_bytes(vocab_len));
  const auto n_tensors = r.read_le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensorData t;
    t.name = r.read_bytes(r.read_le<std::uint32_t>());
    const auto ndim = r.read_le<std::uint32_t>();
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.read_le<std::uint64_t>()));
      numel *= t.shape.back();
    }
    t.values.resize(numel);
    for (auto& v : t.values) v = r.read_le<float>();
    data.tensors.push_back(std::move(t));
  }
  return data;
}

template <typename ModelT>
void save_checkpoint(const std::string& path, const std::string& kind, const nlohmann::json& config,
                     const PhoneVocab& vocab, const ModelT& model) {
  auto tensors = model.parameters();
  for (auto& st : model.state_tensors()) tensors.push_back(st);
  const std::string buf = serialize_checkpoint(kind, config, vocab, tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint_data(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(buf, path);
}

/// Overwrite a model's tensors from checkpoint data; every named tensor must
/// be present with a matching shape.
template <typename ModelT>
void fill_model_from(const CheckpointData& data, ModelT& model) {
  auto tensors = model.parameters();
  for (auto& st : model.state_tensors()) tensors.push_back(st);
  for (auto& [name, t] : tensors) {
    const NamedTensorData& src = data.find(name);
    check_arg(src.shape == t.shape(), "checkpoint: tensor " + name + " has shape " +
                                          shape_str(src.shape) + ", model expects " +
                                          shape_str(t.shape()));
    for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = src.values[i];
  }
}

}  // namespace pslu
