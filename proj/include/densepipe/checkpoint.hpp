#pragma once

// Checkpoint file layout (all integers little-endian):
//   "PDTL" | u32 version | u32 config length + UTF-8 config text
//   | u32 tensor count | tensors | [0x4F optimizer section] | 0x00
// tensor: u16 name length + UTF-8 name | u8 rank | u32 extent * rank
//         | u8 dtype (0x01 = IEEE-754 binary64) | raw values
// optimizer section: u8 kind | u64 step | u32 tensor count | tensors
//         (names prefixed "m:" for first moments, "v:" for second moments)

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/kv.hpp"
#include "densepipe/model.hpp"
#include "densepipe/optim.hpp"

namespace densepipe {

inline constexpr char kCheckpointMagic[4] = {'P', 'D', 'T', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0x01;
inline constexpr std::uint8_t kOptimizerTag = 0x4F;
inline constexpr std::uint8_t kTerminator = 0x00;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> classes;  // class names by index, when known
  bool equalize = true;              // preprocessing the weights were trained with
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::optional<OptimizerState> optimizer;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline Checkpoint make_checkpoint(const ModelGraph& m, const CheckpointMeta& meta = {},
                                  const OptimizerState* optimizer = nullptr) {
  Checkpoint ck;
  ck.config_text = to_text(m.config);
  ck.config_text += "model_kind = " + to_string(m.kind) + "\n";
  ck.config_text += "meta_seed = " + std::to_string(meta.seed) + "\n";
  ck.config_text += "meta_epoch = " + std::to_string(meta.epoch) + "\n";
  if (!std::isnan(meta.val_loss)) ck.config_text += "meta_val_loss = " + kv::format_double(meta.val_loss) + "\n";
  if (!meta.classes.empty()) {
    std::string joined;
    for (const std::string& c : meta.classes) joined += (joined.empty() ? "" : ",") + c;
    ck.config_text += "meta_classes = " + joined + "\n";
  }
  ck.config_text += std::string("meta_equalize = ") + (meta.equalize ? "true" : "false") + "\n";
  for (const auto& [name, t] : m.graph.params) ck.tensors.emplace_back(name, t);
  for (const auto& [name, t] : m.graph.buffers) ck.tensors.emplace_back(name, t);
  if (optimizer) ck.optimizer = *optimizer;
  return ck;
}

struct ParsedCheckpointConfig {
  DenseNetConfig config;
  ModelKind kind = ModelKind::dense;
  CheckpointMeta meta;
};

inline ParsedCheckpointConfig parse_checkpoint_config(const std::string& text) {
  ParsedCheckpointConfig p;
  for (const auto& [key, value] : kv::parse(text, "checkpoint config")) {
    if (apply_model_key(p.config, key, value)) continue;
    if (key == "model_kind") p.kind = parse_model_kind(value);
    else if (key == "meta_seed") p.meta.seed = kv::to_int<std::uint64_t>(key, value);
    else if (key == "meta_epoch") p.meta.epoch = kv::to_int<std::size_t>(key, value);
    else if (key == "meta_val_loss") p.meta.val_loss = kv::to_double(key, value);
    else if (key == "meta_equalize") p.meta.equalize = kv::to_bool(key, value);
    else if (key == "meta_classes") {
      p.meta.classes.clear();
      std::string_view rest = value;
      while (true) {
        const auto comma = rest.find(',');
        p.meta.classes.emplace_back(kv::trim(rest.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
      }
    }
    else throw CheckpointMismatchError("unknown key '" + key + "' in checkpoint config");
  }
  return p;
}

/// Copies checkpoint tensors into `m`; every parameter and buffer must be
/// present with the right shape and no tensor may be left over.
inline void load_weights(ModelGraph& m, const Checkpoint& ck) {
  std::size_t matched = 0;
  const auto fill = [&](std::map<std::string, Tensor>& table) {
    for (auto& [name, t] : table) {
      const Tensor* src = ck.find(name);
      if (!src) throw CheckpointMismatchError("checkpoint lacks tensor '" + name + "'");
      if (src->shape() != t.shape()) {
        throw CheckpointMismatchError("tensor '" + name + "' has shape " + shape_string(src->shape()) +
                                      ", model expects " + shape_string(t.shape()));
      }
      t = *src;
      ++matched;
    }
  };
  fill(m.graph.params);
  fill(m.graph.buffers);
  if (matched != ck.tensors.size()) throw CheckpointMismatchError("checkpoint holds tensors the model does not know");
}

inline ModelGraph restore_model(const Checkpoint& ck) {
  const ParsedCheckpointConfig p = parse_checkpoint_config(ck.config_text);
  ModelGraph m = build_model(p.config, p.kind);
  load_weights(m, ck);
  return m;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { bytes_.append(s); }

  void tensor(const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
    if (t.rank() > 0xFF) throw CheckpointError("tensor rank too large: " + name);
    u16(static_cast<std::uint16_t>(name.size()));
    raw(name);
    u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) {
      if (e > 0xFFFFFFFFu) throw CheckpointError("tensor extent too large: " + name);
      u32(static_cast<std::uint32_t>(e));
    }
    u8(kDtypeF64);
    for (double v : t.values()) f64(v);
  }

  std::string take() && { return std::move(bytes_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointTruncatedError("checkpoint payload is truncated");
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

  std::pair<std::string, Tensor> tensor() {
    const std::uint16_t len = u16();
    std::string name(take(len));
    const std::uint8_t rank = u8();
    Shape shape(rank);
    std::size_t volume = 1;
    for (auto& e : shape) {
      e = u32();
      if (e == 0) throw CheckpointError("tensor '" + name + "' has a zero extent");
      volume *= e;
    }
    if (u8() != kDtypeF64) throw CheckpointError("tensor '" + name + "' has an unsupported dtype");
    if ((bytes_.size() - pos_) / 8 < volume) throw CheckpointTruncatedError("checkpoint payload is truncated");
    std::vector<double> values(volume);
    for (double& v : values) v = f64();
    return {std::move(name), Tensor(std::move(shape), std::move(values))};
  }

 private:
  std::uint64_t le(int n) {
    const std::string_view s = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = n - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(ck.version);
  w.u32(static_cast<std::uint32_t>(ck.config_text.size()));
  w.raw(ck.config_text);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) w.tensor(name, t);
  if (ck.optimizer) {
    const OptimizerState& s = *ck.optimizer;
    w.u8(kOptimizerTag);
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u64(s.step);
    w.u32(static_cast<std::uint32_t>(s.first_moment.size() + s.second_moment.size()));
    for (const auto& [name, t] : s.first_moment) w.tensor("m:" + name, t);
    for (const auto& [name, t] : s.second_moment) w.tensor("v:" + name, t);
  }
  w.u8(kTerminator);
  return std::move(w).take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointMagicError("not a checkpoint: bad magic bytes");
  }
  r.take(4);
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  const std::uint32_t config_len = r.u32();
  ck.config_text = std::string(r.take(config_len));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) ck.tensors.push_back(r.tensor());
  std::uint8_t tag = r.u8();
  if (tag == kOptimizerTag) {
    OptimizerState s;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(OptimizerKind::adam)) throw CheckpointError("unknown optimizer kind");
    s.kind = static_cast<OptimizerKind>(kind);
    s.step = r.u64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto [name, t] = r.tensor();
      if (name.starts_with("m:")) s.first_moment.emplace(name.substr(2), std::move(t));
      else if (name.starts_with("v:")) s.second_moment.emplace(name.substr(2), std::move(t));
      else throw CheckpointError("unexpected optimizer tensor '" + name + "'");
    }
    ck.optimizer = std::move(s);
    tag = r.u8();
  }
  if (tag != kTerminator) throw CheckpointError("checkpoint section tag is not recognized");
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint terminator");
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline void save_checkpoint(const ModelGraph& m, const std::filesystem::path& path, const CheckpointMeta& meta = {},
                            const OptimizerState* optimizer = nullptr) {
  write_checkpoint(make_checkpoint(m, meta, optimizer), path);
}

inline ModelGraph load_checkpoint(const std::filesystem::path& path) { return restore_model(read_checkpoint(path)); }

}  // namespace densepipe
