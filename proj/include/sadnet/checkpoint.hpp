#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "sadnet/adam.hpp"
#include "sadnet/config.hpp"
#include "sadnet/error.hpp"
#include "sadnet/image.hpp"
#include "sadnet/model.hpp"
#include "sadnet/params.hpp"
#include "sadnet/rng.hpp"

namespace sadnet {

// Everything needed to resume training or run inference.
//
// File layout, all integers little-endian:
//   "SADN"  u32 version
//   u32 n, n bytes       model config as key=value text
//   u64 iteration
//   u64 x4               xoshiro256** state
//   u64 adam step        f64 x4 lr beta1 beta2 eps
//   u32 tensor count, then per tensor:
//     u32 n, n bytes name   u32 x4 shape (n, c, h, w)   u8 dtype (1 = f32)
//     numel * 4 bytes data
// Tensors appear as the parameters in layout order, then "adam.m/<name>" and
// "adam.v/<name>" for each parameter.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model{};
  ParamStore<float> params;
  AdamState<float> adam;
  std::uint64_t iteration = 0;
  Xoshiro256::State rng{};

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.model == b.model && a.params == b.params && a.adam.t == b.adam.t && a.adam.m == b.adam.m &&
           a.adam.v == b.adam.v && a.adam.hyper.lr == b.adam.hyper.lr && a.adam.hyper.beta1 == b.adam.hyper.beta1 &&
           a.adam.hyper.beta2 == b.adam.hyper.beta2 && a.adam.hyper.eps == b.adam.hyper.eps &&
           a.iteration == b.iteration && a.rng == b.rng;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw ParseError("checkpoint truncated", b_.size());
  }

  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor4<float>& t) {
  w.str(name);
  const auto& s = t.shape();
  for (auto d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
  w.u8(1);
  for (std::size_t i = 0; i < t.size(); ++i) w.f32(t[i]);
}

struct TensorRecord {
  std::string name;
  Tensor4<float> value;
};

inline TensorRecord read_tensor(ByteReader& r) {
  TensorRecord rec;
  const std::size_t at = r.pos();
  rec.name = r.str();
  Shape4 s;
  s.n = r.u32();
  s.c = r.u32();
  s.h = r.u32();
  s.w = r.u32();
  const std::uint8_t dtype = r.u8();
  if (dtype != 1) throw ParseError("tensor '" + rec.name + "': unsupported dtype " + std::to_string(dtype), at);
  if (s.numel() > (std::size_t{1} << 32)) throw ParseError("tensor '" + rec.name + "': implausible shape", at);
  rec.value = Tensor4<float>(s);
  for (std::size_t i = 0; i < rec.value.size(); ++i) rec.value[i] = r.f32();
  return rec;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw("SADN", 4);
  w.u32(Checkpoint::kVersion);
  w.str(model_config_to_text(ck.model));
  w.u64(ck.iteration);
  for (auto s : ck.rng) w.u64(s);
  w.u64(ck.adam.t);
  w.f64(ck.adam.hyper.lr);
  w.f64(ck.adam.hyper.beta1);
  w.f64(ck.adam.hyper.beta2);
  w.f64(ck.adam.hyper.eps);
  const auto& entries = ck.params.entries();
  const bool moments = ck.adam.m.size() == entries.size();
  w.u32(static_cast<std::uint32_t>(entries.size() * (moments ? 3 : 1)));
  for (const auto& e : entries) detail::write_tensor(w, e.name, e.value);
  if (moments) {
    for (const auto& e : entries) detail::write_tensor(w, "adam.m/" + e.name, ck.adam.m.at(e.name));
    for (const auto& e : entries) detail::write_tensor(w, "adam.v/" + e.name, ck.adam.v.at(e.name));
  }
  return std::move(w.bytes());
}

// Parses and validates a checkpoint: the parameter set must match the layout
// of the stored model config exactly.
inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SADN", 4) != 0) {
    throw ParseError("not a checkpoint (missing SADN magic)", 0);
  }
  detail::ByteReader r(bytes);
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  Checkpoint ck;
  const std::size_t cfg_at = r.pos();
  try {
    ck.model = model_config_from_text(r.str(), "checkpoint config");
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), cfg_at);
  }
  ck.iteration = r.u64();
  for (auto& s : ck.rng) s = r.u64();
  ck.adam.t = r.u64();
  ck.adam.hyper.lr = r.f64();
  ck.adam.hyper.beta1 = r.f64();
  ck.adam.hyper.beta2 = r.f64();
  ck.adam.hyper.eps = r.f64();

  const auto specs = param_specs(ck.model);
  const std::size_t count_at = r.pos();
  const std::uint32_t count = r.u32();
  if (count != specs.size() && count != 3 * specs.size()) {
    throw ParseError("checkpoint holds " + std::to_string(count) + " tensors, the model config needs " +
                         std::to_string(specs.size()) + " parameters",
                     count_at);
  }
  auto expect = [&](const std::string& name, const Shape4& shape, ParamStore<float>& into) {
    const std::size_t at = r.pos();
    auto rec = detail::read_tensor(r);
    if (rec.name != name) throw ParseError("expected tensor '" + name + "', found '" + rec.name + "'", at);
    if (!(rec.value.shape() == shape)) {
      throw ParseError("tensor '" + name + "' has shape " + rec.value.shape().str() + ", expected " + shape.str(), at);
    }
    into.add(name, std::move(rec.value));
  };
  for (const auto& s : specs) expect(s.name, s.shape, ck.params);
  if (count == 3 * specs.size()) {
    for (const auto& s : specs) expect("adam.m/" + s.name, s.shape, ck.adam.m);
    for (const auto& s : specs) expect("adam.v/" + s.name, s.shape, ck.adam.v);
    // moments are keyed by the bare parameter name
    ParamStore<float> m, v;
    for (auto& e : ck.adam.m.entries()) m.add(e.name.substr(7), std::move(e.value));
    for (auto& e : ck.adam.v.entries()) v.add(e.name.substr(7), std::move(e.value));
    ck.adam.m = std::move(m);
    ck.adam.v = std::move(v);
  }
  if (!r.done()) throw ParseError("trailing bytes after the last tensor", r.pos());
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw DataError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  write_file_bytes(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.detail(), e.offset());
  }
}

// Fresh training state: initial weights, zero moments, seeded RNG.
inline Checkpoint initial_checkpoint(const ModelConfig& model, const AdamHyper& hyper, std::uint64_t seed) {
  Checkpoint ck;
  ck.model = model;
  Xoshiro256 rng(seed);
  ck.params = init_params<float>(model, rng.next());
  ck.adam = AdamState<float>::for_params(ck.params, hyper);
  ck.rng = rng.state();
  return ck;
}

}  // namespace sadnet
