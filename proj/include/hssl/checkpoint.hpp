#pragma once

// Binary checkpoint format, version 1. Little-endian throughout.
//
//   "HSSL" | u32 version | u8 kind (0 full, 1 base export) | u64 step
//   u64 config_len | config JSON (resolved)
//   u32 center_count | per center: u32 K, K x f32
//   u32 param_count  | per param: u32 name_len, name, u32 rank, rank x u32, n x f32
//   u8 has_optimizer | u64 adam_t | per student param: n x f32 m, n x f32 v
//   u8 has_bank      | u32 dim, u32 capacity, u32 ptr, u32 count, count*dim x f32
//
// Full checkpoints carry student and teacher parameters under "student/" and
// "teacher/" name prefixes; base exports carry only "teacher/base.*" entries
// with the prefix stripped to "base.*".

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hssl/common.hpp"
#include "hssl/engine.hpp"
#include "hssl/io.hpp"

namespace hssl {

namespace detail {

struct ByteWriter {
  std::string out;
  void u8(uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void floats(const std::vector<float>& vs) {
    for (float v : vs) f32(v);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    out += s;
  }
};

struct ByteReader {
  const std::string& in;
  size_t at = 0;
  explicit ByteReader(const std::string& s) : in(s) {}
  void need(size_t n) const {
    if (at + n > in.size()) throw checkpoint_error("truncated checkpoint at offset " + std::to_string(at));
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(in[at++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(in[at + i])) << (8 * i);
    at += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(in[at + i])) << (8 * i);
    at += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<float> floats(size_t n) {
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = f32();
    return out;
  }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s = in.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace detail

struct CheckpointBlob {
  std::vector<int> shape;
  std::vector<float> data;
};

struct CheckpointData {
  uint32_t version = 1;
  uint8_t kind = 0;  // 0 full, 1 base export
  uint64_t step = 0;
  nlohmann::json config;
  std::vector<std::vector<float>> centers;
  std::vector<std::pair<std::string, CheckpointBlob>> params;  // insertion order preserved
  bool has_optimizer = false;
  uint64_t adam_t = 0;
  std::vector<std::pair<std::vector<float>, std::vector<float>>> adam_state;  // m, v per student param
  bool has_bank = false;
  int bank_dim = 0, bank_capacity = 0, bank_ptr = 0;
  std::vector<float> bank_keys;

  const CheckpointBlob* find(const std::string& name) const {
    for (const auto& [n, b] : params)
      if (n == name) return &b;
    return nullptr;
  }
};

inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const CheckpointData& cp) {
  detail::ByteWriter w;
  w.out += "HSSL";
  w.u32(kCheckpointVersion);
  w.u8(cp.kind);
  w.u64(cp.step);
  const std::string cfg = cp.config.dump();
  w.u64(cfg.size());
  w.out += cfg;
  w.u32(static_cast<uint32_t>(cp.centers.size()));
  for (const auto& c : cp.centers) {
    w.u32(static_cast<uint32_t>(c.size()));
    w.floats(c);
  }
  w.u32(static_cast<uint32_t>(cp.params.size()));
  for (const auto& [name, blob] : cp.params) {
    w.str(name);
    w.u32(static_cast<uint32_t>(blob.shape.size()));
    for (int e : blob.shape) w.u32(static_cast<uint32_t>(e));
    w.floats(blob.data);
  }
  w.u8(cp.has_optimizer ? 1 : 0);
  if (cp.has_optimizer) {
    w.u64(cp.adam_t);
    w.u32(static_cast<uint32_t>(cp.adam_state.size()));
    for (const auto& [m, v] : cp.adam_state) {
      w.u32(static_cast<uint32_t>(m.size()));
      w.floats(m);
      w.floats(v);
    }
  }
  w.u8(cp.has_bank ? 1 : 0);
  if (cp.has_bank) {
    w.u32(static_cast<uint32_t>(cp.bank_dim));
    w.u32(static_cast<uint32_t>(cp.bank_capacity));
    w.u32(static_cast<uint32_t>(cp.bank_ptr));
    w.u32(static_cast<uint32_t>(cp.bank_keys.size() / std::max(1, cp.bank_dim)));
    w.floats(cp.bank_keys);
  }
  return w.out;
}

inline CheckpointData parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  r.need(4);
  if (bytes.compare(0, 4, "HSSL") != 0) throw checkpoint_error("bad magic; not a checkpoint file");
  r.at = 4;
  CheckpointData cp;
  cp.version = r.u32();
  if (cp.version != kCheckpointVersion)
    throw checkpoint_error("unsupported checkpoint version " + std::to_string(cp.version));
  cp.kind = r.u8();
  cp.step = r.u64();
  const uint64_t cfg_len = r.u64();
  r.need(cfg_len);
  const std::string cfg = bytes.substr(r.at, cfg_len);
  r.at += cfg_len;
  try {
    cp.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint_error(std::string("corrupt embedded config: ") + e.what());
  }
  const uint32_t ncenters = r.u32();
  for (uint32_t i = 0; i < ncenters; ++i) {
    const uint32_t k = r.u32();
    cp.centers.push_back(r.floats(k));
  }
  const uint32_t nparams = r.u32();
  for (uint32_t i = 0; i < nparams; ++i) {
    std::string name = r.str();
    const uint32_t rank = r.u32();
    CheckpointBlob blob;
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      blob.shape.push_back(static_cast<int>(r.u32()));
      n *= blob.shape.back();
    }
    blob.data = r.floats(static_cast<size_t>(n));
    cp.params.emplace_back(std::move(name), std::move(blob));
  }
  cp.has_optimizer = r.u8() != 0;
  if (cp.has_optimizer) {
    cp.adam_t = r.u64();
    const uint32_t nstates = r.u32();
    for (uint32_t i = 0; i < nstates; ++i) {
      const uint32_t n = r.u32();
      std::vector<float> m = r.floats(n);
      std::vector<float> v = r.floats(n);
      cp.adam_state.emplace_back(std::move(m), std::move(v));
    }
  }
  cp.has_bank = r.u8() != 0;
  if (cp.has_bank) {
    cp.bank_dim = static_cast<int>(r.u32());
    cp.bank_capacity = static_cast<int>(r.u32());
    cp.bank_ptr = static_cast<int>(r.u32());
    const uint32_t count = r.u32();
    cp.bank_keys = r.floats(static_cast<size_t>(count) * cp.bank_dim);
  }
  return cp;
}

// ---------------------------------------------------------------------------
// Engine <-> checkpoint
// ---------------------------------------------------------------------------

inline CheckpointData checkpoint_from_engine(HsslEngine& engine, const nlohmann::json& resolved_config) {
  CheckpointData cp;
  cp.kind = 0;
  cp.step = static_cast<uint64_t>(engine.step_index());
  cp.config = resolved_config;
  cp.centers = engine.centers();
  auto dump_store = [&](ParamStore& ps, const std::string& prefix) {
    for (size_t i = 0; i < ps.size(); ++i) {
      CheckpointBlob blob;
      blob.shape = ps[i].shape;
      blob.data = *ps[i].value;
      cp.params.emplace_back(prefix + ps[i].name, std::move(blob));
    }
  };
  dump_store(engine.student().params, "student/");
  dump_store(engine.teacher().params, "teacher/");
  cp.has_optimizer = true;
  cp.adam_t = static_cast<uint64_t>(engine.optimizer().steps());
  engine.optimizer().resize(engine.student().params.size());
  for (size_t i = 0; i < engine.student().params.size(); ++i) {
    std::vector<float> m = engine.optimizer().moment1(i);
    std::vector<float> v = engine.optimizer().moment2(i);
    const size_t n = static_cast<size_t>(engine.student().params[i].numel());
    if (m.size() != n) m.assign(n, 0.0f);
    if (v.size() != n) v.assign(n, 0.0f);
    cp.adam_state.emplace_back(std::move(m), std::move(v));
  }
  if (engine.bank() != nullptr) {
    cp.has_bank = true;
    cp.bank_dim = engine.bank()->dim();
    cp.bank_capacity = engine.bank()->capacity();
    cp.bank_keys = engine.bank()->flat();
    cp.bank_ptr = engine.bank()->size();  // reconstructed via re-push below
  }
  return cp;
}

inline CheckpointData base_export_from_engine(HsslEngine& engine, const nlohmann::json& resolved_config) {
  CheckpointData cp;
  cp.kind = 1;
  cp.step = static_cast<uint64_t>(engine.step_index());
  cp.config = resolved_config;
  ParamStore& ps = engine.teacher().params;
  for (size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].name.rfind("base.", 0) != 0) continue;  // auxiliary machinery excluded
    CheckpointBlob blob;
    blob.shape = ps[i].shape;
    blob.data = *ps[i].value;
    cp.params.emplace_back(ps[i].name, std::move(blob));
  }
  return cp;
}

inline void save_checkpoint_file(const CheckpointData& cp, const std::string& path) {
  atomic_write_file(path, serialize_checkpoint(cp));
}

inline CheckpointData load_checkpoint_file(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

// restore one store from prefixed blobs; every parameter must be present
inline void restore_store(ParamStore& ps, const CheckpointData& cp, const std::string& prefix) {
  for (size_t i = 0; i < ps.size(); ++i) {
    const CheckpointBlob* blob = cp.find(prefix + ps[i].name);
    if (blob == nullptr) throw checkpoint_error("checkpoint is missing parameter " + prefix + ps[i].name);
    if (blob->shape != ps[i].shape) throw checkpoint_error("shape mismatch for " + prefix + ps[i].name);
    *ps[i].value = blob->data;
  }
}

// Full restore into a freshly constructed engine (config must match the
// embedded snapshot's model geometry).
inline void restore_engine(HsslEngine& engine, const CheckpointData& cp) {
  if (cp.kind != 0) throw checkpoint_error("expected a full checkpoint, got a base export");
  restore_store(engine.student().params, cp, "student/");
  restore_store(engine.teacher().params, cp, "teacher/");
  if (cp.centers.size() != engine.centers().size())
    throw checkpoint_error("center stream count mismatch");
  engine.centers() = cp.centers;
  engine.set_step_index(static_cast<int64_t>(cp.step));
  if (cp.has_optimizer) {
    engine.optimizer().set_steps(static_cast<int64_t>(cp.adam_t));
    engine.optimizer().resize(engine.student().params.size());
    if (cp.adam_state.size() != engine.student().params.size())
      throw checkpoint_error("optimizer state count mismatch");
    for (size_t i = 0; i < cp.adam_state.size(); ++i) {
      engine.optimizer().moment1(i) = cp.adam_state[i].first;
      engine.optimizer().moment2(i) = cp.adam_state[i].second;
    }
  }
  if (cp.has_bank && engine.bank() != nullptr) {
    for (int i = 0; i < static_cast<int>(cp.bank_keys.size()) / cp.bank_dim; ++i)
      engine.bank()->push(cp.bank_keys.data() + static_cast<int64_t>(i) * cp.bank_dim);
  }
}

// Initialize the base model (both branches) from a base export; auxiliary
// heads and projections keep their fresh initialization.
inline void warm_start_base(HsslEngine& engine, const CheckpointData& cp) {
  auto fill = [&](ParamStore& ps) {
    for (size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].name.rfind("base.", 0) != 0) continue;
      const CheckpointBlob* blob = cp.find(ps[i].name);
      if (blob == nullptr) throw checkpoint_error("base export is missing parameter " + ps[i].name);
      if (blob->shape != ps[i].shape)
        throw checkpoint_error("shape mismatch for " + ps[i].name + " while re-attaching the base model");
      *ps[i].value = blob->data;
    }
  };
  fill(engine.student().params);
  fill(engine.teacher().params);
}

}  // namespace hssl
