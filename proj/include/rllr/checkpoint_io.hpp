#pragma once

// Binary checkpoint format:
//
//   magic "RLLR" | u32 version | i32 vocab_size, context_length, width,
//   layers, heads | u8 head_lm, head_value, head_reward | i32 role |
//   u64 vocab fingerprint | i64 param count | params as little-endian f64
//
// The reader validates structure, parameter count, and finiteness, and
// refuses anything it does not understand.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "rllr/common.hpp"
#include "rllr/io.hpp"
#include "rllr/model.hpp"

namespace rllr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

inline constexpr uint32_t kCheckpointVersion = 1;

inline std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  const int64_t expect = param_count(ckpt.config);
  if (static_cast<int64_t>(ckpt.params.size()) != expect)
    throw std::invalid_argument("checkpoint parameter count does not match config");
  for (double p : ckpt.params)
    if (!std::isfinite(p)) throw NumericError("checkpoint contains non-finite parameters");

  std::string out;
  out.reserve(64 + ckpt.params.size() * sizeof(double));
  auto put = [&out](const void* p, size_t n) {
    out.append(reinterpret_cast<const char*>(p), n);
  };
  out += "RLLR";
  const uint32_t version = kCheckpointVersion;
  put(&version, 4);
  const ModelConfig& c = ckpt.config;
  put(&c.vocab_size, 4);
  put(&c.context_length, 4);
  put(&c.width, 4);
  put(&c.layers, 4);
  put(&c.heads, 4);
  const uint8_t heads[3] = {c.head_lm ? uint8_t{1} : uint8_t{0},
                            c.head_value ? uint8_t{1} : uint8_t{0},
                            c.head_reward ? uint8_t{1} : uint8_t{0}};
  put(heads, 3);
  const int32_t role = static_cast<int32_t>(ckpt.role);
  put(&role, 4);
  put(&ckpt.vocab_fingerprint, 8);
  const int64_t n = expect;
  put(&n, 8);
  put(ckpt.params.data(), ckpt.params.size() * sizeof(double));
  return out;
}

inline Checkpoint checkpoint_from_bytes(std::string_view bytes, const std::string& origin = "") {
  auto fail = [&origin](const std::string& why) -> void {
    throw PreconditionError("bad checkpoint" + (origin.empty() ? "" : " " + origin) + ": " + why);
  };
  size_t off = 0;
  auto get = [&](void* p, size_t n) {
    if (off + n > bytes.size()) fail("truncated");
    std::memcpy(p, bytes.data() + off, n);
    off += n;
  };

  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, "RLLR", 4) != 0) fail("wrong magic");
  uint32_t version = 0;
  get(&version, 4);
  if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  get(&c.vocab_size, 4);
  get(&c.context_length, 4);
  get(&c.width, 4);
  get(&c.layers, 4);
  get(&c.heads, 4);
  uint8_t heads[3];
  get(heads, 3);
  if (heads[0] > 1 || heads[1] > 1 || heads[2] > 1) fail("bad head flags");
  c.head_lm = heads[0] != 0;
  c.head_value = heads[1] != 0;
  c.head_reward = heads[2] != 0;
  int32_t role = 0;
  get(&role, 4);
  if (role < 0 || role > 4) fail("bad role tag");
  ckpt.role = static_cast<Role>(role);
  get(&ckpt.vocab_fingerprint, 8);
  int64_t n = 0;
  get(&n, 8);

  int64_t expect = 0;
  try {
    expect = param_count(c);
  } catch (const std::exception& e) {
    fail(std::string("invalid config: ") + e.what());
  }
  if (n != expect) fail("parameter count mismatch");
  if (off + static_cast<size_t>(n) * sizeof(double) != bytes.size()) fail("size mismatch");

  ckpt.params.resize(static_cast<size_t>(n));
  std::memcpy(ckpt.params.data(), bytes.data() + off, static_cast<size_t>(n) * sizeof(double));
  for (double p : ckpt.params)
    if (!std::isfinite(p)) fail("non-finite parameters");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  write_file(path, checkpoint_to_bytes(ckpt));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return checkpoint_from_bytes(read_file(path), path.string());
}

}  // namespace rllr
