#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crash/model.hpp"

namespace crash {

// File layout: magic "CRSH", u32 LE version = 1, u64 LE header length,
// UTF-8 JSON header {"config", "dtype":"f64", "tensors":[{name, shape,
// offset, length}...]}, then raw little-endian f64 payload. Offsets are
// relative to the end of the header; payload order = header order =
// lexicographic by tensor name.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Canonical JSON round-trip for ModelConfig (sorted keys, exact doubles).
std::string config_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

// FNV-1a 64-bit over a byte range, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::uint8_t* data, std::size_t len);
std::string fnv1a_hex(const std::string& text);

// Hash of the canonical config JSON; recorded in EmulatorSpec provenance.
std::string config_hash(const ModelConfig& config);

// Hash of a tensor's little-endian payload bytes.
std::string tensor_hash(const Mat& m);

}  // namespace crash
