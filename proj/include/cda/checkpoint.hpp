#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>

#include "cda/model.hpp"

namespace cda {

// Serialized training state. config_json is the canonical experiment
// config that produced the run; the RNG state of the counter-based
// sampling scheme is (base_seed, epochs_completed, global_step).
struct Checkpoint {
    uint32_t version = 1;
    std::string config_json;
    ParameterStore store;
    std::unordered_map<std::string, Tensor> opt_state;
    uint64_t base_seed = 0;
    uint32_t epochs_completed = 0;
    uint64_t global_step = 0;
};

enum class TensorDtype : uint8_t { f64 = 0, f32 = 1 };

// File layout (all integers little-endian):
//   magic "CDACKPT\n", u32 version,
//   u64 config length + bytes,
//   u64 base_seed, u32 epochs_completed, u64 global_step,
//   u32 entry count, entries of
//     (u8 kind: 0 param / 1 buffer / 2 optimizer state,
//      u32 name length + bytes, u8 dtype, u32 ndim, u64 dims..., payload),
//   u64 FNV-1a checksum of everything before it.
// f64 payloads round-trip bit-exactly; f32 is an opt-in storage dtype.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path,
                     TensorDtype dtype = TensorDtype::f64);

Checkpoint load_checkpoint(const std::string& path);

} // namespace cda
