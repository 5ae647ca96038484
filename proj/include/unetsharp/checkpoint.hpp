#pragma once

#include "unetsharp/data.hpp"
#include "unetsharp/param_store.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace unetsharp {

/// Binary layout, little-endian:
///   "USHP", u32 version, u32 tensor count, then per tensor
///   u32 name length, name bytes, u8 dtype (0 f32, 1 f64, 2 u8), u32 rank,
///   u64 dims[rank], raw data; finally u32 CRC-32 of all preceding bytes.
/// The free-form metadata text travels as the u8 tensor "__meta__".
struct Checkpoint {
    std::map<std::string, Tensor<float>> tensors;
    std::string meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMetaTensor = "__meta__";

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& store, const std::string& meta);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws DataError on I/O failure, truncation, bad magic or CRC mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Overwrites every declared tensor of `store` from `ckpt`; the name sets
/// must match exactly.
void restore(ParamStore<float>& store, const Checkpoint& ckpt);

} // namespace unetsharp
