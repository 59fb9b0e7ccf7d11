#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "sgdfuse/nn.hpp"
#include "sgdfuse/tensor.hpp"

namespace sgdfuse {

// Single-file binary checkpoint. Layout (little-endian):
//   magic     16 bytes  "SGDFUSE-CKPT\0\0\0\0"
//   version   u32
//   stage     u32       (1 or 2)
//   step      u64
//   seed      u64
//   config    u64 len + bytes        (canonical TOML snapshot)
//   rng       u64 len + bytes        (informational RNG state string)
//   params    u64 count, then per entry:
//               u32 name_len + name
//               u32 ndim, u32 dims[ndim]
//               u64 scalar_count, f64 data[scalar_count]
//   opt flag  u8; when 1: u64 adam_t, then m-table and v-table in param format
struct Checkpoint {
    std::uint32_t version = 1;
    int stage = 1;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::string config_toml;
    std::string rng_state;
    std::map<std::string, Tensor> params;
    bool has_optimizer = false;
    std::int64_t adam_t = 0;
    std::map<std::string, Tensor> adam_m, adam_v;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(int stage, std::uint64_t step, std::uint64_t seed,
                    const std::string& config_toml, const nn::ParamStore& ps,
                    nn::Adam* opt = nullptr);

// Copies checkpoint tensors into an existing store; any missing/extra/reshaped
// parameter raises CheckpointError listing every mismatch.
void restore_params(const Checkpoint& ckpt, const nn::ParamStore& ps);
void restore_optimizer(const Checkpoint& ckpt, nn::Adam& opt);

} // namespace sgdfuse
