#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bits/tensor.hpp"

namespace bits {

// BITSCKPT container: magic, u32 version, length-prefixed UTF-8 meta JSON,
// then parameter entries (u16 name length, name, u8 rank, u32 dims, raw f32
// little-endian), then optimizer/rng blobs with the same framing. Saves are
// write-then-rename so a crash never leaves a corrupt file at the target
// path.
struct Checkpoint {
    nlohmann::json meta;  // semantic config snapshot + epoch + step + norm stats
    std::vector<std::pair<std::string, Tensor<float>>> params;
    std::vector<std::pair<std::string, Tensor<float>>> blobs;

    const Tensor<float>* find_param(const std::string& name) const;
    const Tensor<float>* find_blob(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Bit-exact round trip of rng state through the f32 entry framing.
Tensor<float> rng_state_to_tensor(const Rng::State& s);
Rng::State rng_state_from_tensor(const Tensor<float>& t);

}  // namespace bits
