#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "echosynth/adam.hpp"

namespace echosynth {

// Training checkpoint container (".esck"): a JSON metadata block followed by
// named raw tensors, all little-endian. One file carries model parameters,
// optimizer moments and the RNG state, so a resumed run continues bitwise
// identically.
//
//   bytes 0..3  magic "ESCK"
//   bytes 4..7  u32 format version (currently 1)
//   u32 meta_len, then meta_len bytes of UTF-8 JSON
//   u32 tensor count, then per tensor:
//     u32 name_len, name bytes
//     u32 dtype code (0 = f32, 1 = f64, 2 = i64, 3 = u8)
//     u32 ndim, then ndim x u32 dims (outermost first)
//     C-contiguous payload

struct CheckpointData {
    nlohmann::json meta;
    NamedParams tensors;

    const torch::Tensor* find(const std::string& name) const;
    void add(const std::string& name, const torch::Tensor& t) { tensors.emplace_back(name, t); }
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Stable, ordered (prefix + parameter name) -> tensor list for a module.
NamedParams collect_named_params(const std::string& prefix, const torch::nn::Module& m);

// Copies values from a flat named list back into a module's parameters.
// Throws ParseError / ShapeMismatch when entries are missing or misshaped.
void restore_named_params(const NamedParams& src, const std::string& prefix, torch::nn::Module& m);

}  // namespace echosynth
