#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slottok/ad.hpp"

namespace slottok {

// Content hash over tensor names, shapes and raw values, in registry order.
std::uint64_t weights_hash(const std::vector<ad::Tensor*>& tensors);

// Checkpoint container: JSON metadata + named double blobs in one file.
// Layout: "STCK" magic, u32 version, u64 json length, json bytes, tensor data.
void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<ad::Tensor*>& tensors);

// Loads metadata and fills `tensors` by name; throws if a registered tensor
// is missing from the file or has a different shape.
nlohmann::json load_checkpoint(const std::string& path,
                               std::vector<ad::Tensor*>& tensors);

// Reads only the metadata block.
nlohmann::json peek_checkpoint(const std::string& path);

}  // namespace slottok
