// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sparsedet3d/config.hpp"
#include "sparsedet3d/detector.hpp"
#include "sparsedet3d/nn.hpp"

namespace sparsedet3d {

/// Little-endian container: "SDCK", u32 version, then blocks of
/// (u32 name length, name, u32 rank, rank x u32 dims, f32 data) until EOF.
/// The config snapshot is the rank-1 block "__config__" holding the dump
/// text one byte per element.
struct TensorBlock {
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

struct CheckpointData {
    RunConfig config;
    std::map<std::string, TensorBlock> tensors;  // excludes the config block
};

inline constexpr const char* kConfigBlock = "__config__";

void save_checkpoint(const std::string& path, const nn::ParameterStore& params, const RunConfig& config);
CheckpointData read_checkpoint(const std::string& path);

/// Copies every store entry from `data`; names and shapes must match exactly.
void load_parameters(nn::ParameterStore& params, const CheckpointData& data);

/// Rounds every parameter to float precision (what a checkpoint stores).
void round_to_checkpoint_precision(nn::ParameterStore& params);

/// Rebuilds a detector from a checkpoint (config snapshot + class sizes).
std::unique_ptr<Detector> load_detector(const std::string& path);

}  // namespace sparsedet3d
