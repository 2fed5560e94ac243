#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "contextflow/flow/model.hpp"

namespace contextflow {

// Binary checkpoint: magic, format_version (1), config digest, phase,
// generalist fingerprint, then every ParamStore entry (params and buffers)
// as (name, dims, raw doubles). Round trips are bitwise.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const FlowModel& model, const std::string& path);

// Rebuilds a model from `cfg` and restores the stored state. The stored
// config digest must match cfg.digest(); specialist checkpoints re-attach
// and verify the embedded generalist fingerprint.
std::unique_ptr<FlowModel> load_checkpoint(const FlowConfig& cfg, const std::string& path,
                                           std::uint64_t seed);

// Applies a specialist checkpoint on top of a model that already carries
// generalist weights (attaching first if needed). Refuses with a
// FingerprintMismatch diagnostic when the checkpoint was trained against a
// different generalist.
void load_specialist_onto(FlowModel& model, const std::string& path, std::uint64_t seed);

}  // namespace contextflow
