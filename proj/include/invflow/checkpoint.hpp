#pragma once

#include <string>

#include "invflow/model.hpp"
#include "invflow/train.hpp"

namespace invflow {

/// Checkpoint format (all multi-byte values little-endian):
///   magic "IFLW" | u32 version | model config | i64 epoch
///   | adam (i64 step, u64 len, len f64 m, len f64 v)
///   | rng state (4 u64 words, f64 cached normal, u8 has-cached)
///   | u64 param count | per param: u32 path length, path bytes,
///     u64 value count, values as f64
/// Roundtrips are bit-exact; loading re-imposes the masked-kernel structure.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(FlowModel& model, const TrainerState& state,
                     const std::string& path);

struct LoadedCheckpoint {
    FlowModel model;
    TrainerState state;
};

/// Rebuilds the model from the stored config and restores every parameter
/// bit-exactly. Throws FormatError on bad magic, version mismatch,
/// truncation, or a parameter table that does not match the registry.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace invflow
