#pragma once

#include <cstdint>
#include <string>

#include "flowsr/conditioning.hpp"
#include "flowsr/config.hpp"
#include "flowsr/flow_model.hpp"
#include "flowsr/training.hpp"

namespace flowsr {

/// Checkpoint file layout (all integers little-endian):
///   "SRFL" | u32 version | u32 len | arch section text (key=value) |
///   tensor records... | u32 CRC32 of everything before it
/// One record: u32 name_len | name | u8 dtype (1 = f64) | u32 ndim |
/// u32 dims[ndim] | payload doubles.
/// Records hold every model and encoder parameter ("model.*" / "enc.*"),
/// the actnorm-initialized flag, and optionally the Adam state plus the
/// next step index so training can continue exactly where it stopped.
/// Loading recomputes the CRC and refuses the file on any mismatch.

struct LoadedCheckpoint {
    RunConfig cfg;  // only the [arch] fields are meaningful
    FlowModel model;
    LrEncoder enc;
    bool has_optim = false;
    TrainResume resume;  // valid when has_optim
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, FlowModel& model,
                     LrEncoder& enc, const TrainResume* optim = nullptr);

LoadedCheckpoint load_checkpoint(const std::string& path);

/// CRC-32 (reflected 0xEDB88320), exposed for the corruption tests.
uint32_t crc32(const void* data, size_t n);

}  // namespace flowsr
