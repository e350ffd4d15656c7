#pragma once

#include <string>
#include <vector>

#include "sblab/tensor.hpp"

namespace sblab {

// SBCKPT v1: text header line, then one record per parameter.
// Record: a line "name dim0 dim1 ..." followed by the values as
// whitespace-separated decimals printed with %.17g (exact f64 round trip).
void write_checkpoint(const std::string& path, std::span<const Parameter* const> params);

struct CheckpointRecord {
    std::string name;
    Tensor tensor;
};

std::vector<CheckpointRecord> read_checkpoint(const std::string& path);

// Pulls a named record and validates its shape.
const CheckpointRecord& find_record(const std::vector<CheckpointRecord>& records,
                                    const std::string& name);

}  // namespace sblab
