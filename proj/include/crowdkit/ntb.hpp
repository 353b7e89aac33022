#pragma once

#include <string>
#include <utility>
#include <vector>

#include "crowdkit/tensor.hpp"

namespace crowdkit {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Named-tensor binary format: magic "NTB1", u32 LE tensor count, then per
/// tensor u32 name length + UTF-8 name, u32 rank, rank x u32 dims, and
/// dims-product f64 LE values. Round-trips bit-exactly.
void write_ntb(const std::string& path, const NamedTensors& tensors);
NamedTensors read_ntb(const std::string& path);

}  // namespace crowdkit
