#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "pano/tensor.hpp"

namespace pano {

// Tensor wire format: magic "PSFK1", u32 rank, u32 extents, f32 payload.
// All integers and floats little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

// Checkpoint: named tensors in a fixed order. Magic "PSFC1", u32 count,
// then per entry u32 name length, name bytes, tensor blob.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_checkpoint(const std::string& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace pano
