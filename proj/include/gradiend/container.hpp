#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gradiend/tensor.hpp"

namespace gradiend {

// GRAD1 tensor container: magic "GRD1", u32 LE header length, UTF-8 JSON
// header {version, entries: [{name, shape, dtype:"f32", offset, length}]},
// followed by the raw little-endian f32 payload. Round trips bit-exactly.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::vector<uint8_t> save_container(const NamedTensors& entries);
NamedTensors load_container(const std::vector<uint8_t>& bytes);

void save_container_file(const std::string& path, const NamedTensors& entries);
NamedTensors load_container_file(const std::string& path);

} // namespace gradiend
