#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "nnlens/tensor.hpp"

namespace nnlens {

// Named-tensor container file, used for model checkpoints and probe
// weights. Layout (all integers little-endian):
//   magic "NNLT" | version u16 | count u32 |
//   per entry: name length u16, UTF-8 name, rank u8, dims u32 each,
//              payload f64 little-endian, row-major.
inline constexpr uint16_t kContainerVersion = 1;

void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, Tensor>>& entries);

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::filesystem::path& path);

} // namespace nnlens
