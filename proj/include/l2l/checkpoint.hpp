#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "l2l/tensor.hpp"

namespace l2l::ckpt {

// Binary tensor-table checkpoint: 4-byte magic ("MAML" / "EPRP" / ...),
// version, then (name, shape, float32 data) records. Written to a temp file
// and atomically renamed.
void save(const std::string& path, const std::string& magic,
          const std::vector<std::pair<std::string, const Tensor*>>& tensors);

std::map<std::string, Tensor> load(const std::string& path,
                                   const std::string& magic);

}  // namespace l2l::ckpt
