#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "embolite/nn.hpp"
#include "json.hpp"

namespace embolite {

// On-disk layout (little-endian):
//   "EMB1" | u64 header length | UTF-8 JSON header | f64 tensor data in header order
// The header lists {"name","shape"} per tensor plus "dtype", "step" and a
// free-form "meta" object.
struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::int64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const nn::StateDict& state, std::int64_t step,
                     const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into `state` by name; every entry of `state`
// must be present with an identical shape.
void restore_state(const Checkpoint& ckpt, nn::StateDict& state);

}  // namespace embolite
