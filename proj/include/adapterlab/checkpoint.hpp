#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapterlab/unet.hpp"

namespace adapterlab {

/// Writes `dir/weights.bin` (tensors back to back in the tensor binary format)
/// and `dir/manifest.json` (names, shapes, plus `extra`).
void save_tensors(const std::string& dir, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& extra = nlohmann::json::object());

struct LoadedTensors {
  std::vector<NamedTensor> tensors;
  nlohmann::json manifest;
};
LoadedTensors load_tensors(const std::string& dir);

/// Copies loaded values into `into` by name; names and shapes must match exactly.
void assign_tensors(std::vector<NamedTensor>& into, const std::vector<NamedTensor>& from);

/// Model checkpoint: tensors plus `config` and `config_hash` in the manifest.
void save_checkpoint(const std::string& dir, const UNet& model,
                     const nlohmann::json& extra = nlohmann::json::object());
/// Rebuilds the model from the manifest config; a hash mismatch raises DataError.
UNet load_checkpoint(const std::string& dir, nlohmann::json* manifest = nullptr);

}  // namespace adapterlab
