#pragma once

// Parameter checkpoints: a JSON manifest (names, shapes, byte offsets,
// precision, format version, free-form metadata) next to a packed
// little-endian payload. Adam moments may be appended for resuming.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pemvc/json_util.hpp"
#include "pemvc/optim.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc::nn {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<NamedArray> params;
  std::optional<AdamState> adam;
  Json meta;  // model config, hash, normalization, training summary
};

/// Writes `<stem>.json` and `<stem>.bin`; `manifest` names the .json file.
void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

template <typename T>
std::vector<NamedArray> snapshot(const std::vector<std::string>& names, const std::vector<Tensor<T>>& params);

/// Copies values into `params`, matching by position and checking names/shapes.
template <typename T>
void restore(const std::vector<NamedArray>& saved, const std::vector<std::string>& names,
             std::vector<Tensor<T>>& params);

}  // namespace pemvc::nn
