// SPDX-License-Identifier: Apache-2.0
#pragma once

// "TFCKPT01" tensor container:
//   magic[8] | u32 count | count x (u32 name_len | name | u32 rank | u32 dims[rank] | f32 data)
// All integers and floats little-endian; data row-major.

#include <filesystem>
#include <string>

#include "texforce/diffusion.hpp"
#include "texforce/tensor.hpp"

namespace texforce {

inline constexpr char kCheckpointMagic[] = "TFCKPT01";
inline constexpr char kAdapterMagic[] = "TFLORA01";

void save_checkpoint(const ParameterMap<float>& tensors, const std::filesystem::path& path);
ParameterMap<float> load_checkpoint(const std::filesystem::path& path);

/// Encoder and denoiser weights plus their shape configuration.
ParameterMap<float> model_tensors(const DiffusionModel<float>& model);
/// Rebuilds encoder and denoiser from tensors written by model_tensors();
/// the schedule is left untouched.
void restore_model(DiffusionModel<float>& model, const ParameterMap<float>& tensors);

}  // namespace texforce
