#pragma once

#include <string>

#include "mmx/model.hpp"

namespace mmx {

// Binary checkpoint: magic "MMX1", version u32, layer count u32, then one
// {kind, in, out, ksize} u32 record per layer, then every parameter tensor
// flattened as little-endian f64 in slot order. Round-trips bit-exactly.
// Spec-level metadata (model kind, latent index, seeds) travels in the run
// config, not here.
void save_checkpoint(const std::string& path, const ModelState& m);

// loads parameters and validates the stored layer table against spec;
// training metadata is left at defaults for the caller to restore
ModelState load_checkpoint(const std::string& path, const ModelSpec& spec);

}  // namespace mmx
