#pragma once

#include <filesystem>
#include <string>

#include "cart/optimizer.hpp"

namespace cart::ad {

// Single-file model checkpoint: versioned header, a free-form configuration
// string, then (name, shape, float32 little-endian data) records sorted by
// parameter name. Round trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const std::string& config);

// Loads records into a fresh store and returns the configuration string.
std::string load_checkpoint(const std::filesystem::path& path, ParamStore& params);

// Reads only the configuration string.
std::string read_checkpoint_config(const std::filesystem::path& path);

}  // namespace cart::ad
