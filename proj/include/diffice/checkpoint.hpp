#pragma once

// Checkpoint format: one little-endian float32 blob per tensor plus a JSON
// manifest listing {name, shape, dtype, file, sha256} for every tensor.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffice/tensor.hpp"
#include "json.hpp"

namespace diffice {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const fs::path& path);

/// Content hash of a tensor's float32 little-endian encoding (shape included).
std::string tensor_hash(const ad::Tensor<float>& t);

struct NamedTensor {
    std::string name;
    ad::Tensor<float> tensor;
};

/// Writes `dir/manifest.json` and `dir/<name>.f32`; returns the manifest's hash.
std::string save_checkpoint(const fs::path& dir, const std::vector<NamedTensor>& tensors,
                            const json& metadata = json::object());

struct LoadedCheckpoint {
    std::vector<NamedTensor> tensors;
    json metadata;
    std::string manifest_hash;
};

/// Verifies every blob against its recorded hash and shape.
LoadedCheckpoint load_checkpoint(const fs::path& dir);

/// Serialized JSON with sorted keys and fixed indentation, so equal documents
/// hash equally.
std::string canonical_dump(const json& j);
void write_text(const fs::path& path, std::string_view text);
std::string read_text(const fs::path& path);

}  // namespace diffice
