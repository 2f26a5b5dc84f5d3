#include "diffice/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace diffice {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256: digest failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

namespace {

std::string blob_bytes(const ad::Tensor<float>& t) {
    std::string bytes(static_cast<std::size_t>(t.numel()) * sizeof(float), '\0');
    std::memcpy(bytes.data(), t.data().data(), bytes.size());
    return bytes;
}

}  // namespace

std::string tensor_hash(const ad::Tensor<float>& t) {
    return sha256_hex(ad::to_string(t.shape()) + blob_bytes(t));
}

std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

void write_text(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string save_checkpoint(const fs::path& dir, const std::vector<NamedTensor>& tensors, const json& metadata) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "diffice-checkpoint/1";
    manifest["metadata"] = metadata;
    manifest["tensors"] = json::array();
    for (const auto& nt : tensors) {
        const std::string file = nt.name + ".f32";
        write_text(dir / file, blob_bytes(nt.tensor));
        manifest["tensors"].push_back({{"name", nt.name},
                                       {"shape", nt.tensor.shape()},
                                       {"dtype", "float32"},
                                       {"file", file},
                                       {"sha256", tensor_hash(nt.tensor)}});
    }
    const std::string text = canonical_dump(manifest);
    write_text(dir / "manifest.json", text);
    return sha256_hex(text);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw std::runtime_error("missing checkpoint manifest: " + mpath.string());
    const std::string text = read_text(mpath);
    const json manifest = json::parse(text);
    LoadedCheckpoint out;
    out.metadata = manifest.value("metadata", json::object());
    out.manifest_hash = sha256_hex(text);
    for (const auto& entry : manifest.at("tensors")) {
        if (entry.at("dtype") != "float32") throw std::runtime_error("unsupported dtype in " + mpath.string());
        const auto shape = entry.at("shape").get<ad::Shape>();
        const std::string bytes = read_text(dir / entry.at("file").get<std::string>());
        if (static_cast<std::int64_t>(bytes.size()) != ad::numel(shape) * static_cast<std::int64_t>(sizeof(float))) {
            throw std::runtime_error("blob size mismatch for tensor " + entry.at("name").get<std::string>());
        }
        std::vector<float> data(static_cast<std::size_t>(ad::numel(shape)));
        std::memcpy(data.data(), bytes.data(), bytes.size());
        auto t = ad::Tensor<float>::from_data(shape, std::move(data));
        if (tensor_hash(t) != entry.at("sha256").get<std::string>()) {
            throw std::runtime_error("hash mismatch for tensor " + entry.at("name").get<std::string>());
        }
        out.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
    }
    return out;
}

}  // namespace diffice
