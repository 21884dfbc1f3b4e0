#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rarequery/synthetic.hpp"
#include "rarequery/tilestore.hpp"

namespace rarequery {

inline constexpr std::uint32_t kTilesetFormatVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;

/// Writes manifest.json, labels.csv and one <modality>.f32 blob per modality.
void save_tileset(const Tileset& tileset, const std::filesystem::path& dir);

/// Throws VersionMismatch, TruncatedFile or DigestMismatch (all TilesetIoError).
Tileset load_tileset(const std::filesystem::path& dir);

/// Site directory written by `rarequery generate`: site.json, middens.csv and
/// one <modality>.raster per orthomosaic.
void save_site(const Site& site, const std::filesystem::path& dir);
Site load_site(const std::filesystem::path& dir);

/// Float32 blob with the "RQTS"-style header: magic, version u32, then the
/// u32 dimensions, then little-endian float32 payload.
struct BlobHeader {
    char magic[4] = {'R', 'Q', 'T', 'S'};
    std::uint32_t version = kTilesetFormatVersion;
    std::vector<std::uint32_t> dims;
};

std::string encode_blob(const BlobHeader& header, std::span<const float> payload);
/// Parses a blob expecting `dim_count` dimensions; the payload length must be
/// the product of the dimensions.
std::vector<float> decode_blob(const std::string& bytes, const char (&magic)[5], std::size_t dim_count,
                               std::vector<std::uint32_t>& dims, const std::string& what);

std::string sha256_hex(std::span<const std::string> chunks);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace rarequery
