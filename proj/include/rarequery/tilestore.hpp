#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rarequery/error.hpp"

namespace rarequery {

using TileId = std::uint32_t;

enum class Modality { thermal, rgb, lidar };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);
int native_channels(Modality m);

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

/// One georeferenced raster per modality. Pixel (row, col) covers the world
/// square [origin.x + col*res, +res) x [origin.y + row*res, +res); rows grow
/// along +y in local meters.
struct Orthomosaic {
    Modality modality = Modality::thermal;
    double resolution_m = 0.5;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    Point2 origin;
    std::vector<float> pixels;  // row-major H x W x C

    double extent_x() const { return static_cast<double>(width) * resolution_m; }
    double extent_y() const { return static_cast<double>(height) * resolution_m; }
    float& at(std::size_t row, std::size_t col, std::size_t ch = 0) {
        return pixels[(row * width + col) * channels + ch];
    }
    float at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
        return pixels[(row * width + col) * channels + ch];
    }
    void validate() const;
};

struct CropGeometry {
    double interval_m = 20.0;
    double stride_m = 5.0;
    friend bool operator==(const CropGeometry&, const CropGeometry&) = default;
};

/// World-meter centers of the positive objects (middens).
struct MiddenRegistry {
    std::vector<Point2> centers;
};

enum class Label : std::uint8_t { unlabeled, negative, positive };
enum class LabelSource : std::uint8_t { none, ground_truth, human, simulated_oracle };

std::string_view to_string(Label l);
std::string_view to_string(LabelSource s);
Label parse_label(std::string_view s);
LabelSource parse_label_source(std::string_view s);

struct Tile {
    TileId id = 0;
    Point2 center;
    Label label = Label::unlabeled;
    LabelSource label_source = LabelSource::none;
    double metric_value = 0.0;
    // Cumulative amount subtracted from the thermal block by downshift_thermal.
    float thermal_shift = 0.0f;
    friend bool operator==(const Tile&, const Tile&) = default;
};

/// Pixel blocks of one modality for every tile, stored contiguously
/// (tile-major, then row-major H x W x C) to match the on-disk blob.
struct ModalityBlock {
    std::string name;  // "thermal", "rgb", "lidar" or a fused name such as "thermal+rgb"
    double resolution_m = 0.0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<float> data;

    std::size_t block_size() const { return height * width * channels; }
    std::size_t tile_count() const { return block_size() == 0 ? 0 : data.size() / block_size(); }
    std::span<const float> block(TileId id) const {
        return {data.data() + static_cast<std::size_t>(id) * block_size(), block_size()};
    }
    std::span<float> block(TileId id) {
        return {data.data() + static_cast<std::size_t>(id) * block_size(), block_size()};
    }
    float max_value() const;
    friend bool operator==(const ModalityBlock&, const ModalityBlock&) = default;
};

struct LabelCounts {
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t unlabeled = 0;
    friend bool operator==(const LabelCounts&, const LabelCounts&) = default;
};

struct Provenance {
    std::optional<std::uint64_t> seed;
    std::string source_digest;
    std::size_t registry_count = 0;
    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct RemovedTile {
    TileId original_id = 0;
    Point2 center;
    std::string reason;
    friend bool operator==(const RemovedTile&, const RemovedTile&) = default;
};

struct Tileset {
    std::vector<Tile> tiles;
    std::vector<ModalityBlock> modalities;
    CropGeometry crop;
    Provenance provenance;
    std::vector<RemovedTile> removal_log;

    std::size_t size() const { return tiles.size(); }
    bool has(std::string_view modality) const;
    const ModalityBlock& modality(std::string_view name) const;
    ModalityBlock& modality(std::string_view name);
    LabelCounts counts() const;
    std::vector<std::string> modality_names() const;
    void validate() const;

    friend bool operator==(const Tileset&, const Tileset&) = default;
};

// ---- cropping -------------------------------------------------------------

/// Number of crop positions along one axis: floor((L - I) / S) + 1 when L >= I.
std::size_t tiles_per_axis(double length_m, double interval_m, double stride_m);

/// Side of a crop block in pixels; throws GeometryError unless interval/res is integral.
std::size_t pixels_per_interval(double length_m, double resolution_m, std::string_view what);

Tileset crop_orthomosaics(std::span<const Orthomosaic> mosaics, const CropGeometry& geometry,
                          const MiddenRegistry& registry);

// ---- per-tile preprocessing ------------------------------------------------

/// Subtracts each tile's thermal minimum so that every thermal block has a
/// minimum of exactly 0. Idempotent; the shift is accumulated on the tile.
Tileset downshift_thermal(Tileset tileset);

/// Removes tiles whose pre-downshift thermal block or RGB block is entirely
/// zero (sensor voids) and re-densifies ids.
Tileset filter_zero_tiles(Tileset tileset);

std::string fused_name(std::span<const std::string> sources);

/// Appends a fused modality: sources resampled to the thermal grid (or the
/// coarsest source if thermal is absent) and blended with the given weights.
Tileset fuse_modalities(Tileset tileset, std::span<const std::string> sources,
                        std::span<const double> weights = {});

/// Area-weighted box resampling of one H x W x C block to side x side, with
/// single-channel inputs broadcast to out_channels.
std::vector<float> resample_block(std::span<const float> block, std::size_t height,
                                  std::size_t width, std::size_t channels, std::size_t out_height,
                                  std::size_t out_width, std::size_t out_channels);

}  // namespace rarequery
