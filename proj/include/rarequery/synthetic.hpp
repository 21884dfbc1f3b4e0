#pragma once

#include <cstdint>
#include <vector>

#include "rarequery/tilestore.hpp"

namespace rarequery {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Parameters of a generated site. Thermal values are uncalibrated counts on a
/// roughly unit scale so that fused blends stay comparable with RGB.
struct SiteConfig {
    std::uint64_t seed = 0;
    double extent_m = 500.0;
    std::size_t positive_count = 10;
    // Largest acceptable fraction of positive tiles after cropping with planned_crop.
    double imbalance_target = 0.02;
    CropGeometry planned_crop{20.0, 5.0};
    std::vector<Modality> modalities{Modality::thermal, Modality::rgb, Modality::lidar};
    double thermal_resolution_m = 0.5;
    double rgb_resolution_m = 0.05;
    double lidar_resolution_m = 0.25;

    // Spatial layout of positives: clustered around cluster_count centers.
    std::size_t cluster_count = 6;
    double cluster_spread_m = 80.0;
    double min_separation_m = 30.0;

    // Thermal field.
    double thermal_base = 0.4;
    double background_amplitude = 0.08;
    double background_scale_m = 40.0;
    double noise_sigma = 0.01;
    Range warm_contrast{0.12, 0.35};
    Range warm_sigma_m{1.0, 1.6};
    double warm_clutter_per_ha = 2.0;
    Range clutter_contrast{0.04, 0.28};
    Range clutter_sigma_m{2.5, 5.0};

    // RGB field.
    double rgb_patch_per_ha = 3.0;
    // LiDAR field.
    double termite_mounds_per_ha = 1.0;

    // Fraction of the extent (a strip along the low-x edge for thermal and the
    // low-y edge for RGB) left as a zero-valued sensor void.
    double void_fraction = 0.0;
};

struct Site {
    std::vector<Orthomosaic> mosaics;
    MiddenRegistry registry;
    SiteConfig config;
};

Site generate_synthetic_site(const SiteConfig& config);

/// Desk-scale reference benchmark: ~8,800 tiles of 20 m x 20 m cropped with
/// stride equal to the interval and ~0.9% positive tiles.
SiteConfig benchmark_site_config(std::uint64_t seed);

}  // namespace rarequery
