#include "rarequery/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace rarequery {

namespace {

using Rng = std::mt19937_64;

Rng stream(std::uint64_t seed, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt)};
    return Rng(seq);
}

double uniform(Rng& rng, Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); }

/// Smooth value noise on a lattice with the given spacing, unit variance lattice values.
class ValueNoise {
public:
    ValueNoise(Rng& rng, double extent_m, double spacing_m) : spacing_(spacing_m) {
        n_ = static_cast<std::size_t>(std::ceil(extent_m / spacing_m)) + 2;
        std::normal_distribution<double> normal;
        lattice_.resize(n_ * n_);
        for (double& v : lattice_) v = normal(rng);
    }

    double operator()(double x, double y) const {
        const double gx = x / spacing_, gy = y / spacing_;
        const auto ix = std::min(static_cast<std::size_t>(std::floor(gx)), n_ - 2);
        const auto iy = std::min(static_cast<std::size_t>(std::floor(gy)), n_ - 2);
        const double fx = smooth(gx - static_cast<double>(ix)), fy = smooth(gy - static_cast<double>(iy));
        const double a = lattice_[iy * n_ + ix], b = lattice_[iy * n_ + ix + 1];
        const double c = lattice_[(iy + 1) * n_ + ix], d = lattice_[(iy + 1) * n_ + ix + 1];
        return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
    }

private:
    static double smooth(double t) { return t * t * (3 - 2 * t); }
    double spacing_;
    std::size_t n_ = 0;
    std::vector<double> lattice_;
};

Orthomosaic blank(Modality m, double extent_m, double resolution_m) {
    Orthomosaic o;
    o.modality = m;
    o.resolution_m = resolution_m;
    o.height = o.width = pixels_per_interval(extent_m, resolution_m, to_string(m));
    o.channels = static_cast<std::size_t>(native_channels(m));
    o.pixels.assign(o.height * o.width * o.channels, 0.0f);
    return o;
}

double pixel_center(std::size_t index, double res) { return (static_cast<double>(index) + 0.5) * res; }

// Visits every pixel whose center lies within radius of (cx, cy).
template <typename Fn>
void for_disc(const Orthomosaic& o, double cx, double cy, double radius, Fn&& fn) {
    const double res = o.resolution_m;
    const auto lo = [&](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(std::floor((v - radius) / res), 0.0, static_cast<double>(n)));
    };
    const auto hi = [&](double v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp(std::ceil((v + radius) / res), 0.0, static_cast<double>(n)));
    };
    for (std::size_t r = lo(cy, o.height); r < hi(cy, o.height); ++r) {
        const double dy = pixel_center(r, res) - cy;
        for (std::size_t c = lo(cx, o.width); c < hi(cx, o.width); ++c) {
            const double dx = pixel_center(c, res) - cx;
            const double d2 = dx * dx + dy * dy;
            if (d2 <= radius * radius) fn(r, c, d2);
        }
    }
}

void add_gaussian(Orthomosaic& o, double cx, double cy, double sigma, double amplitude) {
    for_disc(o, cx, cy, 4.0 * sigma, [&](std::size_t r, std::size_t c, double d2) {
        o.at(r, c) += static_cast<float>(amplitude * std::exp(-d2 / (2.0 * sigma * sigma)));
    });
}

void paint_patch(Orthomosaic& o, double cx, double cy, double radius, const double (&color)[3]) {
    for_disc(o, cx, cy, radius + 1.0, [&](std::size_t r, std::size_t c, double d2) {
        const double w = 1.0 / (1.0 + std::exp((std::sqrt(d2) - radius) / 0.25));
        for (std::size_t ch = 0; ch < 3; ++ch)
            o.at(r, c, ch) = static_cast<float>((1.0 - w) * o.at(r, c, ch) + w * color[ch]);
    });
}

std::size_t count_for_density(double per_ha, double extent_m) {
    return static_cast<std::size_t>(std::llround(per_ha * extent_m * extent_m / 10000.0));
}

double void_width(const SiteConfig& cfg) { return cfg.void_fraction * cfg.extent_m; }

MiddenRegistry place_middens(const SiteConfig& cfg) {
    Rng rng = stream(cfg.seed, 1);
    MiddenRegistry reg;
    if (cfg.positive_count == 0) return reg;
    const double margin = std::min(cfg.planned_crop.interval_m, cfg.extent_m / 4.0) + void_width(cfg);
    const Range span{margin, cfg.extent_m - std::min(cfg.planned_crop.interval_m, cfg.extent_m / 4.0)};
    if (span.hi <= span.lo) throw InfeasibleSite("extent too small to place positives");

    std::vector<Point2> clusters;
    for (std::size_t k = 0; k < std::max<std::size_t>(1, cfg.cluster_count); ++k)
        clusters.push_back({uniform(rng, span), uniform(rng, span)});

    std::normal_distribution<double> spread(0.0, cfg.cluster_spread_m);
    std::uniform_int_distribution<std::size_t> pick(0, clusters.size() - 1);
    auto separated = [&](Point2 p) {
        return std::all_of(reg.centers.begin(), reg.centers.end(), [&](Point2 q) {
            return std::hypot(p.x - q.x, p.y - q.y) >= cfg.min_separation_m;
        });
    };
    auto inside = [&](Point2 p) { return p.x >= span.lo && p.x < span.hi && p.y >= span.lo && p.y < span.hi; };
    for (std::size_t i = 0; i < cfg.positive_count; ++i) {
        Point2 p{};
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const Point2& c = clusters[pick(rng)];
            p = {c.x + spread(rng), c.y + spread(rng)};
            placed = inside(p) && separated(p);
        }
        for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
            p = {uniform(rng, span), uniform(rng, span)};
            placed = separated(p);
        }
        if (!placed) throw InfeasibleSite("could not place positives with the requested minimum separation");
        reg.centers.push_back(p);
    }
    return reg;
}

Orthomosaic render_thermal(const SiteConfig& cfg, const MiddenRegistry& reg) {
    Rng rng = stream(cfg.seed, 2);
    Orthomosaic o = blank(Modality::thermal, cfg.extent_m, cfg.thermal_resolution_m);
    ValueNoise field(rng, cfg.extent_m, cfg.background_scale_m);
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (std::size_t r = 0; r < o.height; ++r)
        for (std::size_t c = 0; c < o.width; ++c)
            o.at(r, c) = static_cast<float>(cfg.thermal_base +
                                            cfg.background_amplitude * field(pixel_center(c, o.resolution_m),
                                                                             pixel_center(r, o.resolution_m)) +
                                            noise(rng));
    for (const auto& p : reg.centers) {
        const double sigma = uniform(rng, cfg.warm_sigma_m);
        add_gaussian(o, p.x, p.y, sigma, uniform(rng, cfg.warm_contrast));
    }
    const Range anywhere{0.0, cfg.extent_m};
    for (std::size_t i = 0, n = count_for_density(cfg.warm_clutter_per_ha, cfg.extent_m); i < n; ++i) {
        const double x = uniform(rng, anywhere), y = uniform(rng, anywhere);
        const double sigma = uniform(rng, cfg.clutter_sigma_m);
        add_gaussian(o, x, y, sigma, uniform(rng, cfg.clutter_contrast));
    }
    const auto void_cols = static_cast<std::size_t>(std::round(void_width(cfg) / o.resolution_m));
    for (std::size_t r = 0; r < o.height; ++r)
        for (std::size_t c = 0; c < std::min(void_cols, o.width); ++c) o.at(r, c) = 0.0f;
    return o;
}

Orthomosaic render_rgb(const SiteConfig& cfg, const MiddenRegistry& reg) {
    Rng rng = stream(cfg.seed, 3);
    Orthomosaic o = blank(Modality::rgb, cfg.extent_m, cfg.rgb_resolution_m);
    const double grass[3] = {0.35, 0.42, 0.22};
    std::vector<ValueNoise> fields;
    for (int ch = 0; ch < 3; ++ch) fields.emplace_back(rng, cfg.extent_m, 30.0);
    std::normal_distribution<double> noise(0.0, 0.02);
    for (std::size_t r = 0; r < o.height; ++r) {
        const double y = pixel_center(r, o.resolution_m);
        for (std::size_t c = 0; c < o.width; ++c) {
            const double x = pixel_center(c, o.resolution_m);
            for (std::size_t ch = 0; ch < 3; ++ch)
                o.at(r, c, ch) = static_cast<float>(grass[ch] + 0.05 * fields[ch](x, y) + noise(rng));
        }
    }
    const Range anywhere{0.0, cfg.extent_m};
    for (std::size_t i = 0, n = count_for_density(cfg.rgb_patch_per_ha, cfg.extent_m); i < n; ++i) {
        const double x = uniform(rng, anywhere), y = uniform(rng, anywhere);
        // Bare soil, shrubs and rocks; some are brownish distractors.
        const double color[3] = {uniform(rng, {0.25, 0.6}), uniform(rng, {0.25, 0.5}), uniform(rng, {0.15, 0.4})};
        const double radius = uniform(rng, {1.5, 4.0});
        paint_patch(o, x, y, radius, color);
    }
    for (const auto& p : reg.centers) {
        const double color[3] = {uniform(rng, {0.40, 0.46}), uniform(rng, {0.30, 0.35}), uniform(rng, {0.20, 0.24})};
        paint_patch(o, p.x, p.y, uniform(rng, {1.5, 2.5}), color);
    }
    for (float& v : o.pixels) v = std::clamp(v, 0.001f, 1.0f);
    const auto void_rows = static_cast<std::size_t>(std::round(void_width(cfg) / o.resolution_m));
    std::fill(o.pixels.begin(), o.pixels.begin() + static_cast<std::ptrdiff_t>(std::min(void_rows, o.height) * o.width * 3), 0.0f);
    return o;
}

Orthomosaic render_lidar(const SiteConfig& cfg, const MiddenRegistry& reg) {
    Rng rng = stream(cfg.seed, 4);
    Orthomosaic o = blank(Modality::lidar, cfg.extent_m, cfg.lidar_resolution_m);
    ValueNoise terrain(rng, cfg.extent_m, 60.0);
    std::normal_distribution<double> noise(0.0, 0.03);
    for (std::size_t r = 0; r < o.height; ++r)
        for (std::size_t c = 0; c < o.width; ++c)
            o.at(r, c) = static_cast<float>(5.0 + 1.5 * terrain(pixel_center(c, o.resolution_m),
                                                                pixel_center(r, o.resolution_m)) +
                                            noise(rng));
    for (const auto& p : reg.centers) {
        const double sigma = uniform(rng, {1.5, 2.5});
        add_gaussian(o, p.x, p.y, sigma, uniform(rng, {0.2, 0.4}));
    }
    const Range anywhere{0.0, cfg.extent_m};
    for (std::size_t i = 0, n = count_for_density(cfg.termite_mounds_per_ha, cfg.extent_m); i < n; ++i) {
        const double x = uniform(rng, anywhere), y = uniform(rng, anywhere);
        const double sigma = uniform(rng, {0.7, 1.2});
        add_gaussian(o, x, y, sigma, uniform(rng, {1.0, 2.0}));
    }
    return o;
}

}  // namespace

Site generate_synthetic_site(const SiteConfig& cfg) {
    if (!(cfg.extent_m > 0.0)) throw InvalidArgument("extent must be positive");
    if (cfg.modalities.empty()) throw InvalidArgument("at least one modality is required");
    if (cfg.positive_count > 0) {
        const std::size_t per_axis =
            tiles_per_axis(cfg.extent_m, cfg.planned_crop.interval_m, cfg.planned_crop.stride_m);
        const double per_center = std::pow(std::ceil(cfg.planned_crop.interval_m / cfg.planned_crop.stride_m), 2);
        const double tiles = static_cast<double>(per_axis * per_axis);
        const double rate = static_cast<double>(cfg.positive_count) * per_center / std::max(1.0, tiles);
        if (tiles == 0.0 || rate > cfg.imbalance_target) {
            std::ostringstream os;
            os << "infeasible imbalance: " << cfg.positive_count << " positives over " << tiles
               << " tiles gives a positive-tile rate of about " << rate << " (target " << cfg.imbalance_target
               << "); the extent must yield at least "
               << std::ceil(static_cast<double>(cfg.positive_count) * per_center / cfg.imbalance_target) << " tiles";
            throw InfeasibleSite(os.str());
        }
    }

    Site site;
    site.config = cfg;
    site.registry = place_middens(cfg);
    std::vector<Modality> mods = cfg.modalities;
    std::sort(mods.begin(), mods.end());
    mods.erase(std::unique(mods.begin(), mods.end()), mods.end());
    for (Modality m : mods) {
        switch (m) {
            case Modality::thermal: site.mosaics.push_back(render_thermal(cfg, site.registry)); break;
            case Modality::rgb: site.mosaics.push_back(render_rgb(cfg, site.registry)); break;
            case Modality::lidar: site.mosaics.push_back(render_lidar(cfg, site.registry)); break;
        }
    }
    return site;
}

SiteConfig benchmark_site_config(std::uint64_t seed) {
    SiteConfig cfg;
    cfg.seed = seed;
    cfg.extent_m = 1880.0;  // 94 x 94 non-overlapping 20 m tiles
    cfg.positive_count = 80;
    cfg.imbalance_target = 0.0095;
    cfg.planned_crop = {20.0, 20.0};
    cfg.thermal_resolution_m = 0.5;
    cfg.rgb_resolution_m = 1.0;
    cfg.lidar_resolution_m = 1.0;
    cfg.modalities = {Modality::thermal, Modality::rgb};
    return cfg;
}

}  // namespace rarequery
