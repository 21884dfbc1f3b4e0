#include "rarequery/tilestore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace rarequery {

namespace {

constexpr double kExtentTolerance = 1e-6;
constexpr double kIntegralTolerance = 1e-9;

int modality_rank(std::string_view name) {
    if (name == "thermal") return 0;
    if (name == "rgb") return 1;
    if (name == "lidar") return 2;
    return 3;
}

bool all_zero(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f; });
}

// Source index ranges and overlap weights for resampling one axis.
struct AxisWeights {
    std::vector<std::size_t> begin;
    std::vector<std::vector<double>> weights;
};

AxisWeights axis_weights(std::size_t in, std::size_t out) {
    AxisWeights aw;
    aw.begin.resize(out);
    aw.weights.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        const double lo = static_cast<double>(o) * scale;
        const double hi = static_cast<double>(o + 1) * scale;
        auto first = static_cast<std::size_t>(std::floor(lo));
        auto last = std::min(in, static_cast<std::size_t>(std::ceil(hi)));
        aw.begin[o] = first;
        double total = 0.0;
        for (std::size_t i = first; i < last; ++i) {
            const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
            aw.weights[o].push_back(std::max(0.0, overlap));
            total += aw.weights[o].back();
        }
        for (double& w : aw.weights[o]) w /= total;
    }
    return aw;
}

}  // namespace

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::thermal: return "thermal";
        case Modality::rgb: return "rgb";
        case Modality::lidar: return "lidar";
    }
    return "unknown";
}

Modality parse_modality(std::string_view name) {
    if (name == "thermal") return Modality::thermal;
    if (name == "rgb") return Modality::rgb;
    if (name == "lidar") return Modality::lidar;
    throw InvalidArgument("unknown modality '" + std::string(name) + "'");
}

int native_channels(Modality m) { return m == Modality::rgb ? 3 : 1; }

std::string_view to_string(Label l) {
    switch (l) {
        case Label::unlabeled: return "unlabeled";
        case Label::negative: return "negative";
        case Label::positive: return "positive";
    }
    return "unlabeled";
}

std::string_view to_string(LabelSource s) {
    switch (s) {
        case LabelSource::none: return "none";
        case LabelSource::ground_truth: return "ground_truth";
        case LabelSource::human: return "human";
        case LabelSource::simulated_oracle: return "simulated_oracle";
    }
    return "none";
}

Label parse_label(std::string_view s) {
    if (s == "unlabeled") return Label::unlabeled;
    if (s == "negative" || s == "0") return Label::negative;
    if (s == "positive" || s == "1") return Label::positive;
    throw InvalidArgument("unknown label value '" + std::string(s) + "'");
}

LabelSource parse_label_source(std::string_view s) {
    if (s == "none") return LabelSource::none;
    if (s == "ground_truth") return LabelSource::ground_truth;
    if (s == "human") return LabelSource::human;
    if (s == "simulated_oracle") return LabelSource::simulated_oracle;
    throw InvalidArgument("unknown label source '" + std::string(s) + "'");
}

void Orthomosaic::validate() const {
    if (!(resolution_m > 0.0)) throw InvalidArgument("orthomosaic resolution must be positive");
    if (height == 0 || width == 0) throw InvalidArgument("orthomosaic must be at least 1x1");
    if (channels != static_cast<std::size_t>(native_channels(modality)))
        throw InvalidArgument("orthomosaic '" + std::string(to_string(modality)) + "' has wrong channel count");
    if (pixels.size() != height * width * channels)
        throw InvalidArgument("orthomosaic pixel buffer does not match H x W x C");
    for (float v : pixels)
        if (!std::isfinite(v)) throw InvalidArgument("orthomosaic contains non-finite pixels");
}

float ModalityBlock::max_value() const {
    if (data.empty()) return 0.0f;
    return *std::max_element(data.begin(), data.end());
}

bool Tileset::has(std::string_view name) const {
    return std::any_of(modalities.begin(), modalities.end(), [&](const ModalityBlock& b) { return b.name == name; });
}

const ModalityBlock& Tileset::modality(std::string_view name) const {
    for (const auto& b : modalities)
        if (b.name == name) return b;
    throw InvalidArgument("tileset has no modality '" + std::string(name) + "'");
}

ModalityBlock& Tileset::modality(std::string_view name) {
    return const_cast<ModalityBlock&>(std::as_const(*this).modality(name));
}

LabelCounts Tileset::counts() const {
    LabelCounts c;
    for (const auto& t : tiles) {
        switch (t.label) {
            case Label::positive: ++c.positives; break;
            case Label::negative: ++c.negatives; break;
            case Label::unlabeled: ++c.unlabeled; break;
        }
    }
    return c;
}

std::vector<std::string> Tileset::modality_names() const {
    std::vector<std::string> names;
    for (const auto& b : modalities) names.push_back(b.name);
    return names;
}

void Tileset::validate() const {
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (tiles[i].id != i) throw InvalidArgument("tile ids are not dense");
        const bool unlabeled = tiles[i].label == Label::unlabeled;
        if (unlabeled != (tiles[i].label_source == LabelSource::none))
            throw InvalidArgument("label source must be none exactly when the tile is unlabeled");
    }
    for (const auto& b : modalities) {
        if (b.data.size() != tiles.size() * b.block_size())
            throw InvalidArgument("modality '" + b.name + "' block buffer does not match tile count");
    }
}

std::size_t tiles_per_axis(double length_m, double interval_m, double stride_m) {
    if (!(interval_m > 0.0) || !(stride_m > 0.0)) throw GeometryError("interval and stride must be positive");
    if (length_m + kIntegralTolerance < interval_m) return 0;
    const double steps = std::max(0.0, (length_m - interval_m) / stride_m);
    return static_cast<std::size_t>(std::floor(steps + kIntegralTolerance)) + 1;
}

std::size_t pixels_per_interval(double length_m, double resolution_m, std::string_view what) {
    const double ratio = length_m / resolution_m;
    const double rounded = std::round(ratio);
    if (rounded < 1.0 || std::abs(ratio - rounded) > kIntegralTolerance * std::max(1.0, ratio)) {
        std::ostringstream os;
        os << "length " << length_m << " m is not an integer number of pixels for modality '" << what
           << "' at " << resolution_m << " m/px";
        throw GeometryError(os.str());
    }
    return static_cast<std::size_t>(rounded);
}

Tileset crop_orthomosaics(std::span<const Orthomosaic> mosaics, const CropGeometry& geometry,
                          const MiddenRegistry& registry) {
    if (mosaics.empty()) throw InvalidArgument("no orthomosaics to crop");
    if (!(geometry.interval_m > 0.0) || !(geometry.stride_m > 0.0))
        throw GeometryError("interval and stride must be positive");
    if (geometry.stride_m > geometry.interval_m) throw GeometryError("stride must not exceed interval");

    std::vector<const Orthomosaic*> ordered;
    for (const auto& m : mosaics) {
        m.validate();
        for (const auto* o : ordered)
            if (o->modality == m.modality)
                throw InvalidArgument("duplicate modality '" + std::string(to_string(m.modality)) + "'");
        ordered.push_back(&m);
    }
    std::sort(ordered.begin(), ordered.end(),
              [](const Orthomosaic* a, const Orthomosaic* b) { return a->modality < b->modality; });

    const Orthomosaic& ref = *ordered.front();
    bool mismatch = false;
    for (const auto* m : ordered) {
        mismatch |= std::abs(m->origin.x - ref.origin.x) > kExtentTolerance ||
                    std::abs(m->origin.y - ref.origin.y) > kExtentTolerance ||
                    std::abs(m->extent_x() - ref.extent_x()) > kExtentTolerance ||
                    std::abs(m->extent_y() - ref.extent_y()) > kExtentTolerance;
    }
    if (mismatch) {
        std::ostringstream os;
        os << "orthomosaic extents differ:";
        for (const auto* m : ordered)
            os << " " << to_string(m->modality) << "=[" << m->origin.x << "," << m->origin.x + m->extent_x()
               << ")x[" << m->origin.y << "," << m->origin.y + m->extent_y() << ")";
        throw ExtentMismatch(os.str());
    }

    struct Plan {
        std::size_t side;
        std::size_t stride;
    };
    std::vector<Plan> plans;
    for (const auto* m : ordered) {
        const auto name = to_string(m->modality);
        plans.push_back({pixels_per_interval(geometry.interval_m, m->resolution_m, name),
                         pixels_per_interval(geometry.stride_m, m->resolution_m, name)});
    }

    const std::size_t nx = tiles_per_axis(ref.extent_x(), geometry.interval_m, geometry.stride_m);
    const std::size_t ny = tiles_per_axis(ref.extent_y(), geometry.interval_m, geometry.stride_m);
    const std::size_t n = nx * ny;

    Tileset ts;
    ts.crop = geometry;
    ts.provenance.registry_count = registry.centers.size();
    ts.tiles.resize(n);
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            Tile& t = ts.tiles[j * nx + i];
            t.id = static_cast<TileId>(j * nx + i);
            t.center = {ref.origin.x + static_cast<double>(i) * geometry.stride_m + geometry.interval_m / 2.0,
                        ref.origin.y + static_cast<double>(j) * geometry.stride_m + geometry.interval_m / 2.0};
            t.label = Label::negative;
            t.label_source = LabelSource::ground_truth;
        }
    }

    // Half-open tile squares: a center on the low edge belongs to the tile.
    auto covering = [&](double c, double origin, std::size_t count) {
        std::pair<std::size_t, std::size_t> range{1, 0};
        const double rel = c - origin;
        const double lo = std::floor((rel - geometry.interval_m) / geometry.stride_m);
        const double hi = std::floor(rel / geometry.stride_m);
        if (hi < 0 || count == 0) return range;
        const auto first = static_cast<std::size_t>(std::max(0.0, lo));
        const auto last = std::min(count - 1, static_cast<std::size_t>(hi));
        range = {first, last};
        return range;
    };
    for (const auto& c : registry.centers) {
        const auto [ilo, ihi] = covering(c.x, ref.origin.x, nx);
        const auto [jlo, jhi] = covering(c.y, ref.origin.y, ny);
        for (std::size_t j = jlo; j <= jhi && jlo <= jhi; ++j) {
            const double y0 = ref.origin.y + static_cast<double>(j) * geometry.stride_m;
            if (!(y0 <= c.y && c.y < y0 + geometry.interval_m)) continue;
            for (std::size_t i = ilo; i <= ihi && ilo <= ihi; ++i) {
                const double x0 = ref.origin.x + static_cast<double>(i) * geometry.stride_m;
                if (x0 <= c.x && c.x < x0 + geometry.interval_m) ts.tiles[j * nx + i].label = Label::positive;
            }
        }
    }

    for (std::size_t k = 0; k < ordered.size(); ++k) {
        const Orthomosaic& m = *ordered[k];
        const Plan& p = plans[k];
        ModalityBlock b;
        b.name = std::string(to_string(m.modality));
        b.resolution_m = m.resolution_m;
        b.height = p.side;
        b.width = p.side;
        b.channels = m.channels;
        b.data.resize(n * b.block_size());
        const std::size_t row_len = p.side * m.channels;
        for (std::size_t j = 0; j < ny; ++j) {
            for (std::size_t i = 0; i < nx; ++i) {
                float* out = b.data.data() + (j * nx + i) * b.block_size();
                for (std::size_t r = 0; r < p.side; ++r) {
                    const float* src = &m.pixels[((j * p.stride + r) * m.width + i * p.stride) * m.channels];
                    std::copy(src, src + row_len, out + r * row_len);
                }
            }
        }
        ts.modalities.push_back(std::move(b));
    }
    return ts;
}

Tileset downshift_thermal(Tileset ts) {
    ModalityBlock& thermal = ts.modality("thermal");
    for (auto& t : ts.tiles) {
        auto block = thermal.block(t.id);
        if (block.empty()) continue;
        const float lo = *std::min_element(block.begin(), block.end());
        if (lo == 0.0f) continue;
        for (float& v : block) v -= lo;
        t.thermal_shift += lo;
    }
    return ts;
}

Tileset filter_zero_tiles(Tileset ts) {
    const ModalityBlock& thermal = ts.modality("thermal");
    const ModalityBlock* rgb = ts.has("rgb") ? &ts.modality("rgb") : nullptr;

    std::vector<bool> keep(ts.size(), true);
    for (const auto& t : ts.tiles) {
        // All-zero before downshift <=> nothing was subtracted and the block is still all zero.
        if (t.thermal_shift == 0.0f && all_zero(thermal.block(t.id))) {
            keep[t.id] = false;
            ts.removal_log.push_back({t.id, t.center, "thermal all-zero"});
        } else if (rgb != nullptr && all_zero(rgb->block(t.id))) {
            keep[t.id] = false;
            ts.removal_log.push_back({t.id, t.center, "rgb all-zero"});
        }
    }

    for (auto& b : ts.modalities) {
        const std::size_t bs = b.block_size();
        std::size_t out = 0;
        for (std::size_t id = 0; id < ts.size(); ++id) {
            if (!keep[id]) continue;
            if (out != id) std::copy_n(b.data.begin() + id * bs, bs, b.data.begin() + out * bs);
            ++out;
        }
        b.data.resize(out * bs);
    }
    std::vector<Tile> kept;
    kept.reserve(ts.size());
    for (auto& t : ts.tiles) {
        if (!keep[t.id]) continue;
        t.id = static_cast<TileId>(kept.size());
        kept.push_back(t);
    }
    ts.tiles = std::move(kept);
    return ts;
}

std::string fused_name(std::span<const std::string> sources) {
    std::vector<std::string> sorted(sources.begin(), sources.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const std::string& a, const std::string& b) {
        return modality_rank(a) < modality_rank(b);
    });
    std::string name;
    for (const auto& s : sorted) {
        if (!name.empty()) name += '+';
        name += s;
    }
    return name;
}

std::vector<float> resample_block(std::span<const float> block, std::size_t height, std::size_t width,
                                  std::size_t channels, std::size_t out_height, std::size_t out_width,
                                  std::size_t out_channels) {
    if (channels != 1 && channels != out_channels)
        throw InvalidArgument("cannot broadcast a multi-channel block to a different channel count");
    const AxisWeights rows = axis_weights(height, out_height);
    const AxisWeights cols = axis_weights(width, out_width);
    std::vector<float> out(out_height * out_width * out_channels);
    for (std::size_t r = 0; r < out_height; ++r) {
        for (std::size_t c = 0; c < out_width; ++c) {
            for (std::size_t ch = 0; ch < out_channels; ++ch) {
                const std::size_t src_ch = channels == 1 ? 0 : ch;
                double acc = 0.0;
                for (std::size_t a = 0; a < rows.weights[r].size(); ++a) {
                    const std::size_t sr = rows.begin[r] + a;
                    for (std::size_t b = 0; b < cols.weights[c].size(); ++b) {
                        const std::size_t sc = cols.begin[c] + b;
                        acc += rows.weights[r][a] * cols.weights[c][b] * block[(sr * width + sc) * channels + src_ch];
                    }
                }
                out[(r * out_width + c) * out_channels + ch] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

Tileset fuse_modalities(Tileset ts, std::span<const std::string> sources, std::span<const double> weights) {
    if (sources.empty()) throw InvalidArgument("fusion needs at least one modality");
    std::vector<double> w(weights.begin(), weights.end());
    if (w.empty()) w.assign(sources.size(), 1.0 / static_cast<double>(sources.size()));
    if (w.size() != sources.size()) throw InvalidArgument("one fusion weight per modality is required");
    double sum = 0.0;
    for (double x : w) {
        if (!(x >= 0.0)) throw InvalidArgument("fusion weights must be nonnegative");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("fusion weights must sum to 1");

    std::vector<const ModalityBlock*> blocks;
    for (const auto& s : sources) {
        if (!ts.has(s)) throw InvalidArgument("unknown modality '" + s + "' requested for fusion");
        blocks.push_back(&ts.modality(s));
    }
    const std::string name = fused_name(sources);
    if (sources.size() == 1) return ts;

    const ModalityBlock* grid = nullptr;
    if (ts.has("thermal")) {
        grid = &ts.modality("thermal");
    } else {
        for (const auto* b : blocks)
            if (grid == nullptr || b->height < grid->height) grid = b;
    }
    std::size_t out_channels = 1;
    for (const auto* b : blocks) out_channels = std::max(out_channels, b->channels);

    ModalityBlock fused;
    fused.name = name;
    fused.height = grid->height;
    fused.width = grid->width;
    fused.channels = out_channels;
    fused.resolution_m = ts.crop.interval_m / static_cast<double>(grid->height);
    fused.data.assign(ts.size() * fused.block_size(), 0.0f);

    std::vector<double> acc(fused.block_size());
    for (const auto& t : ts.tiles) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            const ModalityBlock& b = *blocks[k];
            const auto res = resample_block(b.block(t.id), b.height, b.width, b.channels, fused.height,
                                            fused.width, out_channels);
            for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += w[k] * res[p];
        }
        auto out = fused.block(t.id);
        for (std::size_t p = 0; p < acc.size(); ++p) out[p] = static_cast<float>(acc[p]);
    }

    auto existing = std::find_if(ts.modalities.begin(), ts.modalities.end(),
                                 [&](const ModalityBlock& b) { return b.name == name; });
    if (existing != ts.modalities.end())
        *existing = std::move(fused);
    else
        ts.modalities.push_back(std::move(fused));
    return ts;
}

}  // namespace rarequery
