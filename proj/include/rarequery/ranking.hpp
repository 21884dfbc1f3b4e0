#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rarequery/tilestore.hpp"

namespace rarequery {

enum class MetricKind { max_thermal_pixel, custom };

struct RankingSpec {
    MetricKind metric = MetricKind::max_thermal_pixel;
    // nullopt resolves to the maximum metric value over the tileset.
    std::optional<double> target;
    // Rank on pre-downshift thermal values instead (sensitivity studies).
    bool use_preshift = false;
    std::function<double(const Tileset&, TileId)> custom;
};

struct RankOrder {
    std::vector<TileId> order;  // highest priority first
    std::vector<double> metric;  // indexed by tile id
    double target = 0.0;
    std::string tie_break = "tile-id-ascending";
};

/// Per-tile metric values, indexed by tile id.
std::vector<double> compute_metric(const Tileset& tileset, const RankingSpec& spec);

/// Copy of the tileset with metric_value set on every tile.
Tileset with_metric(Tileset tileset, const RankingSpec& spec);

double resolve_target(const RankingSpec& spec, std::span<const double> metric);

/// Sorts ids by |metric - target| ascending, ties by id ascending.
RankOrder rank_by_distance(std::span<const double> metric, double target, std::span<const TileId> ids);

/// Ranks every tile using its stored metric_value.
RankOrder rank_tiles(const Tileset& tileset, const RankingSpec& spec);

struct BayesPoint {
    double threshold = 0.0;
    std::size_t n_at_least = 0;  // tiles with MPV >= t
    std::size_t m_t = 0;         // positive tiles with MPV >= t
    double p_conditional = 0.0;  // m_t / n_at_least
    double p_bayes = 0.0;        // m_t * P(pos) / (m * P(MPV >= t))
    // Exact rational agreement of the two forms on the underlying counts.
    bool forms_agree = false;
};

struct BayesCurve {
    std::size_t total = 0;
    std::size_t positives = 0;
    double base_rate = 0.0;
    std::vector<BayesPoint> points;
    std::vector<std::string> notes;
};

/// Conditional positive rate given MPV >= t for each threshold. Requires a
/// fully labeled tileset; thresholds with no tile at or above them are omitted
/// with a note.
BayesCurve bayes_positive_curve(const Tileset& tileset, std::span<const double> metric,
                                std::span<const double> thresholds);

/// `count` evenly spaced nearest-rank quantiles of the values (0 through 1).
std::vector<double> quantile_thresholds(std::span<const double> values, std::size_t count = 50);

/// Nearest-rank percentile, q in [0, 1].
double percentile(std::span<const double> values, double q);

}  // namespace rarequery
