#include "rarequery/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rarequery {

std::vector<double> compute_metric(const Tileset& ts, const RankingSpec& spec) {
    std::vector<double> metric(ts.size());
    if (spec.metric == MetricKind::custom) {
        if (!spec.custom) throw InvalidArgument("custom ranking metric has no function");
        for (const auto& t : ts.tiles) metric[t.id] = spec.custom(ts, t.id);
        return metric;
    }
    const ModalityBlock& thermal = ts.modality("thermal");
    for (const auto& t : ts.tiles) {
        const auto block = thermal.block(t.id);
        double mx = *std::max_element(block.begin(), block.end());
        if (spec.use_preshift) mx += t.thermal_shift;
        metric[t.id] = mx;
    }
    return metric;
}

Tileset with_metric(Tileset ts, const RankingSpec& spec) {
    const auto metric = compute_metric(ts, spec);
    for (auto& t : ts.tiles) t.metric_value = metric[t.id];
    return ts;
}

double resolve_target(const RankingSpec& spec, std::span<const double> metric) {
    if (spec.target) return *spec.target;
    if (metric.empty()) throw InvalidArgument("cannot resolve a dataset-max target on an empty tileset");
    return *std::max_element(metric.begin(), metric.end());
}

RankOrder rank_by_distance(std::span<const double> metric, double target, std::span<const TileId> ids) {
    if (!std::isfinite(target)) throw InvalidArgument("ranking target is unresolved");
    RankOrder r;
    r.metric.assign(metric.begin(), metric.end());
    r.target = target;
    r.order.assign(ids.begin(), ids.end());
    std::sort(r.order.begin(), r.order.end(), [&](TileId a, TileId b) {
        const double da = std::abs(metric[a] - target), db = std::abs(metric[b] - target);
        return da != db ? da < db : a < b;
    });
    return r;
}

RankOrder rank_tiles(const Tileset& ts, const RankingSpec& spec) {
    std::vector<double> metric(ts.size());
    std::vector<TileId> ids(ts.size());
    for (const auto& t : ts.tiles) {
        metric[t.id] = t.metric_value;
        ids[t.id] = t.id;
    }
    return rank_by_distance(metric, resolve_target(spec, metric), ids);
}

BayesCurve bayes_positive_curve(const Tileset& ts, std::span<const double> metric, std::span<const double> thresholds) {
    if (metric.size() != ts.size()) throw InvalidArgument("metric must have one value per tile");
    BayesCurve curve;
    curve.total = ts.size();
    for (const auto& t : ts.tiles) {
        if (t.label == Label::unlabeled) throw InvalidArgument("the Bayes diagnostic needs a fully labeled tileset");
        if (t.label == Label::positive) ++curve.positives;
    }
    if (curve.total == 0) return curve;
    const auto N = static_cast<unsigned __int128>(curve.total);
    const auto m = static_cast<unsigned __int128>(curve.positives);
    curve.base_rate = static_cast<double>(curve.positives) / static_cast<double>(curve.total);
    if (curve.positives == 0) curve.notes.push_back("no positive tiles: the factored form is undefined (m = 0)");

    for (double t : thresholds) {
        BayesPoint p;
        p.threshold = t;
        for (const auto& tile : ts.tiles) {
            if (metric[tile.id] < t) continue;
            ++p.n_at_least;
            if (tile.label == Label::positive) ++p.m_t;
        }
        if (p.n_at_least == 0) {
            curve.notes.push_back("threshold " + std::to_string(t) + " omitted: no tile has MPV >= t");
            continue;
        }
        const double n_t = static_cast<double>(p.n_at_least);
        p.p_conditional = static_cast<double>(p.m_t) / n_t;
        if (curve.positives > 0) {
            const double prior = static_cast<double>(curve.positives) / static_cast<double>(curve.total);
            const double evidence = n_t / static_cast<double>(curve.total);
            const double likelihood = static_cast<double>(p.m_t) / static_cast<double>(curve.positives);
            p.p_bayes = likelihood * prior / evidence;
            // Factored form as the exact fraction (m_t*m*N)/(m*n_t*N), cross-multiplied against m_t/n_t.
            const auto mt = static_cast<unsigned __int128>(p.m_t);
            const auto nt = static_cast<unsigned __int128>(p.n_at_least);
            const unsigned __int128 bayes_num = mt * m * N;
            const unsigned __int128 bayes_den = m * nt * N;
            p.forms_agree = bayes_num * nt == mt * bayes_den;
        } else {
            p.p_bayes = 0.0;
            p.forms_agree = p.m_t == 0;
        }
        curve.points.push_back(p);
    }
    return curve;
}

double percentile(std::span<const double> values, double q) {
    if (values.empty()) throw InvalidArgument("percentile of an empty set");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double rank = std::ceil(std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size()));
    const auto index = static_cast<std::size_t>(std::max(1.0, rank)) - 1;
    return sorted[std::min(index, sorted.size() - 1)];
}

std::vector<double> quantile_thresholds(std::span<const double> values, std::size_t count) {
    std::vector<double> out;
    if (values.empty() || count == 0) return out;
    for (std::size_t k = 0; k < count; ++k) {
        const double q = count == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(count - 1);
        out.push_back(percentile(values, q));
    }
    return out;
}

}  // namespace rarequery
