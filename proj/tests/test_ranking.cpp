#include <doctest.h>

#include <algorithm>
#include <random>

#include "rarequery/ranking.hpp"

using namespace rarequery;

namespace {

Tileset labeled_tileset(const std::vector<double>& maxes, const std::vector<bool>& positive) {
    Tileset ts;
    ModalityBlock b;
    b.name = "thermal";
    b.resolution_m = 1.0;
    b.height = 2;
    b.width = 2;
    for (std::size_t i = 0; i < maxes.size(); ++i) {
        Tile t;
        t.id = static_cast<TileId>(i);
        t.label = positive[i] ? Label::positive : Label::negative;
        t.label_source = LabelSource::ground_truth;
        ts.tiles.push_back(t);
        const float m = static_cast<float>(maxes[i]);
        b.data.insert(b.data.end(), {0.0f, m / 2, m, m / 3});
    }
    ts.modalities.push_back(b);
    return ts;
}

}  // namespace

TEST_CASE("metric is the maximum thermal pixel, optionally before the downshift") {
    Tileset ts = labeled_tileset({1.0, 3.0, 2.0}, {false, true, false});
    ts.tiles[2].thermal_shift = 5.0f;
    CHECK(compute_metric(ts, {}) == std::vector<double>{1.0, 3.0, 2.0});
    RankingSpec pre;
    pre.use_preshift = true;
    CHECK(compute_metric(ts, pre) == std::vector<double>{1.0, 3.0, 7.0});
    RankingSpec custom;
    custom.metric = MetricKind::custom;
    custom.custom = [](const Tileset&, TileId id) { return -static_cast<double>(id); };
    CHECK(compute_metric(ts, custom) == std::vector<double>{0.0, -1.0, -2.0});
    custom.custom = nullptr;
    CHECK_THROWS_AS(compute_metric(ts, custom), InvalidArgument);
}

TEST_CASE("rank by distance to target with id tie break") {
    const std::vector<double> metric{5.0, 1.0, 3.0, 5.0, 4.0};
    const std::vector<TileId> ids{0, 1, 2, 3, 4};
    auto r = rank_by_distance(metric, 5.0, ids);
    CHECK(r.order == std::vector<TileId>{0, 3, 4, 2, 1});
    r = rank_by_distance(metric, 3.5, ids);
    // Distances 1.5, 2.5, 0.5, 1.5, 0.5.
    CHECK(r.order == std::vector<TileId>{2, 4, 0, 3, 1});
    CHECK_THROWS_AS(rank_by_distance(metric, std::nan(""), ids), InvalidArgument);
}

TEST_CASE("default target is the dataset maximum") {
    Tileset ts = with_metric(labeled_tileset({1.0, 9.0, 2.0, 9.0}, {false, true, false, false}), {});
    const auto r = rank_tiles(ts, {});
    CHECK(r.target == 9.0);
    CHECK(r.order == std::vector<TileId>{1, 3, 2, 0});
    RankingSpec s;
    s.target = 0.0;
    CHECK(rank_tiles(ts, s).order == std::vector<TileId>{0, 2, 1, 3});
}

TEST_CASE("rank order is a permutation sorted by distance (property)") {
    std::mt19937 rng(5);
    std::uniform_int_distribution<int> u(0, 20);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> metric(1 + rng() % 40);
        for (auto& m : metric) m = u(rng) / 4.0;
        std::vector<TileId> ids(metric.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TileId>(i);
        const double target = u(rng) / 4.0;
        const auto r = rank_by_distance(metric, target, ids);
        auto sorted = r.order;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == ids);
        for (std::size_t k = 1; k < r.order.size(); ++k) {
            const double a = std::abs(metric[r.order[k - 1]] - target), b = std::abs(metric[r.order[k]] - target);
            CHECK((a < b || (a == b && r.order[k - 1] < r.order[k])));
        }
    }
}

TEST_CASE("Bayes curve matches directly counted frequencies") {
    std::mt19937 rng(8);
    std::vector<double> maxes(300);
    std::vector<bool> pos(300);
    for (std::size_t i = 0; i < maxes.size(); ++i) {
        pos[i] = rng() % 25 == 0;
        maxes[i] = (rng() % 100) / 10.0 + (pos[i] ? 3.0 : 0.0);
    }
    const Tileset ts = labeled_tileset(maxes, pos);
    const auto metric = compute_metric(ts, {});
    const auto thresholds = quantile_thresholds(metric, 20);
    const auto curve = bayes_positive_curve(ts, metric, thresholds);
    const auto m = static_cast<std::size_t>(std::count(pos.begin(), pos.end(), true));
    CHECK(curve.positives == m);
    REQUIRE(curve.points.size() == thresholds.size());
    for (const auto& p : curve.points) {
        std::size_t n = 0, k = 0;
        for (std::size_t i = 0; i < maxes.size(); ++i) {
            if (static_cast<double>(static_cast<float>(maxes[i])) >= p.threshold) {
                ++n;
                k += pos[i];
            }
        }
        CHECK(p.n_at_least == n);
        CHECK(p.m_t == k);
        CHECK(p.forms_agree);
        CHECK(p.p_bayes == doctest::Approx(static_cast<double>(k) / static_cast<double>(n)).epsilon(1e-12));
    }
    // Lowest threshold covers everything, so the conditional rate is the base rate.
    CHECK(curve.points.front().p_conditional == doctest::Approx(curve.base_rate));
}

TEST_CASE("Bayes curve edge cases") {
    const Tileset none = labeled_tileset({1.0, 2.0}, {false, false});
    const std::vector<double> metric{1.0, 2.0}, th{1.5, 3.0};
    const auto c = bayes_positive_curve(none, metric, th);
    CHECK(c.points.size() == 1);
    CHECK(c.notes.size() == 2);
    Tileset unl = none;
    unl.tiles[0].label = Label::unlabeled;
    CHECK_THROWS_AS(bayes_positive_curve(unl, metric, th), InvalidArgument);
}

TEST_CASE("nearest-rank percentile") {
    const std::vector<double> v{5, 1, 4, 2, 3};
    CHECK(percentile(v, 0.0) == 1);
    CHECK(percentile(v, 0.2) == 1);
    CHECK(percentile(v, 0.21) == 2);
    CHECK(percentile(v, 0.5) == 3);
    CHECK(percentile(v, 1.0) == 5);
    CHECK(quantile_thresholds(v, 3) == std::vector<double>{1, 3, 5});
}
