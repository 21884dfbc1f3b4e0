#include <doctest.h>

#include <boost/rational.hpp>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "rarequery/engine.hpp"

using namespace rarequery;
using Q = boost::rational<long long>;

namespace {

// n tiles with 4x4 thermal and rgb blocks; every `every`-th tile carries a hot spot.
std::shared_ptr<const Tileset> toy_tileset(std::size_t n, std::size_t every, std::uint32_t seed) {
    auto ts = std::make_shared<Tileset>();
    ModalityBlock th{"thermal", 0.5, 4, 4, 1, {}}, rgb{"rgb", 0.5, 4, 4, 3, {}};
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 0.3f);
    for (std::size_t i = 0; i < n; ++i) {
        Tile t;
        t.id = static_cast<TileId>(i);
        const bool pos = i % every == 0;
        t.label = pos ? Label::positive : Label::negative;
        t.label_source = LabelSource::ground_truth;
        ts->tiles.push_back(t);
        for (int p = 0; p < 16; ++p) th.data.push_back(u(rng) + (pos && p == 5 ? 1.0f : 0.0f));
        for (int p = 0; p < 48; ++p) rgb.data.push_back(u(rng) + (pos ? 0.2f : 0.0f));
    }
    ts->modalities = {th, rgb};
    *ts = with_metric(*ts, {});
    return ts;
}

std::shared_ptr<const SessionContext> toy_context(std::size_t n, std::size_t test_count = 0) {
    auto ts = toy_tileset(n, 7, 3);
    std::vector<TileId> pool, test;
    for (TileId id = 0; id < n; ++id) (id < test_count ? test : pool).push_back(id);
    const std::vector<std::string> mods{"thermal", "rgb"};
    return make_session_context(ts, mods, pool, test, {}, {2, 4});
}

SessionConfig config_for(StrategyKind kind, std::size_t budget, std::size_t batch, std::uint64_t seed) {
    SessionConfig c;
    c.strategy.kind = kind;
    if (kind == StrategyKind::multimodal_ensemble || kind == StrategyKind::disagree)
        c.strategy.modalities = {"thermal", "rgb"};
    c.budget = budget;
    c.batch_size = batch;
    c.seed = seed;
    c.classifier.learning_rate = 1e-2;
    c.classifier.architecture = {2, 4};
    return c;
}

class FailingLabeler : public Labeler {
public:
    std::vector<Label> label(std::span<const TileId>) override { throw LabelerFailure("labeler went away"); }
    LabelSource source() const override { return LabelSource::human; }
};

}  // namespace

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 4; ++s)
        for (std::uint64_t a = 0; a < 4; ++a)
            for (std::uint64_t b = 0; b < 4; ++b) seen.insert(derive_seed(s, a, b));
    CHECK(seen.size() == 64);
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}

TEST_CASE("strategy names and validation") {
    CHECK(parse_strategy("multimodal-ensemble") == StrategyKind::multimodal_ensemble);
    CHECK(parse_strategy("positive_certainty") == StrategyKind::positive_certainty);
    CHECK_THROWS_AS(parse_strategy("greedy"), InvalidArgument);
    Strategy s{StrategyKind::disagree, {"thermal"}};
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = {StrategyKind::random, {"thermal", "rgb"}};
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    CHECK(Strategy{StrategyKind::multimodal_ensemble, {"thermal", "rgb"}}.id() == "multimodal_ensemble:thermal,rgb");
}

TEST_CASE("ensemble score is the weighted sum of outputs") {
    const std::vector<double> p{0.2, 0.9, 0.5}, w{0.5, 0.25, 0.25};
    const auto s = ensemble_score(p, w);
    CHECK(s.positive == doctest::Approx(0.1 + 0.225 + 0.125));
    CHECK(s.negative == doctest::Approx(0.4 + 0.025 + 0.125));
    CHECK(s.positive + s.negative == doctest::Approx(1.0));
    CHECK_THROWS_AS(ensemble_score(p, std::vector<double>{1.0}), InvalidArgument);
}

TEST_CASE("initial weights are 1/M") {
    for (std::size_t m = 1; m <= 3; ++m) {
        const auto w = EnsembleWeights::uniform(m);
        for (double x : w.weights) CHECK(x == 1.0 / static_cast<double>(m));
    }
}

TEST_CASE("weight update matches exact rational counts (property)") {
    std::mt19937 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t models = 1 + rng() % 3, n = 1 + rng() % 25;
        std::vector<Label> labels(n);
        std::vector<std::vector<double>> preds(models, std::vector<double>(n));
        for (auto& l : labels) l = rng() % 4 == 0 ? Label::positive : Label::negative;
        for (auto& row : preds)
            for (auto& p : row) p = static_cast<double>(rng() % 5) / 4.0;  // includes exactly 0.5
        const auto prev = EnsembleWeights::uniform(models);
        const auto next = update_weights(prev, labels, preds);
        std::vector<long long> correct(models, 0);
        for (std::size_t m = 0; m < models; ++m)
            for (std::size_t i = 0; i < n; ++i)
                correct[m] += (preds[m][i] >= 0.5) == (labels[i] == Label::positive);
        const long long total = std::accumulate(correct.begin(), correct.end(), 0LL);
        for (std::size_t m = 0; m < models; ++m) {
            CHECK(next.correct[m] == static_cast<std::size_t>(correct[m]));
            const double expected = total == 0 ? prev.weights[m] : boost::rational_cast<double>(Q(correct[m], total));
            CHECK(next.weights[m] == expected);
        }
    }
}

TEST_CASE("all-wrong models keep the previous weights") {
    const EnsembleWeights prev{{0.3, 0.7}, {1, 2}};
    const std::vector<Label> labels{Label::positive, Label::negative};
    const std::vector<std::vector<double>> preds{{0.1, 0.9}, {0.2, 0.6}};
    const auto next = update_weights(prev, labels, preds);
    CHECK(next.weights == prev.weights);
    CHECK(next.total_correct() == 0);
}

TEST_CASE("sampled predictions follow the positive score") {
    Rng rng(4);
    std::size_t hits = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) hits += sample_prediction({0.7, 0.3}, rng);
    CHECK(std::abs(static_cast<double>(hits) / draws - 0.3) < 0.01);
    Rng r2(1);
    for (int i = 0; i < 100; ++i) {
        CHECK_FALSE(sample_prediction({1.0, 0.0}, r2));
        CHECK(sample_prediction({0.0, 1.0}, r2));
    }
}

TEST_CASE("first batch replays the ranked walk from the seed") {
    const auto ctx = toy_context(60);
    ActiveSession s(ctx, config_for(StrategyKind::multimodal_single, 30, 5, 99));
    const auto batch = s.pending_batch();
    // Fresh classifiers output exactly one half, so the walk keeps a tile when u < 0.5.
    Rng rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TileId> expected;
    std::size_t walk = 0;
    for (TileId id : ctx->rank.order) {
        if (expected.size() == 5) break;
        ++walk;
        if (u(rng) < 0.5) expected.push_back(id);
    }
    CHECK(batch == expected);
    CHECK(s.pending_batch() == batch);
    GroundTruthOracle oracle(ctx->tileset);
    const auto r = s.run_round(oracle);
    REQUIRE(r);
    CHECK(r->walk_length == walk);
    CHECK(r->padded == 0);
    CHECK(r->queried == expected);
}

TEST_CASE("exhausted walk pads with top-ranked unlabeled tiles") {
    const auto ctx = toy_context(12);
    ActiveSession s(ctx, config_for(StrategyKind::multimodal_single, 12, 10, 5));
    std::size_t walk = 0, padded = 0;
    const auto batch = s.assemble_batch(10, walk, padded);
    Rng rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TileId> kept;
    for (TileId id : ctx->rank.order)
        if (u(rng) < 0.5) kept.push_back(id);
    REQUIRE(kept.size() < 10);
    CHECK(walk == 12);
    CHECK(padded == 10 - kept.size());
    std::vector<TileId> expected = kept;
    for (TileId id : ctx->rank.order) {
        if (expected.size() == 10) break;
        if (std::find(kept.begin(), kept.end(), id) == kept.end()) expected.push_back(id);
    }
    CHECK(batch == expected);
}

TEST_CASE("session invariants hold for every strategy (property)") {
    const auto ctx = toy_context(90, 14);
    const StrategyKind kinds[] = {StrategyKind::multimodal_single, StrategyKind::multimodal_ensemble,
                                  StrategyKind::random,           StrategyKind::uncertainty,
                                  StrategyKind::positive_certainty, StrategyKind::disagree};
    for (StrategyKind k : kinds) {
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
            CAPTURE(to_string(k));
            ActiveSession s(ctx, config_for(k, 37, 6, seed));
            GroundTruthOracle oracle(ctx->tileset);
            s.run_to_budget(oracle);
            CHECK(s.finished());
            CHECK(s.labels_used() == 37);
            std::set<TileId> seen;
            std::size_t pos = 0, total = 0;
            for (const auto& r : s.log()) {
                CHECK(r.queried.size() <= 6);
                total += r.queried.size();
                CHECK(r.labels_used == total);
                for (std::size_t i = 0; i < r.queried.size(); ++i) {
                    const TileId id = r.queried[i];
                    CHECK(seen.insert(id).second);
                    CHECK(id >= 14);  // test tiles are never queried
                    CHECK(r.labels[i] == ctx->tileset->tiles[id].label);
                    pos += r.labels[i] == Label::positive;
                }
                CHECK(r.positives_found == pos);
                double wsum = 0;
                for (double w : r.weights) wsum += w;
                CHECK(wsum == doctest::Approx(1.0));
                REQUIRE(r.test_accuracy);
            }
            CHECK(total == 37);
            CHECK(s.log().back().queried.size() == 1);
            CHECK_FALSE(s.run_round(oracle));
            CHECK(s.pending_batch().empty());
        }
    }
}

TEST_CASE("sessions are deterministic per seed") {
    const auto ctx = toy_context(50, 8);
    GroundTruthOracle oracle(ctx->tileset);
    ActiveSession a(ctx, config_for(StrategyKind::multimodal_ensemble, 20, 5, 7));
    ActiveSession b(ctx, config_for(StrategyKind::multimodal_ensemble, 20, 5, 7));
    a.run_to_budget(oracle);
    b.run_to_budget(oracle);
    CHECK(run_log_text(a) == run_log_text(b));
    CHECK(a.snapshot() == b.snapshot());
}

TEST_CASE("budget larger than the pool stops when the pool is exhausted") {
    const auto ctx = toy_context(20, 5);
    ActiveSession s(ctx, config_for(StrategyKind::random, 100, 4, 1));
    GroundTruthOracle oracle(ctx->tileset);
    s.run_to_budget(oracle);
    CHECK(s.labels_used() == 15);
    CHECK(s.unlabeled_in_pool() == 0);
    CHECK(s.finished());
}

TEST_CASE("training set is balanced from labeled tiles") {
    const auto ctx = toy_context(70);
    ActiveSession s(ctx, config_for(StrategyKind::random, 40, 40, 2));
    GroundTruthOracle oracle(ctx->tileset);
    s.run_round(oracle);
    std::size_t pos = 0;
    for (const auto& e : s.labeled()) pos += e.label == Label::positive;
    REQUIRE(pos > 0);
    const auto t = s.select_training_set();
    std::size_t tp = 0;
    for (TileId id : t) {
        CHECK(s.is_labeled(id));
        tp += ctx->tileset->tiles[id].label == Label::positive;
    }
    CHECK(tp == pos);
    CHECK(t.size() == 2 * pos);
}

TEST_CASE("baselines rank by their documented keys with id tie break") {
    const auto ctx = toy_context(40);
    GroundTruthOracle oracle(ctx->tileset);
    for (StrategyKind k : {StrategyKind::uncertainty, StrategyKind::positive_certainty, StrategyKind::disagree}) {
        ActiveSession s(ctx, config_for(k, 20, 8, 3));
        s.run_round(oracle);  // trained models give non-trivial outputs
        std::vector<std::pair<double, TileId>> keyed;
        for (TileId id : ctx->pool) {
            if (s.is_labeled(id)) continue;
            double key = 0;
            if (k == StrategyKind::uncertainty) key = std::abs(s.score_positive(id) - 0.5);
            if (k == StrategyKind::positive_certainty) key = 1.0 - s.score_positive(id);
            if (k == StrategyKind::disagree) {
                const auto& f0 = *ctx->features.at("thermal");
                const auto& f1 = *ctx->features.at("rgb");
                key = -std::abs(predict_proba(s.models()[0], f0.row(id)) - predict_proba(s.models()[1], f1.row(id)));
            }
            keyed.emplace_back(key, id);
        }
        std::sort(keyed.begin(), keyed.end());
        std::vector<TileId> expected;
        for (std::size_t i = 0; i < 8; ++i) expected.push_back(keyed[i].second);
        CHECK(s.pending_batch() == expected);
    }
}

TEST_CASE("random baseline draws distinct unlabeled tiles") {
    const auto ctx = toy_context(30);
    ActiveSession s(ctx, config_for(StrategyKind::random, 30, 30, 8));
    auto b = s.pending_batch();
    std::sort(b.begin(), b.end());
    CHECK(b == ctx->pool);
}

TEST_CASE("a failing labeler leaves the session unchanged") {
    const auto ctx = toy_context(40, 5);
    ActiveSession s(ctx, config_for(StrategyKind::multimodal_ensemble, 20, 5, 4));
    GroundTruthOracle oracle(ctx->tileset);
    s.run_round(oracle);
    const auto before = s.snapshot();
    FailingLabeler bad;
    CHECK_THROWS_AS(s.run_round(bad), LabelerFailure);
    CHECK(s.snapshot() == before);
    CHECK(s.round() == 1);
}

TEST_CASE("submit_labels requires exactly the pending batch") {
    const auto ctx = toy_context(40);
    ActiveSession s(ctx, config_for(StrategyKind::random, 20, 5, 4));
    const std::vector<Label> five(5, Label::negative);
    CHECK_THROWS_AS(s.submit_labels(std::vector<TileId>{0, 1, 2, 3, 4}, five, LabelSource::human), InvalidArgument);
    const auto batch = s.pending_batch();
    std::vector<TileId> wrong = batch;
    wrong[0] = wrong[1];
    CHECK_THROWS_AS(s.submit_labels(wrong, five, LabelSource::human), InvalidArgument);
    std::vector<Label> missing = five;
    missing[2] = Label::unlabeled;
    CHECK_THROWS_AS(s.submit_labels(batch, missing, LabelSource::human), InvalidArgument);
    // Any order of the pending ids is accepted.
    std::vector<TileId> reversed(batch.rbegin(), batch.rend());
    const auto& r = s.submit_labels(reversed, five, LabelSource::human);
    CHECK(r.queried == batch);
    CHECK(s.labeled().front().source == LabelSource::human);
}

TEST_CASE("model reset between rounds restores the initial snapshot") {
    const auto ctx = toy_context(40);
    ActiveSession s(ctx, config_for(StrategyKind::multimodal_single, 20, 5, 12));
    const std::vector<double> initial = *s.models()[0].initial_snapshot;
    CHECK(s.models()[0].parameters == initial);
    GroundTruthOracle oracle(ctx->tileset);
    s.run_round(oracle);
    CHECK(*s.models()[0].initial_snapshot == initial);
    CHECK(reset(s.models()[0]).parameters == initial);
}

TEST_CASE("run log document") {
    const auto ctx = toy_context(30, 4);
    ActiveSession s(ctx, config_for(StrategyKind::multimodal_single, 10, 5, 2));
    GroundTruthOracle oracle(ctx->tileset);
    s.run_to_budget(oracle);
    const auto j = run_log_json(s);
    CHECK(j["strategy"] == "multimodal_single");
    CHECK(j["rounds"].size() == 2);
    CHECK(j["labels_used"] == 10);
    CHECK(j["pool_size"] == 26);
    CHECK(j["finished"] == true);
    const std::string text = run_log_text(s);
    CHECK(text.back() == '\n');
    CHECK(nlohmann::ordered_json::parse(text) == j);
}
