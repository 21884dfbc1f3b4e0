#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>
#include <unistd.h>

#include "rarequery/experiments.hpp"
#include "rarequery/tileset_io.hpp"

using namespace rarequery;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const Tileset> toy_tileset(std::size_t n, std::size_t every) {
    auto ts = std::make_shared<Tileset>();
    ModalityBlock th{"thermal", 0.5, 4, 4, 1, {}};
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> u(0.0f, 0.3f);
    for (std::size_t i = 0; i < n; ++i) {
        Tile t;
        t.id = static_cast<TileId>(i);
        t.label = i % every == 0 ? Label::positive : Label::negative;
        t.label_source = LabelSource::ground_truth;
        ts->tiles.push_back(t);
        for (int p = 0; p < 16; ++p) th.data.push_back(u(rng) + (t.label == Label::positive && p == 6 ? 1.0f : 0.0f));
    }
    ts->modalities = {th};
    *ts = with_metric(*ts, {});
    return ts;
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.classifier.architecture = {2, 4};
    c.budget = 30;
    c.batch_size = 5;
    c.checkpoints = {10, 20, 30};
    c.trials = 3;
    c.seed = 4;
    c.threads = 2;
    return c;
}

}  // namespace

TEST_CASE("split sizes, balance and disjointness (property)") {
    for (std::size_t every : {3, 5, 9, 20}) {
        const auto ts = toy_tileset(200, every);
        const std::size_t P = ts->counts().positives;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const Split active = make_split(*ts, {0.8, false, seed});
            const Split passive = make_split(*ts, {0.8, true, seed});
            const auto train_pos = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(0.8 * P)), 1, P - 1);
            CHECK(active.test == passive.test);
            std::size_t tp = 0, tn = 0;
            for (TileId id : active.test) (ts->tiles[id].label == Label::positive ? tp : tn)++;
            CHECK(tp == P - train_pos);
            CHECK(tn == tp);
            std::size_t pp = 0;
            for (TileId id : passive.train) pp += ts->tiles[id].label == Label::positive;
            CHECK(pp == train_pos);
            CHECK(passive.train.size() == 2 * train_pos);
            CHECK(active.train.size() + active.test.size() == ts->size());
            std::vector<TileId> both;
            std::set_intersection(active.train.begin(), active.train.end(), active.test.begin(), active.test.end(),
                                  std::back_inserter(both));
            CHECK(both.empty());
            CHECK(std::includes(active.train.begin(), active.train.end(), passive.train.begin(), passive.train.end()));
        }
    }
}

TEST_CASE("split rejects unusable tilesets") {
    const auto one = toy_tileset(10, 100);
    CHECK_THROWS_AS(make_split(*one, {0.8, false, 0}), InvalidArgument);
    const auto ts = toy_tileset(10, 2);
    CHECK_THROWS_AS(make_split(*ts, {1.0, false, 0}), InvalidArgument);
}

TEST_CASE("confusion metrics and undefined ratios") {
    const bool pred[] = {true, true, false, false, true, false};
    const bool act[] = {true, false, false, true, true, false};
    const auto m = confusion_metrics(pred, act);
    CHECK(m.tp == 2);
    CHECK(m.fp == 1);
    CHECK(m.tn == 2);
    CHECK(m.fn == 1);
    CHECK(m.accuracy == doctest::Approx(4.0 / 6));
    CHECK(*m.precision == doctest::Approx(2.0 / 3));
    CHECK(*m.recall == doctest::Approx(2.0 / 3));
    CHECK(*m.f1 == doctest::Approx(2.0 / 3));
    const bool none[] = {false, false};
    const bool neg[] = {false, false};
    const auto z = confusion_metrics(none, neg);
    CHECK_FALSE(z.precision);
    CHECK_FALSE(z.recall);
    CHECK_FALSE(z.f1);
    CHECK(z.accuracy == 1.0);
}

TEST_CASE("mean and standard error") {
    const std::vector<double> v{0.91, 0.88, 0.93, 0.86, 0.9, 0.94};
    const auto s = summarize(v);
    CHECK(s.mean == doctest::Approx(0.9033333333333333));
    CHECK(s.sem == doctest::Approx(0.012292725943057185).epsilon(1e-12));
    const std::vector<std::optional<double>> o{1.0, std::nullopt, 3.0};
    const auto so = summarize(std::span<const std::optional<double>>(o));
    CHECK(so.n == 2);
    CHECK(so.excluded == 1);
    CHECK(so.mean == 2.0);
    CHECK(summarize(std::vector<double>{5.0}).sem == 0.0);
}

TEST_CASE("Welch t-test matches reference values") {
    const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10};
    auto w = welch_t_test(a, b);
    CHECK(w.t == doctest::Approx(-1.8973665961010275).epsilon(1e-12));
    CHECK(w.p == doctest::Approx(0.10753119493062718).epsilon(1e-9));
    const std::vector<double> c{0.91, 0.88, 0.93, 0.86, 0.9, 0.94}, d{0.83, 0.85, 0.8, 0.9};
    w = welch_t_test(c, d);
    CHECK(w.t == doctest::Approx(2.3959118570998323).epsilon(1e-12));
    CHECK(w.p == doctest::Approx(0.061439517169931596).epsilon(1e-9));
    const std::vector<double> same{0.5, 0.5, 0.5};
    CHECK(welch_t_test(same, same).p == 1.0);
    CHECK_THROWS_AS(welch_t_test(std::vector<double>{1.0}, same), InvalidArgument);
}

TEST_CASE("labeling time") {
    auto t = labeling_time(9772);
    CHECK(t.hours == 81);
    CHECK(t.display == "81 hours");
    t = labeling_time(500);
    CHECK(t.minutes == 250);
    CHECK(t.display == "250 mins");
    CHECK(labeling_time(1).minutes == 1);  // 30 s rounds half up
    CHECK(labeling_time(0).display == "0 mins");
}

TEST_CASE("benchmark is deterministic and independent of thread count") {
    const auto ts = toy_tileset(150, 6);
    const std::vector<Strategy> strategies{{StrategyKind::multimodal_single, {"thermal"}},
                                           {StrategyKind::random, {"thermal"}}};
    const std::vector<std::string> passive{"thermal"};
    ExperimentConfig cfg = small_config();
    const auto a = run_active_benchmark(ts, strategies, passive, cfg);
    cfg.threads = 1;
    const auto b = run_active_benchmark(ts, strategies, passive, cfg);
    REQUIRE(a.trials.size() == 9);
    for (std::size_t i = 0; i < a.trials.size(); ++i) CHECK(trial_json(a.trials[i]) == trial_json(b.trials[i]));
    CHECK(a.trials[0].strategy == "passive:thermal");
    CHECK(a.trials[3].strategy == "multimodal_single:thermal");
    // Paired trials share the split seed across arms.
    CHECK(a.trials[1].seed == a.trials[4].seed);
    CHECK(a.trials[4].seed == a.trials[7].seed);
    CHECK(a.significance.size() == 3);
    for (const auto& t : a.trials) {
        if (t.strategy.starts_with("passive")) continue;
        REQUIRE(t.curve.size() == 3);
        CHECK(t.curve.back().labels_used == 30);
        CHECK(t.labels_used == 30);
    }
}

TEST_CASE("aggregate rows match hand-computed means") {
    std::vector<TrialResult> trials(2);
    trials[0].strategy = trials[1].strategy = "x";
    trials[0].curve = {{10, 10, 0.5, 1, 0.25}, {20, 20, std::nullopt, 2, 0.5}};
    trials[1].curve = {{10, 10, 0.7, 3, 0.75}, {20, 20, 0.9, 4, 1.0}};
    const auto rows = aggregate_trials(trials);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].budget == 10);
    CHECK(rows[0].accuracy.mean == doctest::Approx(0.6));
    CHECK(rows[0].accuracy.sem == doctest::Approx(0.1));
    CHECK(rows[0].positives_found.mean == 2.0);
    CHECK(rows[1].accuracy.n == 1);
    CHECK(rows[1].accuracy.excluded == 1);
    CHECK(rows[1].found_fraction.mean == doctest::Approx(0.75));
}

TEST_CASE("raw trials round trip through JSON lines") {
    const auto ts = toy_tileset(120, 6);
    const std::vector<Strategy> strategies{{StrategyKind::positive_certainty, {"thermal"}}};
    ExperimentConfig cfg = small_config();
    cfg.trials = 2;
    const auto r = run_active_benchmark(ts, strategies, {}, cfg);
    const fs::path dir = fs::temp_directory_path() / ("rq_exp_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    write_raw_trials(dir / "raw.jsonl", r.trials);
    const auto back = read_raw_trials(dir / "raw.jsonl");
    REQUIRE(back.size() == r.trials.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(trial_json(back[i]) == trial_json(r.trials[i]));
    write_aggregate_csv(dir / "agg.csv", r.aggregate);
    const std::string csv = read_file(dir / "agg.csv");
    CHECK(csv.starts_with("strategy,budget,mean_acc,sem_acc,mean_found,sem_found,mean_positives,n,acc_excluded\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    fs::remove_all(dir);
}

TEST_CASE("session context uses the active split on labeled tilesets only") {
    const auto ts = toy_tileset(100, 5);
    const Strategy s{StrategyKind::multimodal_single, {"thermal"}};
    const auto ctx = prepare_session_context(ts, s, {}, {2, 4}, 3);
    const Split split = make_split(*ts, {0.8, false, 3});
    CHECK(ctx->pool == split.train);
    CHECK(ctx->test == split.test);
    auto unl = std::make_shared<Tileset>(*ts);
    for (auto& t : unl->tiles) {
        t.label = Label::unlabeled;
        t.label_source = LabelSource::none;
    }
    const auto ctx2 = prepare_session_context(unl, s, {}, {2, 4}, 3);
    CHECK(ctx2->pool.size() == 100);
    CHECK(ctx2->test.empty());
}
