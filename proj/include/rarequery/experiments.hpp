#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rarequery/engine.hpp"
#include "rarequery/synthetic.hpp"

namespace rarequery {

struct SplitSpec {
    double positive_train_fraction = 0.8;
    // Passive protocol samples as many train negatives as train positives;
    // active mode keeps every negative not set aside for testing.
    bool balance_train = false;
    std::uint64_t seed = 0;
};

struct Split {
    std::vector<TileId> train;  // sorted
    std::vector<TileId> test;   // sorted, balanced
};

/// Train positives = round(fraction * P) clamped to [1, P - 1]; the test set
/// holds the remaining positives and as many randomly chosen negatives. For a
/// given seed the test set does not depend on balance_train.
Split make_split(const Tileset& tileset, const SplitSpec& spec);

struct ConfusionMetrics {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double accuracy = 0.0;
    std::optional<double> precision;  // undefined when nothing is predicted positive
    std::optional<double> recall;     // undefined when there are no positives
    std::optional<double> f1;         // undefined when tp + fp + fn == 0
};

ConfusionMetrics confusion_metrics(std::span<const bool> predicted, std::span<const bool> actual);

struct ExperimentConfig {
    ClassifierConfig classifier = [] {
        ClassifierConfig c;
        c.learning_rate = 1e-2;
        return c;
    }();
    std::size_t budget = 500;
    std::size_t batch_size = 10;
    std::vector<std::size_t> checkpoints{50, 100, 150, 200, 250, 300, 350, 400, 450, 500};
    std::size_t trials = 30;
    std::uint64_t seed = 0;
    double positive_train_fraction = 0.8;
    RankingSpec ranking;
    std::size_t threads = 0;  // 0 = hardware concurrency
};

struct CurvePoint {
    std::size_t budget = 0;       // checkpoint
    std::size_t labels_used = 0;  // actual labels when recorded
    std::optional<double> accuracy;
    std::size_t positives_found = 0;
    double found_fraction = 0.0;  // of the positives available in the pool
};

struct TrialResult {
    std::string strategy;  // "passive:thermal" or Strategy::id()
    std::size_t trial = 0;
    std::uint64_t seed = 0;
    double learning_rate = 0.0;
    ConfusionMetrics metrics;
    std::vector<CurvePoint> curve;
    std::size_t pool_positives = 0;
    std::size_t labels_used = 0;
    std::size_t positives_found = 0;
};

/// Seed of trial t in a benchmark seeded with `base`.
std::uint64_t trial_seed(std::uint64_t base, std::size_t trial);

/// One classifier trained on the balanced passive split and evaluated on its test set.
TrialResult run_passive_trial(const Tileset& tileset, const FeatureMap& features, const std::string& modality,
                              const ExperimentConfig& config, std::uint64_t seed);

/// One active session on the active split of `seed`, answered by the ground-truth oracle.
TrialResult run_active_trial(std::shared_ptr<const Tileset> tileset, const FeatureMap& features,
                             const Strategy& strategy, const ExperimentConfig& config, std::uint64_t seed,
                             std::size_t trial = 0);

struct MeanSem {
    double mean = 0.0;
    double sem = 0.0;  // sample standard deviation / sqrt(n)
    std::size_t n = 0;
    std::size_t excluded = 0;  // undefined values left out
};

MeanSem summarize(std::span<const double> values);
MeanSem summarize(std::span<const std::optional<double>> values);

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;  // two-sided
};

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

struct AggregateRow {
    std::string strategy;
    std::size_t budget = 0;
    MeanSem accuracy;
    MeanSem found_fraction;
    MeanSem positives_found;
};

struct Significance {
    std::string a, b;
    std::size_t budget = 0;
    WelchResult test;
};

struct BenchmarkResult {
    std::vector<TrialResult> trials;  // ordered by (strategy, trial)
    std::vector<AggregateRow> aggregate;
    std::vector<Significance> significance;
};

/// Runs every strategy (plus the passive reference for each listed modality)
/// on `config.trials` paired seeds: all strategies in one trial share the split
/// and session seed. Trials run in parallel; results are ordered deterministically.
BenchmarkResult run_active_benchmark(std::shared_ptr<const Tileset> tileset, std::span<const Strategy> strategies,
                                     std::span<const std::string> passive_modalities, const ExperimentConfig& config);

/// Aggregate rows for one strategy from its trials (checkpoint curves, or the
/// final metrics at budget 0 for passive trials).
std::vector<AggregateRow> aggregate_trials(std::span<const TrialResult> trials);

struct LabelingTime {
    std::uint64_t seconds = 0;
    std::uint64_t minutes = 0;  // rounded to nearest
    std::uint64_t hours = 0;    // rounded to nearest
    std::string display;        // "250 mins" or "81 hours"
};

LabelingTime labeling_time(std::uint64_t labels, std::uint64_t seconds_per_label = 30);

nlohmann::ordered_json trial_json(const TrialResult& trial);
TrialResult trial_from_json(const nlohmann::json& j);
void write_raw_trials(const std::filesystem::path& path, std::span<const TrialResult> trials);
std::vector<TrialResult> read_raw_trials(const std::filesystem::path& path);
void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> rows);
void write_curves_csv(const std::filesystem::path& path, std::span<const TrialResult> trials);

/// Session context used by the CLI and the service: on a fully labeled tileset
/// the pool is the active-mode train split and the test set is held out;
/// otherwise every tile is in the pool and there is no test set.
std::shared_ptr<const SessionContext> prepare_session_context(std::shared_ptr<const Tileset> tileset,
                                                              const Strategy& strategy, const RankingSpec& ranking,
                                                              const Architecture& arch, std::uint64_t split_seed,
                                                              double positive_train_fraction = 0.8);

/// Parameters of one interactive or oracle-driven session, shared by the CLI
/// `active` command and the labeling service so both build identical sessions.
struct SessionRequest {
    Strategy strategy;
    std::size_t budget = 500;
    std::size_t batch_size = 10;
    std::uint64_t seed = 0;
    double learning_rate = 1e-2;
    std::size_t epochs = 10;
};

SessionConfig make_session_config(const SessionRequest& request);

/// Context from prepare_session_context (split seeded by request.seed) and a fresh session.
std::unique_ptr<ActiveSession> open_session(std::shared_ptr<const Tileset> tileset, const SessionRequest& request);

/// Crop, drop sensor-void tiles, downshift thermal, store the ranking metric and
/// append any requested fusions (each entry like "thermal+rgb").
Tileset build_tileset(const Site& site, const CropGeometry& geometry, std::span<const std::string> fusions = {});

}  // namespace rarequery
