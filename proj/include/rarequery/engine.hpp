#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rarequery/classifier.hpp"
#include "rarequery/ranking.hpp"
#include "rarequery/tilestore.hpp"

namespace rarequery {

using Rng = std::mt19937_64;

/// Independent stream seed for (seed, a, b); used for per-model and per-trial seeding.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

enum class StrategyKind { multimodal_single, multimodal_ensemble, random, uncertainty, positive_certainty, disagree };

std::string_view to_string(StrategyKind k);
/// Accepts hyphenated ("multimodal-ensemble") and underscored spellings.
StrategyKind parse_strategy(std::string_view name);

struct Strategy {
    StrategyKind kind = StrategyKind::multimodal_single;
    // One entry per classifier; each names the modality (possibly fused) it sees.
    std::vector<std::string> modalities{"thermal"};

    std::string id() const;
    void validate() const;
};

// ---- scoring and weights ---------------------------------------------------

struct ClassScore {
    double negative = 0.5;
    double positive = 0.5;
};

/// score_i = sum_m weight_m * output_{m,i} for the binary classes.
ClassScore ensemble_score(std::span<const double> positive_outputs, std::span<const double> weights);

struct EnsembleWeights {
    std::vector<double> weights;
    std::vector<std::size_t> correct;

    static EnsembleWeights uniform(std::size_t models);
    std::size_t total_correct() const;
};

/// Recomputes correct counts over every queried instance (each model's output
/// thresholded at 0.5) and sets weight_m = correct_m / sum_n correct_n. When no
/// model is correct the previous weights are kept.
/// predictions[m][i] is model m's positive probability for queried instance i.
EnsembleWeights update_weights(const EnsembleWeights& previous, std::span<const Label> queried_labels,
                               const std::vector<std::vector<double>>& predictions);

/// Draws the positive class with probability score.positive.
bool sample_prediction(const ClassScore& score, Rng& rng);

// ---- sessions ---------------------------------------------------------------

struct SessionConfig {
    Strategy strategy;
    std::size_t budget = 500;
    std::size_t batch_size = 10;
    std::uint64_t seed = 0;
    ClassifierConfig classifier;
    RankingSpec ranking;
};

using FeatureMap = std::map<std::string, std::shared_ptr<const FeatureMatrix>, std::less<>>;

/// Immutable data shared by every session over one tileset and split.
struct SessionContext {
    std::shared_ptr<const Tileset> tileset;
    FeatureMap features;
    std::vector<TileId> pool;  // ids the strategy may query
    std::vector<TileId> test;  // held-out evaluation ids (may be empty)
    RankOrder rank;            // over the pool
};

/// Features for the named modalities, fusing on demand when a name like
/// "thermal+rgb" is not stored in the tileset.
FeatureMap compute_features(const Tileset& tileset, std::span<const std::string> modalities,
                            const Architecture& arch);

/// Context over precomputed features (shared between trials).
std::shared_ptr<const SessionContext> make_session_context(std::shared_ptr<const Tileset> tileset,
                                                           FeatureMap features, std::vector<TileId> pool,
                                                           std::vector<TileId> test, const RankingSpec& ranking);

/// Computes features for the named modalities and the rank order over the pool.
std::shared_ptr<const SessionContext> make_session_context(std::shared_ptr<const Tileset> tileset,
                                                           std::span<const std::string> modalities,
                                                           std::vector<TileId> pool, std::vector<TileId> test,
                                                           const RankingSpec& ranking, const Architecture& arch);

struct LabeledEntry {
    TileId id = 0;
    Label label = Label::unlabeled;
    LabelSource source = LabelSource::none;
    std::size_t round = 0;
};

struct RoundLog {
    std::size_t round = 0;
    std::vector<TileId> queried;
    std::vector<Label> labels;
    std::vector<double> weights;
    std::vector<std::size_t> correct;
    std::size_t positives_found = 0;  // cumulative
    std::size_t labels_used = 0;      // cumulative
    std::size_t walk_length = 0;      // tiles scored while assembling the batch
    std::size_t padded = 0;           // tiles added by the exhaustion rule
    std::optional<double> test_accuracy;
};

class Labeler {
public:
    virtual ~Labeler() = default;
    virtual std::vector<Label> label(std::span<const TileId> ids) = 0;
    virtual LabelSource source() const = 0;
};

/// Simulated oracle answering from the tileset's ground-truth labels.
class GroundTruthOracle : public Labeler {
public:
    explicit GroundTruthOracle(std::shared_ptr<const Tileset> tileset) : tileset_(std::move(tileset)) {}
    std::vector<Label> label(std::span<const TileId> ids) override;
    LabelSource source() const override { return LabelSource::simulated_oracle; }

private:
    std::shared_ptr<const Tileset> tileset_;
};

class ActiveSession {
public:
    ActiveSession(std::shared_ptr<const SessionContext> context, SessionConfig config);

    /// Batch awaiting labels, assembling one if none is pending. Empty when the
    /// session is finished. Repeated calls return the same batch.
    const std::vector<TileId>& pending_batch();
    bool has_pending() const { return !pending_.empty(); }
    const std::vector<TileId>& pending() const { return pending_; }

    /// Records labels for exactly the pending batch, updates ensemble weights,
    /// selects a balanced training set, resets and retrains the classifiers.
    const RoundLog& submit_labels(std::span<const TileId> ids, std::span<const Label> labels, LabelSource source);

    /// One full round with the given labeler. Returns nullopt when the session
    /// is finished. A throwing labeler leaves the session unchanged.
    std::optional<RoundLog> run_round(Labeler& labeler);

    /// Runs rounds until the budget or the pool is exhausted.
    void run_to_budget(Labeler& labeler);

    bool finished() const;
    std::size_t labels_used() const { return labeled_.size(); }
    std::size_t positives_found() const { return positives_found_; }
    std::size_t round() const { return log_.size(); }
    std::size_t remaining_budget() const;
    std::size_t unlabeled_in_pool() const;
    const EnsembleWeights& weights() const { return weights_; }
    const std::vector<RoundLog>& log() const { return log_; }
    const std::vector<LabeledEntry>& labeled() const { return labeled_; }
    const SessionConfig& config() const { return config_; }
    const SessionContext& context() const { return *context_; }
    const std::vector<ClassifierState>& models() const { return models_; }
    bool is_labeled(TileId id) const { return label_of_[id] != Label::unlabeled; }

    /// Probability-like positive score of a tile: the single model's output or
    /// the weighted ensemble score.
    double score_positive(TileId id) const;
    bool predict_positive(TileId id) const;
    std::optional<double> test_accuracy() const;

    /// Baseline selection (Random, Uncertainty, Positive Certainty, Disagree).
    std::vector<TileId> baseline_select(std::size_t count);
    /// Ranked walk with sampled predictions; returns the batch and walk stats.
    std::vector<TileId> assemble_batch(std::size_t count, std::size_t& walk_length, std::size_t& padded);
    /// All positives plus as many randomly chosen negatives (all negatives if
    /// fewer); the whole labeled set when nothing positive has been found.
    std::vector<TileId> select_training_set();

    /// Full mutable state, for equality and atomicity checks.
    nlohmann::ordered_json snapshot() const;

private:
    double model_output(std::size_t model, TileId id) const;
    void retrain(std::span<const TileId> training);

    std::shared_ptr<const SessionContext> context_;
    SessionConfig config_;
    std::vector<const FeatureMatrix*> features_;
    std::vector<ClassifierState> models_;
    EnsembleWeights weights_;
    std::vector<Label> label_of_;
    std::vector<LabeledEntry> labeled_;
    std::vector<TileId> pending_;
    std::size_t pending_walk_ = 0;
    std::size_t pending_padded_ = 0;
    std::size_t positives_found_ = 0;
    std::vector<RoundLog> log_;
    Rng rng_;
};

nlohmann::ordered_json round_log_json(const RoundLog& r);
/// Run-log document shared by the CLI and the labeling service.
nlohmann::ordered_json run_log_json(const ActiveSession& session);
/// run_log_json rendered as the CLI writes it (two-space indent, trailing newline).
std::string run_log_text(const ActiveSession& session);

}  // namespace rarequery
