#include "rarequery/engine.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace rarequery {

namespace {

constexpr std::pair<StrategyKind, std::string_view> kStrategyNames[] = {
    {StrategyKind::multimodal_single, "multimodal_single"},
    {StrategyKind::multimodal_ensemble, "multimodal_ensemble"},
    {StrategyKind::random, "random"},
    {StrategyKind::uncertainty, "uncertainty"},
    {StrategyKind::positive_certainty, "positive_certainty"},
    {StrategyKind::disagree, "disagree"},
};

bool is_multimodal(StrategyKind k) {
    return k == StrategyKind::multimodal_single || k == StrategyKind::multimodal_ensemble;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined inputs
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

std::string_view to_string(StrategyKind k) {
    for (const auto& [kind, name] : kStrategyNames)
        if (kind == k) return name;
    return "unknown";
}

StrategyKind parse_strategy(std::string_view name) {
    std::string normalized(name);
    std::replace(normalized.begin(), normalized.end(), '-', '_');
    for (const auto& [kind, n] : kStrategyNames)
        if (n == normalized) return kind;
    throw InvalidArgument("unknown strategy '" + std::string(name) + "'");
}

std::string Strategy::id() const {
    std::string out(to_string(kind));
    out += ':';
    for (std::size_t i = 0; i < modalities.size(); ++i) {
        if (i) out += ',';
        out += modalities[i];
    }
    return out;
}

void Strategy::validate() const {
    const bool needs_two = kind == StrategyKind::multimodal_ensemble || kind == StrategyKind::disagree;
    if (needs_two && modalities.size() < 2)
        throw InvalidArgument(std::string(to_string(kind)) + " needs at least two classifiers");
    if (!needs_two && modalities.size() != 1)
        throw InvalidArgument(std::string(to_string(kind)) + " takes exactly one classifier");
}

ClassScore ensemble_score(std::span<const double> outputs, std::span<const double> weights) {
    if (outputs.size() != weights.size())
        throw InvalidArgument("ensemble_score: " + std::to_string(outputs.size()) + " outputs but " +
                              std::to_string(weights.size()) + " weights");
    if (outputs.empty()) throw InvalidArgument("ensemble_score needs at least one model");
    ClassScore s{0.0, 0.0};
    for (std::size_t m = 0; m < outputs.size(); ++m) {
        s.positive += weights[m] * outputs[m];
        s.negative += weights[m] * (1.0 - outputs[m]);
    }
    return s;
}

EnsembleWeights EnsembleWeights::uniform(std::size_t models) {
    if (models == 0) throw InvalidArgument("ensemble needs at least one model");
    return {std::vector<double>(models, 1.0 / static_cast<double>(models)), std::vector<std::size_t>(models, 0)};
}

std::size_t EnsembleWeights::total_correct() const {
    return std::accumulate(correct.begin(), correct.end(), std::size_t{0});
}

EnsembleWeights update_weights(const EnsembleWeights& previous, std::span<const Label> labels,
                               const std::vector<std::vector<double>>& predictions) {
    if (predictions.size() != previous.weights.size())
        throw InvalidArgument("update_weights: prediction sets do not match the model count");
    EnsembleWeights next;
    next.correct.assign(predictions.size(), 0);
    for (std::size_t m = 0; m < predictions.size(); ++m) {
        if (predictions[m].size() != labels.size())
            throw InvalidArgument("update_weights: predictions and labels differ in length");
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const bool predicted = predictions[m][i] >= 0.5;
            if (predicted == (labels[i] == Label::positive)) ++next.correct[m];
        }
    }
    const std::size_t total = next.total_correct();
    if (total == 0) {
        next.weights = previous.weights;
        return next;
    }
    next.weights.resize(predictions.size());
    for (std::size_t m = 0; m < predictions.size(); ++m)
        next.weights[m] = static_cast<double>(next.correct[m]) / static_cast<double>(total);
    return next;
}

bool sample_prediction(const ClassScore& score, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng) < score.positive;
}

FeatureMap compute_features(const Tileset& tileset, std::span<const std::string> modalities,
                            const Architecture& arch) {
    FeatureMap features;
    for (const auto& name : modalities) {
        if (features.contains(name)) continue;
        if (tileset.has(name)) {
            features.emplace(name, std::make_shared<FeatureMatrix>(extract_features(tileset, name, arch)));
            continue;
        }
        std::vector<std::string> sources;
        std::stringstream ss(name);
        for (std::string part; std::getline(ss, part, '+');) sources.push_back(part);
        if (sources.size() < 2) throw InvalidArgument("tileset has no modality '" + name + "'");
        const Tileset fused = fuse_modalities(tileset, sources);
        features.emplace(name, std::make_shared<FeatureMatrix>(extract_features(fused, fused_name(sources), arch)));
    }
    return features;
}

std::shared_ptr<const SessionContext> make_session_context(std::shared_ptr<const Tileset> tileset,
                                                           FeatureMap features, std::vector<TileId> pool,
                                                           std::vector<TileId> test, const RankingSpec& ranking) {
    if (!tileset) throw InvalidArgument("session context needs a tileset");
    for (TileId id : pool)
        if (id >= tileset->size()) throw InvalidArgument("pool id " + std::to_string(id) + " out of range");
    for (TileId id : test)
        if (id >= tileset->size()) throw InvalidArgument("test id " + std::to_string(id) + " out of range");
    auto ctx = std::make_shared<SessionContext>();
    ctx->tileset = tileset;
    ctx->features = std::move(features);
    const auto metric = compute_metric(*tileset, ranking);
    ctx->rank = rank_by_distance(metric, resolve_target(ranking, metric), pool);
    ctx->pool = std::move(pool);
    ctx->test = std::move(test);
    return ctx;
}

std::shared_ptr<const SessionContext> make_session_context(std::shared_ptr<const Tileset> tileset,
                                                           std::span<const std::string> modalities,
                                                           std::vector<TileId> pool, std::vector<TileId> test,
                                                           const RankingSpec& ranking, const Architecture& arch) {
    if (!tileset) throw InvalidArgument("session context needs a tileset");
    auto features = compute_features(*tileset, modalities, arch);
    return make_session_context(std::move(tileset), std::move(features), std::move(pool), std::move(test), ranking);
}

std::vector<Label> GroundTruthOracle::label(std::span<const TileId> ids) {
    std::vector<Label> out;
    out.reserve(ids.size());
    for (TileId id : ids) {
        const Label l = tileset_->tiles.at(id).label;
        if (l == Label::unlabeled) throw LabelerFailure("tile " + std::to_string(id) + " has no ground truth");
        out.push_back(l);
    }
    return out;
}

// ---- ActiveSession ------------------------------------------------------------

ActiveSession::ActiveSession(std::shared_ptr<const SessionContext> context, SessionConfig config)
    : context_(std::move(context)), config_(std::move(config)), rng_(config_.seed) {
    if (!context_) throw InvalidArgument("session needs a context");
    config_.strategy.validate();
    config_.classifier.validate();
    if (config_.batch_size == 0) throw InvalidArgument("batch size must be positive");
    const std::size_t M = config_.strategy.modalities.size();
    for (std::size_t m = 0; m < M; ++m) {
        const auto it = context_->features.find(config_.strategy.modalities[m]);
        if (it == context_->features.end())
            throw InvalidArgument("no features for modality '" + config_.strategy.modalities[m] + "'");
        features_.push_back(it->second.get());
        ClassifierConfig cc = config_.classifier;
        cc.init_seed = derive_seed(config_.seed, 1, m);
        models_.push_back(make_classifier(it->second->cols, cc));
    }
    weights_ = EnsembleWeights::uniform(M);
    label_of_.assign(context_->tileset->size(), Label::unlabeled);
}

std::size_t ActiveSession::remaining_budget() const {
    return config_.budget > labeled_.size() ? config_.budget - labeled_.size() : 0;
}

std::size_t ActiveSession::unlabeled_in_pool() const { return context_->pool.size() - labeled_.size(); }

bool ActiveSession::finished() const {
    return pending_.empty() && (remaining_budget() == 0 || unlabeled_in_pool() == 0);
}

double ActiveSession::model_output(std::size_t m, TileId id) const {
    return predict_proba(models_[m], features_[m]->row(id));
}

double ActiveSession::score_positive(TileId id) const {
    if (models_.size() == 1) return model_output(0, id);
    double outputs[8];
    std::vector<double> heap;
    std::span<double> out(outputs, models_.size());
    if (models_.size() > 8) {
        heap.resize(models_.size());
        out = heap;
    }
    for (std::size_t m = 0; m < models_.size(); ++m) out[m] = model_output(m, id);
    return ensemble_score(out, weights_.weights).positive;
}

bool ActiveSession::predict_positive(TileId id) const {
    return score_positive(id) >= config_.classifier.decision_threshold;
}

std::optional<double> ActiveSession::test_accuracy() const {
    if (context_->test.empty()) return std::nullopt;
    std::size_t correct = 0;
    for (TileId id : context_->test)
        if (predict_positive(id) == (context_->tileset->tiles[id].label == Label::positive)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(context_->test.size());
}

std::vector<TileId> ActiveSession::assemble_batch(std::size_t count, std::size_t& walk_length, std::size_t& padded) {
    std::vector<TileId> batch;
    walk_length = 0;
    padded = 0;
    std::vector<char> chosen;
    for (TileId id : context_->rank.order) {
        if (batch.size() >= count) break;
        if (is_labeled(id)) continue;
        ++walk_length;
        const double p = score_positive(id);
        if (sample_prediction({1.0 - p, p}, rng_)) batch.push_back(id);
    }
    if (batch.size() < count) {
        chosen.assign(label_of_.size(), 0);
        for (TileId id : batch) chosen[id] = 1;
        for (TileId id : context_->rank.order) {
            if (batch.size() >= count) break;
            if (is_labeled(id) || chosen[id]) continue;
            batch.push_back(id);
            ++padded;
        }
    }
    return batch;
}

std::vector<TileId> ActiveSession::baseline_select(std::size_t count) {
    std::vector<TileId> candidates;
    for (TileId id : context_->pool)
        if (!is_labeled(id)) candidates.push_back(id);
    std::sort(candidates.begin(), candidates.end());
    count = std::min(count, candidates.size());
    const StrategyKind kind = config_.strategy.kind;

    if (kind == StrategyKind::random) {
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
            std::swap(candidates[i], candidates[pick(rng_)]);
        }
        candidates.resize(count);
        return candidates;
    }

    std::vector<std::pair<double, TileId>> keyed;
    keyed.reserve(candidates.size());
    for (TileId id : candidates) {
        double key = 0.0;
        switch (kind) {
            case StrategyKind::uncertainty: key = std::abs(score_positive(id) - 0.5); break;
            case StrategyKind::positive_certainty: key = 1.0 - score_positive(id); break;
            case StrategyKind::disagree: key = -std::abs(model_output(0, id) - model_output(1, id)); break;
            default: throw InvalidArgument("baseline_select called for a ranked strategy");
        }
        keyed.emplace_back(key, id);
    }
    std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(count), keyed.end());
    std::vector<TileId> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(keyed[i].second);
    return out;
}

std::vector<TileId> ActiveSession::select_training_set() {
    std::vector<TileId> positives, negatives;
    for (const auto& e : labeled_) (e.label == Label::positive ? positives : negatives).push_back(e.id);
    if (positives.empty()) return negatives;
    const std::size_t take = std::min(positives.size(), negatives.size());
    for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, negatives.size() - 1);
        std::swap(negatives[i], negatives[pick(rng_)]);
    }
    negatives.resize(take);
    positives.insert(positives.end(), negatives.begin(), negatives.end());
    return positives;
}

const std::vector<TileId>& ActiveSession::pending_batch() {
    if (!pending_.empty() || finished()) return pending_;
    const std::size_t count = std::min({config_.batch_size, remaining_budget(), unlabeled_in_pool()});
    if (is_multimodal(config_.strategy.kind)) {
        pending_ = assemble_batch(count, pending_walk_, pending_padded_);
    } else {
        pending_ = baseline_select(count);
        pending_walk_ = 0;
        pending_padded_ = 0;
    }
    return pending_;
}

void ActiveSession::retrain(std::span<const TileId> training) {
    std::vector<Example> examples;
    for (std::size_t m = 0; m < models_.size(); ++m) {
        examples.clear();
        for (TileId id : training)
            examples.push_back({features_[m]->row(id), label_of_[id] == Label::positive ? 1.0 : 0.0});
        models_[m] = train(reset(std::move(models_[m])), examples, config_.classifier,
                           derive_seed(config_.seed, 2 + log_.size(), m));
    }
}

const RoundLog& ActiveSession::submit_labels(std::span<const TileId> ids, std::span<const Label> labels,
                                             LabelSource source) {
    if (pending_.empty()) throw InvalidArgument("no batch is pending");
    if (ids.size() != labels.size()) throw InvalidArgument("ids and labels differ in length");
    std::vector<TileId> a(ids.begin(), ids.end()), b = pending_;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) throw InvalidArgument("submitted ids do not match the pending batch");
    std::vector<Label> ordered(pending_.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (labels[i] == Label::unlabeled) throw InvalidArgument("label for tile " + std::to_string(ids[i]) + " is missing");
        ordered[std::find(pending_.begin(), pending_.end(), ids[i]) - pending_.begin()] = labels[i];
    }

    const std::size_t round = log_.size();
    for (std::size_t i = 0; i < pending_.size(); ++i) {
        label_of_[pending_[i]] = ordered[i];
        labeled_.push_back({pending_[i], ordered[i], source, round});
        if (ordered[i] == Label::positive) ++positives_found_;
    }

    // Correct counts over everything queried so far, judged by the models that chose the batch.
    std::vector<Label> all_labels;
    std::vector<std::vector<double>> predictions(models_.size());
    for (const auto& e : labeled_) {
        all_labels.push_back(e.label);
        for (std::size_t m = 0; m < models_.size(); ++m) predictions[m].push_back(model_output(m, e.id));
    }
    weights_ = update_weights(weights_, all_labels, predictions);

    const auto training = select_training_set();
    retrain(training);

    RoundLog r;
    r.round = round;
    r.queried = pending_;
    r.labels = ordered;
    r.weights = weights_.weights;
    r.correct = weights_.correct;
    r.positives_found = positives_found_;
    r.labels_used = labeled_.size();
    r.walk_length = pending_walk_;
    r.padded = pending_padded_;
    r.test_accuracy = test_accuracy();
    log_.push_back(std::move(r));
    pending_.clear();
    pending_walk_ = pending_padded_ = 0;
    return log_.back();
}

std::optional<RoundLog> ActiveSession::run_round(Labeler& labeler) {
    if (finished()) return std::nullopt;
    ActiveSession next = *this;
    const std::vector<TileId> batch = next.pending_batch();
    if (batch.empty()) return std::nullopt;
    const auto labels = labeler.label(batch);
    if (labels.size() != batch.size()) throw LabelerFailure("labeler returned the wrong number of labels");
    next.submit_labels(batch, labels, labeler.source());
    *this = std::move(next);
    return log_.back();
}

void ActiveSession::run_to_budget(Labeler& labeler) {
    while (run_round(labeler)) {
    }
}

nlohmann::ordered_json ActiveSession::snapshot() const {
    nlohmann::ordered_json j;
    std::ostringstream rng_state;
    rng_state << rng_;
    j["rng"] = rng_state.str();
    j["weights"] = weights_.weights;
    j["correct"] = weights_.correct;
    auto& models = j["models"] = nlohmann::ordered_json::array();
    for (const auto& m : models_)
        models.push_back({{"parameters", m.parameters},
                          {"first_moment", m.first_moment},
                          {"second_moment", m.second_moment},
                          {"step", m.step}});
    auto& labeled = j["labeled"] = nlohmann::ordered_json::array();
    for (const auto& e : labeled_)
        labeled.push_back({e.id, to_string(e.label), to_string(e.source), e.round});
    j["pending"] = pending_;
    j["positives_found"] = positives_found_;
    auto& log = j["log"] = nlohmann::ordered_json::array();
    for (const auto& r : log_) log.push_back(round_log_json(r));
    return j;
}

nlohmann::ordered_json round_log_json(const RoundLog& r) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["queried"] = r.queried;
    auto& labels = j["labels"] = nlohmann::ordered_json::array();
    for (Label l : r.labels) labels.push_back(l == Label::positive ? 1 : 0);
    j["weights"] = r.weights;
    j["correct"] = r.correct;
    j["positives_found"] = r.positives_found;
    j["labels_used"] = r.labels_used;
    j["walk_length"] = r.walk_length;
    j["padded"] = r.padded;
    j["test_accuracy"] = r.test_accuracy ? nlohmann::ordered_json(*r.test_accuracy) : nlohmann::ordered_json();
    return j;
}

nlohmann::ordered_json run_log_json(const ActiveSession& s) {
    const auto& c = s.config();
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["strategy"] = to_string(c.strategy.kind);
    j["modalities"] = c.strategy.modalities;
    j["seed"] = c.seed;
    j["budget"] = c.budget;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.classifier.learning_rate;
    j["epochs"] = c.classifier.epochs;
    j["tileset_digest"] = s.context().tileset->provenance.source_digest;
    j["pool_size"] = s.context().pool.size();
    j["test_size"] = s.context().test.size();
    auto& rounds = j["rounds"] = nlohmann::ordered_json::array();
    for (const auto& r : s.log()) rounds.push_back(round_log_json(r));
    j["labels_used"] = s.labels_used();
    j["positives_found"] = s.positives_found();
    j["finished"] = s.finished();
    return j;
}

std::string run_log_text(const ActiveSession& session) { return run_log_json(session).dump(2) + "\n"; }

}  // namespace rarequery
