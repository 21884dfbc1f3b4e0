#include "rarequery/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "rarequery/tileset_io.hpp"

namespace rarequery {

namespace {

void shuffle_prefix(std::vector<TileId>& v, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count && i + 1 < v.size(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
        std::swap(v[i], v[pick(rng)]);
    }
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
}

std::optional<double> opt_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

ConfusionMetrics evaluate(const std::vector<TileId>& test, const Tileset& ts,
                          const std::function<bool(TileId)>& predict) {
    // std::vector<bool> has no contiguous storage to view as a span.
    const auto pred = std::make_unique<bool[]>(test.size());
    const auto actual = std::make_unique<bool[]>(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        pred[i] = predict(test[i]);
        actual[i] = ts.tiles[test[i]].label == Label::positive;
    }
    return confusion_metrics({pred.get(), test.size()}, {actual.get(), test.size()});
}

}  // namespace

Split make_split(const Tileset& ts, const SplitSpec& spec) {
    if (!(spec.positive_train_fraction > 0.0 && spec.positive_train_fraction < 1.0))
        throw InvalidArgument("positive_train_fraction must lie in (0, 1)");
    std::vector<TileId> positives, negatives;
    for (const auto& t : ts.tiles) {
        if (t.label == Label::unlabeled) throw InvalidArgument("splitting needs a fully labeled tileset");
        (t.label == Label::positive ? positives : negatives).push_back(t.id);
    }
    const std::size_t P = positives.size();
    if (P < 2) throw InvalidArgument("split needs at least 2 positive tiles, found " + std::to_string(P));
    const auto rounded = static_cast<std::size_t>(std::lround(spec.positive_train_fraction * static_cast<double>(P)));
    const std::size_t train_pos = std::clamp<std::size_t>(rounded, 1, P - 1);
    const std::size_t test_pos = P - train_pos;
    const std::size_t need = test_pos + (spec.balance_train ? train_pos : 0);
    if (negatives.size() < need)
        throw InvalidArgument("split needs " + std::to_string(need) + " negative tiles, found " +
                              std::to_string(negatives.size()));

    Rng rng(spec.seed);
    shuffle_prefix(positives, P, rng);
    shuffle_prefix(negatives, test_pos, rng);
    Split s;
    s.test.assign(positives.begin() + static_cast<std::ptrdiff_t>(train_pos), positives.end());
    s.test.insert(s.test.end(), negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(test_pos));
    s.train.assign(positives.begin(), positives.begin() + static_cast<std::ptrdiff_t>(train_pos));
    std::vector<TileId> rest(negatives.begin() + static_cast<std::ptrdiff_t>(test_pos), negatives.end());
    if (spec.balance_train) {
        std::sort(rest.begin(), rest.end());
        shuffle_prefix(rest, train_pos, rng);
        rest.resize(train_pos);
    }
    s.train.insert(s.train.end(), rest.begin(), rest.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

ConfusionMetrics confusion_metrics(std::span<const bool> predicted, std::span<const bool> actual) {
    if (predicted.size() != actual.size())
        throw InvalidArgument("confusion_metrics: " + std::to_string(predicted.size()) + " predictions for " +
                              std::to_string(actual.size()) + " labels");
    ConfusionMetrics m;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i]) (actual[i] ? m.tp : m.fp)++;
        else (actual[i] ? m.fn : m.tn)++;
    }
    const std::size_t n = predicted.size();
    m.accuracy = n ? static_cast<double>(m.tp + m.tn) / static_cast<double>(n) : 0.0;
    if (m.tp + m.fp) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    if (m.tp + m.fn) m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    if (m.tp + m.fp + m.fn) m.f1 = 2.0 * static_cast<double>(m.tp) / static_cast<double>(2 * m.tp + m.fp + m.fn);
    return m;
}

std::uint64_t trial_seed(std::uint64_t base, std::size_t trial) { return derive_seed(base, 100, trial); }

TrialResult run_passive_trial(const Tileset& ts, const FeatureMap& features, const std::string& modality,
                              const ExperimentConfig& config, std::uint64_t seed) {
    const auto it = features.find(modality);
    if (it == features.end()) throw InvalidArgument("no features for modality '" + modality + "'");
    const FeatureMatrix& fm = *it->second;
    const Split split = make_split(ts, {config.positive_train_fraction, true, seed});

    ClassifierConfig cc = config.classifier;
    cc.init_seed = derive_seed(seed, 1, 0);
    std::vector<Example> examples;
    for (TileId id : split.train) examples.push_back({fm.row(id), ts.tiles[id].label == Label::positive ? 1.0 : 0.0});
    const ClassifierState model = train(make_classifier(fm.cols, cc), examples, cc, derive_seed(seed, 3));

    TrialResult r;
    r.strategy = "passive:" + modality;
    r.seed = seed;
    r.learning_rate = cc.learning_rate;
    r.metrics = evaluate(split.test, ts, [&](TileId id) {
        return predict_proba(model, fm.row(id)) >= cc.decision_threshold;
    });
    r.labels_used = split.train.size();
    for (TileId id : split.train)
        if (ts.tiles[id].label == Label::positive) ++r.pool_positives;
    r.positives_found = r.pool_positives;
    return r;
}

TrialResult run_active_trial(std::shared_ptr<const Tileset> ts, const FeatureMap& features, const Strategy& strategy,
                             const ExperimentConfig& config, std::uint64_t seed, std::size_t trial) {
    const Split split = make_split(*ts, {config.positive_train_fraction, false, seed});
    std::size_t pool_positives = 0;
    for (TileId id : split.train)
        if (ts->tiles[id].label == Label::positive) ++pool_positives;
    auto ctx = make_session_context(ts, features, split.train, split.test, config.ranking);

    SessionConfig sc;
    sc.strategy = strategy;
    sc.budget = config.budget;
    sc.batch_size = config.batch_size;
    sc.seed = derive_seed(seed, 7);
    sc.classifier = config.classifier;
    sc.ranking = config.ranking;
    ActiveSession session(ctx, sc);
    GroundTruthOracle oracle(ts);

    TrialResult r;
    r.strategy = strategy.id();
    r.trial = trial;
    r.seed = seed;
    r.learning_rate = config.classifier.learning_rate;
    r.pool_positives = pool_positives;
    auto point = [&](std::size_t budget) {
        CurvePoint p;
        p.budget = budget;
        p.labels_used = session.labels_used();
        p.accuracy = session.test_accuracy();
        p.positives_found = session.positives_found();
        p.found_fraction = pool_positives ? static_cast<double>(p.positives_found) / static_cast<double>(pool_positives)
                                          : 0.0;
        return p;
    };

    std::vector<std::size_t> checkpoints = config.checkpoints;
    std::sort(checkpoints.begin(), checkpoints.end());
    std::size_t next = 0;
    while (next < checkpoints.size() && checkpoints[next] == 0) r.curve.push_back(point(checkpoints[next++]));
    while (session.run_round(oracle)) {
        while (next < checkpoints.size() && session.labels_used() >= checkpoints[next])
            r.curve.push_back(point(checkpoints[next++]));
    }
    // A session that ran out of pool before a checkpoint reports its final state there.
    while (next < checkpoints.size()) r.curve.push_back(point(checkpoints[next++]));

    r.metrics = evaluate(split.test, *ts, [&](TileId id) { return session.predict_positive(id); });
    r.labels_used = session.labels_used();
    r.positives_found = session.positives_found();
    return r;
}

MeanSem summarize(std::span<const double> values) {
    MeanSem s;
    s.n = values.size();
    if (s.n == 0) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.sem = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

MeanSem summarize(std::span<const std::optional<double>> values) {
    std::vector<double> defined;
    for (const auto& v : values)
        if (v) defined.push_back(*v);
    MeanSem s = summarize(defined);
    s.excluded = values.size() - defined.size();
    return s;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw InvalidArgument("Welch t-test needs at least 2 values per sample");
    const MeanSem sa = summarize(a), sb = summarize(b);
    const double va = sa.sem * sa.sem, vb = sb.sem * sb.sem;  // s^2 / n
    WelchResult w;
    if (va + vb == 0.0) {
        w.t = 0.0;
        w.df = static_cast<double>(a.size() + b.size() - 2);
        w.p = sa.mean == sb.mean ? 1.0 : 0.0;
        return w;
    }
    w.t = (sa.mean - sb.mean) / std::sqrt(va + vb);
    w.df = (va + vb) * (va + vb) /
           (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    const boost::math::students_t dist(w.df);
    w.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(w.t)));
    return w;
}

std::vector<AggregateRow> aggregate_trials(std::span<const TrialResult> trials) {
    std::map<std::string, std::map<std::size_t, std::vector<const CurvePoint*>>> curves;
    std::map<std::string, std::vector<const TrialResult*>> finals;
    std::vector<std::string> order;
    for (const auto& t : trials) {
        if (!finals.contains(t.strategy)) order.push_back(t.strategy);
        finals[t.strategy].push_back(&t);
        for (const auto& p : t.curve) curves[t.strategy][p.budget].push_back(&p);
    }
    std::vector<AggregateRow> rows;
    for (const auto& name : order) {
        if (curves[name].empty()) {
            // Passive reference: one row at budget 0 from the final metrics.
            std::vector<double> acc, frac, found;
            for (const auto* t : finals[name]) {
                acc.push_back(t->metrics.accuracy);
                frac.push_back(t->pool_positives ? 1.0 : 0.0);
                found.push_back(static_cast<double>(t->positives_found));
            }
            rows.push_back({name, 0, summarize(acc), summarize(frac), summarize(found)});
            continue;
        }
        for (const auto& [budget, points] : curves[name]) {
            std::vector<std::optional<double>> acc;
            std::vector<double> frac, found;
            for (const auto* p : points) {
                acc.push_back(p->accuracy);
                frac.push_back(p->found_fraction);
                found.push_back(static_cast<double>(p->positives_found));
            }
            rows.push_back({name, budget, summarize(std::span<const std::optional<double>>(acc)), summarize(frac),
                            summarize(found)});
        }
    }
    return rows;
}

BenchmarkResult run_active_benchmark(std::shared_ptr<const Tileset> ts, std::span<const Strategy> strategies,
                                     std::span<const std::string> passive_modalities,
                                     const ExperimentConfig& config) {
    for (const auto& s : strategies) s.validate();
    std::vector<std::string> needed(passive_modalities.begin(), passive_modalities.end());
    for (const auto& s : strategies) needed.insert(needed.end(), s.modalities.begin(), s.modalities.end());
    const FeatureMap features = compute_features(*ts, needed, config.classifier.architecture);

    const std::size_t arms = passive_modalities.size() + strategies.size();
    const std::size_t tasks = arms * config.trials;
    std::vector<TrialResult> results(tasks);
    std::atomic<std::size_t> cursor{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t k; (k = cursor.fetch_add(1)) < tasks;) {
            const std::size_t arm = k / config.trials, trial = k % config.trials;
            const std::uint64_t seed = trial_seed(config.seed, trial);
            try {
                if (arm < passive_modalities.size()) {
                    results[k] = run_passive_trial(*ts, features, passive_modalities[arm], config, seed);
                    results[k].trial = trial;
                } else {
                    results[k] = run_active_trial(ts, features, strategies[arm - passive_modalities.size()], config,
                                                  seed, trial);
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::size_t threads = config.threads ? config.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(tasks, 1));
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    BenchmarkResult out;
    out.trials = std::move(results);
    out.aggregate = aggregate_trials(out.trials);

    std::vector<std::pair<std::string, std::vector<double>>> finals;
    for (std::size_t arm = 0; arm < arms; ++arm) {
        std::vector<double> acc;
        for (std::size_t t = 0; t < config.trials; ++t) acc.push_back(out.trials[arm * config.trials + t].metrics.accuracy);
        finals.emplace_back(out.trials[arm * config.trials].strategy, std::move(acc));
    }
    if (config.trials >= 2) {
        for (std::size_t i = 0; i < finals.size(); ++i)
            for (std::size_t j = i + 1; j < finals.size(); ++j)
                out.significance.push_back(
                    {finals[i].first, finals[j].first, config.budget, welch_t_test(finals[i].second, finals[j].second)});
    }
    return out;
}

LabelingTime labeling_time(std::uint64_t labels, std::uint64_t seconds_per_label) {
    LabelingTime t;
    t.seconds = labels * seconds_per_label;
    t.minutes = (t.seconds + 30) / 60;
    t.hours = (t.seconds + 1800) / 3600;
    t.display = t.seconds >= 24 * 3600 ? std::to_string(t.hours) + " hours" : std::to_string(t.minutes) + " mins";
    return t;
}

nlohmann::ordered_json trial_json(const TrialResult& t) {
    nlohmann::ordered_json j;
    j["strategy"] = t.strategy;
    j["trial"] = t.trial;
    j["seed"] = t.seed;
    j["learning_rate"] = t.learning_rate;
    const auto& m = t.metrics;
    j["metrics"] = {{"tp", m.tp},
                    {"fp", m.fp},
                    {"tn", m.tn},
                    {"fn", m.fn},
                    {"accuracy", m.accuracy},
                    {"precision", opt_json(m.precision)},
                    {"recall", opt_json(m.recall)},
                    {"f1", opt_json(m.f1)}};
    auto& curve = j["curve"] = nlohmann::ordered_json::array();
    for (const auto& p : t.curve)
        curve.push_back({{"budget", p.budget},
                         {"labels_used", p.labels_used},
                         {"accuracy", opt_json(p.accuracy)},
                         {"positives_found", p.positives_found},
                         {"found_fraction", p.found_fraction}});
    j["pool_positives"] = t.pool_positives;
    j["labels_used"] = t.labels_used;
    j["positives_found"] = t.positives_found;
    return j;
}

TrialResult trial_from_json(const nlohmann::json& j) {
    TrialResult t;
    t.strategy = j.at("strategy").get<std::string>();
    t.trial = j.at("trial").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.learning_rate = j.at("learning_rate").get<double>();
    const auto& m = j.at("metrics");
    t.metrics.tp = m.at("tp").get<std::size_t>();
    t.metrics.fp = m.at("fp").get<std::size_t>();
    t.metrics.tn = m.at("tn").get<std::size_t>();
    t.metrics.fn = m.at("fn").get<std::size_t>();
    t.metrics.accuracy = m.at("accuracy").get<double>();
    t.metrics.precision = opt_from(m.at("precision"));
    t.metrics.recall = opt_from(m.at("recall"));
    t.metrics.f1 = opt_from(m.at("f1"));
    for (const auto& p : j.at("curve"))
        t.curve.push_back({p.at("budget").get<std::size_t>(), p.at("labels_used").get<std::size_t>(),
                           opt_from(p.at("accuracy")), p.at("positives_found").get<std::size_t>(),
                           p.at("found_fraction").get<double>()});
    t.pool_positives = j.at("pool_positives").get<std::size_t>();
    t.labels_used = j.at("labels_used").get<std::size_t>();
    t.positives_found = j.at("positives_found").get<std::size_t>();
    return t;
}

void write_raw_trials(const std::filesystem::path& path, std::span<const TrialResult> trials) {
    std::string out;
    for (const auto& t : trials) out += trial_json(t).dump() + "\n";
    write_file(path, out);
}

std::vector<TrialResult> read_raw_trials(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<TrialResult> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(trial_from_json(nlohmann::json::parse(line)));
    return out;
}

void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> rows) {
    std::string out = "strategy,budget,mean_acc,sem_acc,mean_found,sem_found,mean_positives,n,acc_excluded\n";
    for (const auto& r : rows)
        out += r.strategy + "," + std::to_string(r.budget) + "," + fmt(r.accuracy.mean) + "," + fmt(r.accuracy.sem) +
               "," + fmt(r.found_fraction.mean) + "," + fmt(r.found_fraction.sem) + "," +
               fmt(r.positives_found.mean) + "," + std::to_string(r.found_fraction.n) + "," +
               std::to_string(r.accuracy.excluded) + "\n";
    write_file(path, out);
}

void write_curves_csv(const std::filesystem::path& path, std::span<const TrialResult> trials) {
    std::string out = "strategy,trial,seed,budget,labels_used,accuracy,positives_found,found_fraction\n";
    for (const auto& t : trials)
        for (const auto& p : t.curve)
            out += t.strategy + "," + std::to_string(t.trial) + "," + std::to_string(t.seed) + "," +
                   std::to_string(p.budget) + "," + std::to_string(p.labels_used) + "," + fmt(p.accuracy) + "," +
                   std::to_string(p.positives_found) + "," + fmt(p.found_fraction) + "\n";
    write_file(path, out);
}

std::shared_ptr<const SessionContext> prepare_session_context(std::shared_ptr<const Tileset> ts,
                                                              const Strategy& strategy, const RankingSpec& ranking,
                                                              const Architecture& arch, std::uint64_t split_seed,
                                                              double positive_train_fraction) {
    const LabelCounts c = ts->counts();
    std::vector<TileId> pool, test;
    if (c.unlabeled == 0 && c.positives >= 2) {
        Split s = make_split(*ts, {positive_train_fraction, false, split_seed});
        pool = std::move(s.train);
        test = std::move(s.test);
    } else {
        for (const auto& t : ts->tiles) pool.push_back(t.id);
    }
    return make_session_context(ts, strategy.modalities, std::move(pool), std::move(test), ranking, arch);
}

SessionConfig make_session_config(const SessionRequest& request) {
    SessionConfig c;
    c.strategy = request.strategy;
    c.budget = request.budget;
    c.batch_size = request.batch_size;
    c.seed = request.seed;
    c.classifier.learning_rate = request.learning_rate;
    c.classifier.epochs = request.epochs;
    return c;
}

std::unique_ptr<ActiveSession> open_session(std::shared_ptr<const Tileset> tileset, const SessionRequest& request) {
    request.strategy.validate();
    const SessionConfig config = make_session_config(request);
    auto ctx = prepare_session_context(std::move(tileset), request.strategy, config.ranking,
                                       config.classifier.architecture, request.seed);
    return std::make_unique<ActiveSession>(std::move(ctx), config);
}

Tileset build_tileset(const Site& site, const CropGeometry& geometry, std::span<const std::string> fusions) {
    Tileset ts = crop_orthomosaics(site.mosaics, geometry, site.registry);
    ts = downshift_thermal(filter_zero_tiles(std::move(ts)));
    ts = with_metric(std::move(ts), RankingSpec{});
    ts.provenance.seed = site.config.seed;
    std::ostringstream registry;
    registry << std::setprecision(17) << "seed " << site.config.seed << " extent " << site.config.extent_m << "\n";
    for (const auto& c : site.registry.centers) registry << c.x << "," << c.y << "\n";
    const std::string chunk = registry.str();
    ts.provenance.source_digest = sha256_hex(std::span<const std::string>(&chunk, 1));
    for (const auto& name : fusions) {
        std::vector<std::string> sources;
        std::stringstream ss(name);
        for (std::string part; std::getline(ss, part, '+');) sources.push_back(part);
        ts = fuse_modalities(std::move(ts), sources);
    }
    return ts;
}

}  // namespace rarequery
