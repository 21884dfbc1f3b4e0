// rarequery: command-line front end for tileset preparation, active-learning
// runs, benchmarks, mapping and the labeling service.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "rarequery/classifier.hpp"
#include "rarequery/engine.hpp"
#include "rarequery/experiments.hpp"
#include "rarequery/mapping.hpp"
#include "rarequery/ranking.hpp"
#include "rarequery/service.hpp"
#include "rarequery/synthetic.hpp"
#include "rarequery/tileset_io.hpp"

namespace fs = std::filesystem;
using namespace rarequery;

namespace {

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

std::shared_ptr<const Tileset> open_tileset(const std::string& dir) {
    return std::make_shared<const Tileset>(load_tileset(dir));
}

void print_aggregate(const std::vector<AggregateRow>& rows) {
    std::printf("%-32s %6s %9s %7s %9s %7s\n", "strategy", "budget", "acc", "sem", "found", "sem");
    for (const auto& r : rows)
        std::printf("%-32s %6zu %9.4f %7.4f %9.4f %7.4f\n", r.strategy.c_str(), r.budget, r.accuracy.mean,
                    r.accuracy.sem, r.found_fraction.mean, r.found_fraction.sem);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rare-positive active learning over multimodal raster tilesets"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic site (orthomosaics and midden registry)");
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    bool gen_benchmark = false;
    double gen_extent = 0;
    std::size_t gen_positives = 0;
    double gen_void = -1;
    gen->add_option("--seed", gen_seed, "RNG seed");
    gen->add_option("--out", gen_out, "Site directory")->required();
    gen->add_flag("--benchmark", gen_benchmark, "Use the reference benchmark configuration");
    gen->add_option("--extent", gen_extent, "Side length in meters");
    gen->add_option("--positives", gen_positives, "Number of middens");
    gen->add_option("--void-fraction", gen_void, "Fraction left as a zero-valued sensor void");

    // crop
    auto* crop = app.add_subcommand("crop", "Crop a site into a tileset");
    std::string crop_site, crop_out, crop_fuse;
    CropGeometry geometry;
    crop->add_option("--site", crop_site, "Site directory")->required();
    crop->add_option("--out", crop_out, "Tileset directory")->required();
    crop->add_option("--interval", geometry.interval_m, "Crop side in meters");
    crop->add_option("--stride", geometry.stride_m, "Crop stride in meters");
    crop->add_option("--fuse", crop_fuse, "Fusions to append, e.g. thermal+rgb,thermal+lidar");

    // diagnose
    auto* diag = app.add_subcommand("diagnose", "Conditional positive rate given MPV >= t");
    std::string diag_tileset, diag_out;
    std::size_t diag_thresholds = 50;
    diag->add_option("--tileset", diag_tileset)->required();
    diag->add_option("--thresholds", diag_thresholds, "Number of quantile thresholds");
    diag->add_option("--out", diag_out, "Write the curve as JSON");

    // active
    auto* active = app.add_subcommand("active", "Run one active-learning session");
    std::string act_tileset, act_strategy = "multimodal-single", act_modalities, act_oracle = "ground-truth", act_out;
    SessionRequest act;
    active->add_option("--tileset", act_tileset)->required();
    active->add_option("--strategy", act_strategy);
    active->add_option("--modalities", act_modalities, "Comma-separated classifier modalities");
    active->add_option("--budget", act.budget);
    active->add_option("--batch", act.batch_size);
    active->add_option("--seed", act.seed);
    active->add_option("--learning-rate", act.learning_rate);
    active->add_option("--epochs", act.epochs);
    active->add_option("--oracle", act_oracle)->check(CLI::IsMember({"ground-truth", "ground_truth"}));
    active->add_option("--out", act_out, "Run log path");

    // passive and active-bench share options
    ExperimentConfig exp;
    auto* passive = app.add_subcommand("passive", "Passive-learning protocol over modalities");
    std::string pas_tileset, pas_modalities = "thermal", pas_out;
    passive->add_option("--tileset", pas_tileset)->required();
    passive->add_option("--modalities", pas_modalities, "Comma-separated, fusions like thermal+rgb allowed");
    passive->add_option("--trials", exp.trials);
    passive->add_option("--seed", exp.seed);
    passive->add_option("--learning-rate", exp.classifier.learning_rate);
    passive->add_option("--epochs", exp.classifier.epochs);
    passive->add_option("--out", pas_out, "Results directory")->required();

    auto* bench = app.add_subcommand("active-bench", "Active-learning benchmark curves");
    std::string bench_tileset, bench_strategies = "multimodal-single:thermal,random:thermal", bench_passive = "thermal",
                                bench_out;
    bench->add_option("--tileset", bench_tileset)->required();
    bench->add_option("--strategies", bench_strategies,
                      "Comma-separated kind:modality[+...] entries; '/' separates ensemble members");
    bench->add_option("--passive", bench_passive, "Passive reference modalities (empty for none)");
    bench->add_option("--trials", exp.trials);
    bench->add_option("--budget", exp.budget);
    bench->add_option("--batch", exp.batch_size);
    bench->add_option("--seed", exp.seed);
    bench->add_option("--learning-rate", exp.classifier.learning_rate);
    bench->add_option("--epochs", exp.classifier.epochs);
    bench->add_option("--threads", exp.threads);
    bench->add_option("--out", bench_out, "Results directory")->required();

    // train
    auto* trn = app.add_subcommand("train", "Train one classifier on the balanced passive split");
    std::string trn_tileset, trn_modality = "thermal", trn_out;
    std::uint64_t trn_seed = 0;
    trn->add_option("--tileset", trn_tileset)->required();
    trn->add_option("--modality", trn_modality);
    trn->add_option("--seed", trn_seed);
    trn->add_option("--learning-rate", exp.classifier.learning_rate);
    trn->add_option("--epochs", exp.classifier.epochs);
    trn->add_option("--out", trn_out, "Model file")->required();

    // map
    auto* map = app.add_subcommand("map", "Cluster detections and export a map");
    std::string map_tileset, map_model, map_out;
    KMeansConfig kcfg;
    bool map_truth = false, map_unredacted = false;
    double map_threshold = 0.5, map_radius = 0.0;
    std::size_t map_elbow = 0;
    map->add_option("--tileset", map_tileset)->required();
    map->add_option("--model", map_model, "Model file (omit with --ground-truth)");
    map->add_flag("--ground-truth", map_truth, "Map ground-truth positive tiles instead of detections");
    map->add_option("--k", kcfg.k);
    map->add_option("--seed", kcfg.seed);
    map->add_option("--threshold", map_threshold);
    map->add_option("--merge-radius", map_radius, "Meters; default twice the crop stride");
    map->add_option("--elbow", map_elbow, "Also report inertia for k = 1..N");
    map->add_flag("--no-redact", map_unredacted, "Allow a basemap reference in the output");
    map->add_option("--out", map_out)->required();

    // serve
    auto* serve = app.add_subcommand("serve", "Run the labeling service");
    std::string srv_data, srv_host = "127.0.0.1";
    int srv_port = 8080;
    serve->add_option("--data", srv_data, "Directory of tilesets")->required();
    serve->add_option("--host", srv_host);
    serve->add_option("--port", srv_port);

    // time
    auto* tm = app.add_subcommand("time", "Labeling time for a number of labels");
    std::uint64_t tm_labels = 0, tm_spl = 30;
    tm->add_option("labels", tm_labels)->required();
    tm->add_option("--seconds-per-label", tm_spl);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            SiteConfig cfg = gen_benchmark ? benchmark_site_config(gen_seed) : SiteConfig{};
            cfg.seed = gen_seed;
            if (gen_extent > 0) cfg.extent_m = gen_extent;
            if (gen_positives > 0) cfg.positive_count = gen_positives;
            if (gen_void >= 0) cfg.void_fraction = gen_void;
            const Site site = generate_synthetic_site(cfg);
            save_site(site, gen_out);
            std::printf("site %s: %zu middens, %.0f m extent\n", gen_out.c_str(), site.registry.centers.size(),
                        cfg.extent_m);
        } else if (*crop) {
            const Site site = load_site(crop_site);
            const auto fusions = split_list(crop_fuse);
            const Tileset ts = build_tileset(site, geometry, fusions);
            save_tileset(ts, crop_out);
            const auto c = ts.counts();
            std::printf("tileset %s: %zu tiles (%zu positive, %zu removed), modalities:", crop_out.c_str(), ts.size(),
                        c.positives, ts.removal_log.size());
            for (const auto& m : ts.modality_names()) std::printf(" %s", m.c_str());
            std::printf("\n");
        } else if (*diag) {
            const Tileset ts = load_tileset(diag_tileset);
            const auto metric = compute_metric(ts, {});
            const auto thresholds = quantile_thresholds(metric, diag_thresholds);
            const auto curve = bayes_positive_curve(ts, metric, thresholds);
            std::printf("tiles %zu, positives %zu, base rate %.5f\n", curve.total, curve.positives, curve.base_rate);
            std::printf("%12s %8s %6s %10s %10s %s\n", "threshold", "n_t", "m_t", "P(pos|t)", "bayes", "agree");
            for (const auto& p : curve.points)
                std::printf("%12.6f %8zu %6zu %10.5f %10.5f %s\n", p.threshold, p.n_at_least, p.m_t, p.p_conditional,
                            p.p_bayes, p.forms_agree ? "yes" : "NO");
            for (const auto& n : curve.notes) std::printf("note: %s\n", n.c_str());
            if (!diag_out.empty()) {
                nlohmann::ordered_json j;
                j["total"] = curve.total;
                j["positives"] = curve.positives;
                j["base_rate"] = curve.base_rate;
                auto& pts = j["points"] = nlohmann::ordered_json::array();
                for (const auto& p : curve.points)
                    pts.push_back({{"threshold", p.threshold},
                                   {"n_at_least", p.n_at_least},
                                   {"m_t", p.m_t},
                                   {"p_conditional", p.p_conditional},
                                   {"p_bayes", p.p_bayes},
                                   {"forms_agree", p.forms_agree}});
                j["notes"] = curve.notes;
                write_file(diag_out, j.dump(2) + "\n");
            }
        } else if (*active) {
            act.strategy.kind = parse_strategy(act_strategy);
            if (!act_modalities.empty()) {
                act.strategy.modalities = split_list(act_modalities);
            } else if (act.strategy.kind == StrategyKind::multimodal_ensemble ||
                       act.strategy.kind == StrategyKind::disagree) {
                act.strategy.modalities = {"thermal", "rgb"};
            }
            const auto ts = open_tileset(act_tileset);
            auto session = open_session(ts, act);
            GroundTruthOracle oracle(ts);
            while (const auto r = session->run_round(oracle))
                std::fprintf(stderr, "round %zu: labels %zu, positives %zu\n", r->round, r->labels_used,
                             r->positives_found);
            const std::string text = run_log_text(*session);
            if (act_out.empty()) std::cout << text;
            else write_file(act_out, text);
        } else if (*passive) {
            const auto ts = open_tileset(pas_tileset);
            const auto modalities = split_list(pas_modalities);
            const auto result = run_active_benchmark(ts, {}, modalities, exp);
            fs::create_directories(pas_out);
            write_raw_trials(fs::path(pas_out) / "raw_trials.jsonl", result.trials);
            write_aggregate_csv(fs::path(pas_out) / "aggregate.csv", result.aggregate);
            print_aggregate(result.aggregate);
        } else if (*bench) {
            const auto ts = open_tileset(bench_tileset);
            std::vector<Strategy> strategies;
            for (const auto& entry : split_list(bench_strategies)) {
                const auto colon = entry.find(':');
                Strategy s;
                s.kind = parse_strategy(entry.substr(0, colon));
                if (colon != std::string::npos) {
                    s.modalities.clear();
                    std::stringstream ss(entry.substr(colon + 1));
                    for (std::string m; std::getline(ss, m, '/');) s.modalities.push_back(m);
                } else if (s.kind == StrategyKind::multimodal_ensemble || s.kind == StrategyKind::disagree) {
                    s.modalities = {"thermal", "rgb"};
                }
                strategies.push_back(s);
            }
            const auto passive_mods = split_list(bench_passive);
            const auto result = run_active_benchmark(ts, strategies, passive_mods, exp);
            fs::create_directories(bench_out);
            write_raw_trials(fs::path(bench_out) / "raw_trials.jsonl", result.trials);
            write_aggregate_csv(fs::path(bench_out) / "aggregate.csv", result.aggregate);
            write_curves_csv(fs::path(bench_out) / "curves.csv", result.trials);
            std::string sig = "a,b,budget,t,df,p\n";
            for (const auto& s : result.significance) {
                std::ostringstream row;
                row << s.a << "," << s.b << "," << s.budget << "," << std::setprecision(10) << s.test.t << ","
                    << s.test.df << "," << s.test.p << "\n";
                sig += row.str();
            }
            write_file(fs::path(bench_out) / "significance.csv", sig);
            print_aggregate(result.aggregate);
            const auto t = labeling_time(exp.budget);
            std::printf("labeling time at budget %zu: %s\n", exp.budget, t.display.c_str());
        } else if (*trn) {
            const Tileset ts = load_tileset(trn_tileset);
            const std::vector<std::string> mods{trn_modality};
            const auto features = compute_features(ts, mods, exp.classifier.architecture);
            const FeatureMatrix& fm = *features.at(trn_modality);
            const Split split = make_split(ts, {exp.positive_train_fraction, true, trn_seed});
            ClassifierConfig cc = exp.classifier;
            cc.init_seed = derive_seed(trn_seed, 1, 0);
            std::vector<Example> examples;
            for (TileId id : split.train)
                examples.push_back({fm.row(id), ts.tiles[id].label == Label::positive ? 1.0 : 0.0});
            ModelFile model{trn_modality, cc.decision_threshold,
                            train(make_classifier(fm.cols, cc), examples, cc, derive_seed(trn_seed, 3))};
            save_model(model, trn_out);
            std::size_t correct = 0;
            for (TileId id : split.test)
                correct += (predict_proba(model.state, fm.row(id)) >= cc.decision_threshold) ==
                           (ts.tiles[id].label == Label::positive);
            std::printf("trained %s on %zu tiles; test accuracy %.4f on %zu tiles\n", trn_modality.c_str(),
                        split.train.size(), static_cast<double>(correct) / static_cast<double>(split.test.size()),
                        split.test.size());
        } else if (*map) {
            const Tileset ts = load_tileset(map_tileset);
            std::vector<double> outputs(ts.size());
            if (map_truth) {
                for (const auto& t : ts.tiles) outputs[t.id] = t.label == Label::positive ? 1.0 : 0.0;
            } else {
                if (map_model.empty()) throw InvalidArgument("map needs --model or --ground-truth");
                const ModelFile model = load_model(map_model);
                const std::vector<std::string> mods{model.modality};
                const auto features = compute_features(ts, mods, model.state.architecture);
                const FeatureMatrix& fm = *features.at(model.modality);
                for (const auto& t : ts.tiles) outputs[t.id] = predict_proba(model.state, fm.row(t.id));
                map_threshold = model.decision_threshold;
            }
            auto points = detections_to_points(ts, outputs, map_threshold, map_radius);
            if (map_elbow > 0) {
                std::vector<Point2> xy;
                for (const auto& p : points) xy.push_back(p.position);
                for (const auto& e : elbow_scan(xy, 1, map_elbow, kcfg.seed))
                    std::printf("k=%zu inertia=%.3f\n", e.k, e.inertia);
            }
            const auto built = build_map(std::move(points), kcfg);
            ExportOptions opts;
            opts.redact_landscape = !map_unredacted;
            export_map(built, map_out, opts);
            std::printf("map %s: %zu points, %zu clusters\n", map_out.c_str(), built.points.size(),
                        built.clusters.centroids.size());
        } else if (*serve) {
            LabelingService service({srv_data, {}, {}});
            HttpServer server(service);
            std::printf("serving %s on %s:%d (%zu sessions restored)\n", srv_data.c_str(), srv_host.c_str(), srv_port,
                        service.session_count());
            std::fflush(stdout);
            if (!server.listen(srv_host, srv_port)) throw Error("cannot listen on port " + std::to_string(srv_port));
        } else if (*tm) {
            const auto t = labeling_time(tm_labels, tm_spl);
            std::printf("%llu labels x %llus = %llu s = %s\n", static_cast<unsigned long long>(tm_labels),
                        static_cast<unsigned long long>(tm_spl), static_cast<unsigned long long>(t.seconds),
                        t.display.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "rarequery: %s\n", e.what());
        return 1;
    }
    return 0;
}
