#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <httplib.h>

#include "rarequery/encoding.hpp"
#include "rarequery/experiments.hpp"
#include "rarequery/service.hpp"
#include "rarequery/tileset_io.hpp"

using namespace rarequery;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Fixture {
    fs::path root;
    Fixture() {
        root = fs::temp_directory_path() / ("rq_svc_" + std::to_string(::getpid()));
        fs::remove_all(root);
        SiteConfig cfg;
        cfg.seed = 5;
        cfg.extent_m = 200.0;
        cfg.positive_count = 6;
        cfg.imbalance_target = 0.2;
        cfg.planned_crop = {20.0, 20.0};
        cfg.min_separation_m = 10.0;
        cfg.rgb_resolution_m = 0.5;
        cfg.lidar_resolution_m = 0.5;
        const Site site = generate_synthetic_site(cfg);
        save_tileset(build_tileset(site, cfg.planned_crop), root / "data" / "site");
        Tileset unl = load_tileset(root / "data" / "site");
        for (auto& t : unl.tiles) {
            t.label = Label::unlabeled;
            t.label_source = LabelSource::none;
        }
        save_tileset(unl, root / "data" / "field");
    }
    ~Fixture() { fs::remove_all(root); }
    ServiceOptions options() const { return {root / "data", root / "state", {}}; }
};

ApiRequest post(const std::string& path, const json& body) { return {"POST", path, body.dump(), {}, {}}; }
ApiRequest get(const std::string& path) { return {"GET", path, "", {}, {}}; }

json body_of(const ApiResponse& r) { return json::parse(r.body); }

std::string create(LabelingService& svc, const json& body) {
    const auto r = svc.handle(post("/sessions", body));
    REQUIRE(r.status == 201);
    return body_of(r)["session_id"].get<std::string>();
}

// Answers the pending batch from ground truth.
json answer(LabelingService& svc, const std::string& id, const Tileset& truth) {
    const auto batch = body_of(svc.handle(get("/sessions/" + id + "/batch")));
    json labels = json::array();
    for (const auto& r : batch["requests"]) {
        const auto tid = r["tile_id"].get<TileId>();
        labels.push_back({{"tile_id", tid}, {"label", truth.tiles[tid].label == Label::positive ? 1 : 0}});
    }
    return {{"labels", labels}};
}

const json kHuman = {{"tileset", "site"}, {"strategy", "multimodal-single"}, {"budget", 15}, {"batch", 5}, {"seed", 3}};

}  // namespace

TEST_CASE("human-in-the-loop session over the handler") {
    Fixture fx;
    LabelingService svc(fx.options());
    const Tileset truth = load_tileset(fx.root / "data" / "site");
    const std::string id = create(svc, kHuman);
    CHECK(id == "s000001");

    const auto b1 = svc.handle(get("/sessions/" + id + "/batch"));
    REQUIRE(b1.status == 200);
    const auto j1 = body_of(b1);
    REQUIRE(j1["requests"].size() == 5);
    const auto& req = j1["requests"][0];
    CHECK(req.contains("rank_position"));
    CHECK(req.contains("metric_value"));
    const std::string png = base64_decode(req["previews"]["thermal"].get<std::string>());
    CHECK(png.substr(1, 3) == "PNG");
    CHECK(req["previews"].contains("rgb"));
    // Re-fetching returns the same pending batch.
    CHECK(body_of(svc.handle(get("/sessions/" + id + "/batch")))["requests"] == j1["requests"]);

    for (int round = 0; round < 3; ++round) {
        const auto r = svc.handle(post("/sessions/" + id + "/labels", answer(svc, id, truth)));
        REQUIRE(r.status == 200);
        CHECK(body_of(r)["labels_used"] == 5 * (round + 1));
    }
    const auto status = body_of(svc.handle(get("/sessions/" + id)));
    CHECK(status["finished"] == true);
    CHECK(status["round"] == 3);
    CHECK(svc.handle(get("/sessions/" + id + "/batch")).status == 409);

    const auto results = body_of(svc.handle(get("/sessions/" + id + "/results")));
    CHECK(results["run_log"]["rounds"].size() == 3);
    CHECK(results["detections"].is_array());
    ApiRequest raw = get("/sessions/" + id + "/results");
    raw.query["part"] = "run_log";
    CHECK(json::parse(svc.handle(raw).body) == results["run_log"]);
}

TEST_CASE("error statuses") {
    Fixture fx;
    LabelingService svc(fx.options());
    CHECK(svc.handle(get("/sessions")).status == 405);
    CHECK(svc.handle(get("/nothing")).status == 404);
    CHECK(svc.handle(get("/sessions/s999999")).status == 404);
    CHECK(svc.handle({"POST", "/sessions", "{not json", {}, {}}).status == 422);
    CHECK(svc.handle(post("/sessions", {{"tileset", "missing"}})).status == 404);
    CHECK(svc.handle(post("/sessions", {{"tileset", "../etc"}})).status == 422);
    CHECK(svc.handle(post("/sessions", {{"tileset", "site"}, {"strategy", "greedy"}})).status == 422);
    CHECK(svc.handle(post("/sessions", {{"tileset", "site"}, {"strategy", "disagree"}, {"modalities", "thermal"}}))
              .status == 422);
    CHECK(svc.handle(post("/sessions", {{"tileset", "field"}, {"oracle", "ground_truth"}})).status == 422);

    const auto big = svc.handle(post("/sessions", {{"tileset", "site"}, {"budget", 100000}}));
    CHECK(big.status == 422);
    CHECK(body_of(big)["achievable_max"].get<std::size_t>() > 0);

    const std::string id = create(svc, kHuman);
    const std::string path = "/sessions/" + id + "/labels";
    CHECK(svc.handle(post(path, {{"labels", json::array({{{"tile_id", 0}, {"label", 0}}})}})).status == 409);
    const auto batch = body_of(svc.handle(get("/sessions/" + id + "/batch")))["requests"];
    json partial = json::array();
    for (std::size_t i = 0; i + 1 < batch.size(); ++i) partial.push_back({{"tile_id", batch[i]["tile_id"]}, {"label", 0}});
    const auto r409 = svc.handle(post(path, {{"labels", partial}}));
    CHECK(r409.status == 409);
    CHECK(body_of(r409)["pending"].size() == 5);
    json bad = partial;
    bad.push_back({{"tile_id", batch[4]["tile_id"]}, {"label", "maybe"}});
    CHECK(svc.handle(post(path, {{"labels", bad}})).status == 422);
    CHECK(svc.handle(post(path, {{"labels", json::array({{{"label", 1}}})}})).status == 422);
    // Nothing above changed the session.
    CHECK(body_of(svc.handle(get("/sessions/" + id)))["labels_used"] == 0);
    CHECK(svc.handle({"DELETE", "/sessions/" + id, "", {}, {}}).status == 404);
}

TEST_CASE("idempotent creation") {
    Fixture fx;
    LabelingService svc(fx.options());
    json body = kHuman;
    body["idempotency_key"] = "abc";
    const auto first = svc.handle(post("/sessions", body));
    CHECK(first.status == 201);
    const auto again = svc.handle(post("/sessions", body));
    CHECK(again.status == 200);
    CHECK(body_of(again)["session_id"] == body_of(first)["session_id"]);
    ApiRequest via_header = post("/sessions", kHuman);
    via_header.headers["idempotency-key"] = "abc";
    CHECK(body_of(svc.handle(via_header))["session_id"] == body_of(first)["session_id"]);
    CHECK(svc.session_count() == 1);
    // Survives a restart.
    LabelingService restarted(fx.options());
    CHECK(restarted.handle(post("/sessions", body)).status == 200);
    CHECK(restarted.handle(post("/sessions", kHuman)).status == 201);
    CHECK(restarted.session_count() == 2);
}

TEST_CASE("ground-truth oracle sessions run to budget and match a direct session") {
    Fixture fx;
    LabelingService svc(fx.options());
    json body = {{"tileset", "site"}, {"strategy", "multimodal-ensemble"}, {"budget", 20}, {"batch", 5},
                 {"seed", 11},        {"oracle", "ground_truth"}};
    const std::string id = create(svc, body);
    ApiRequest raw = get("/sessions/" + id + "/results");
    raw.query["part"] = "run_log";
    const std::string served = svc.handle(raw).body;

    auto ts = std::make_shared<const Tileset>(load_tileset(fx.root / "data" / "site"));
    SessionRequest req;
    req.strategy = {StrategyKind::multimodal_ensemble, {"thermal", "rgb"}};
    req.budget = 20;
    req.batch_size = 5;
    req.seed = 11;
    auto direct = open_session(ts, req);
    GroundTruthOracle oracle(ts);
    direct->run_to_budget(oracle);
    CHECK(served == run_log_text(*direct));
}

TEST_CASE("restart replays the event log") {
    Fixture fx;
    const Tileset truth = load_tileset(fx.root / "data" / "site");
    nlohmann::ordered_json snapshot;
    std::string id;
    {
        LabelingService svc(fx.options());
        id = create(svc, kHuman);
        svc.handle(post("/sessions/" + id + "/labels", answer(svc, id, truth)));
        svc.handle(get("/sessions/" + id + "/batch"));  // pending batch survives too
        snapshot = svc.session_snapshot(id);
    }
    LabelingService again(fx.options());
    CHECK(again.session_snapshot(id) == snapshot);
    CHECK(again.session_snapshot("s424242").is_null());
}

TEST_CASE("crash after labels are durable completes the round on replay") {
    Fixture fx;
    const Tileset truth = load_tileset(fx.root / "data" / "site");
    std::string id;
    json labels;
    {
        ServiceOptions opt = fx.options();
        bool armed = true;
        opt.after_event = [&](std::string_view e) {
            if (armed && e == "labels-received") {
                armed = false;
                throw std::runtime_error("simulated crash");
            }
        };
        LabelingService svc(opt);
        id = create(svc, kHuman);
        labels = answer(svc, id, truth);
        CHECK_THROWS(svc.handle(post("/sessions/" + id + "/labels", labels)));
    }
    // Reference: the same session with the round completed normally.
    const fs::path ref_state = fx.root / "ref";
    ServiceOptions ref_opt{fx.root / "data", ref_state, {}};
    LabelingService ref(ref_opt);
    const std::string rid = create(ref, kHuman);
    ref.handle(get("/sessions/" + rid + "/batch"));
    REQUIRE(ref.handle(post("/sessions/" + rid + "/labels", labels)).status == 200);

    // A torn half-line from the crash must be ignored.
    const fs::path log = fx.root / "state" / (id + ".jsonl");
    {
        std::ofstream out(log, std::ios::app);
        out << "{\"event\":\"batch-iss";
    }
    LabelingService recovered(fx.options());
    CHECK(recovered.session_snapshot(id) == ref.session_snapshot(rid));
    const auto status = body_of(recovered.handle(get("/sessions/" + id)));
    CHECK(status["labels_used"] == 5);
    CHECK(status["pending"] == 0);
    const std::string text = read_file(log);
    CHECK(text.back() == '\n');
    CHECK(text.find("batch-iss\"") == std::string::npos);
    CHECK(text.rfind("round-trained") != std::string::npos);
    // The session continues normally.
    CHECK(recovered.handle(post("/sessions/" + id + "/labels", answer(recovered, id, truth))).status == 200);
}

TEST_CASE("HTTP front end") {
    Fixture fx;
    LabelingService svc(fx.options());
    HttpServer server(svc);
    const int port = server.start("127.0.0.1", 0);
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);
    auto res = cli.Post("/sessions", kHuman.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 201);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    const std::string id = json::parse(res->body)["session_id"];
    res = cli.Get("/sessions/" + id + "/batch");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["requests"].size() == 5);
    res = cli.Post("/sessions/" + id + "/labels", R"({"labels": []})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 409);
    res = cli.Get("/sessions/" + id + "/results?part=run_log");
    REQUIRE(res);
    CHECK(json::parse(res->body)["labels_used"] == 0);
    res = cli.Options("/sessions");
    REQUIRE(res);
    CHECK(res->status == 204);
    server.stop();
}
