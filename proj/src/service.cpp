#include "rarequery/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <httplib.h>

#include "rarequery/encoding.hpp"
#include "rarequery/mapping.hpp"
#include "rarequery/tileset_io.hpp"

namespace rarequery {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct HttpError : Error {
    HttpError(int status, const std::string& what, ordered_json extra = ordered_json::object())
        : Error(what), status(status), extra(std::move(extra)) {}
    int status;
    ordered_json extra;
};

ApiResponse json_response(int status, const ordered_json& body) { return {status, body.dump() + "\n"}; }

ApiResponse error_response(int status, const std::string& message, ordered_json extra = ordered_json::object()) {
    ordered_json body;
    body["schema_version"] = kServiceSchemaVersion;
    body["error"] = {{"status", status}, {"message", message}};
    for (auto it = extra.begin(); it != extra.end(); ++it) body[it.key()] = it.value();
    return json_response(status, body);
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::stringstream ss(path);
    for (std::string part; std::getline(ss, part, '/');)
        if (!part.empty()) parts.push_back(part);
    return parts;
}

Label parse_label_value(const nlohmann::json& v) {
    if (v.is_boolean()) return v.get<bool>() ? Label::positive : Label::negative;
    if (v.is_number_integer()) {
        const auto n = v.get<long long>();
        if (n == 0) return Label::negative;
        if (n == 1) return Label::positive;
    }
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "positive" || s == "1") return Label::positive;
        if (s == "negative" || s == "0") return Label::negative;
    }
    throw HttpError(422, "unknown label value " + v.dump());
}

std::vector<std::string> default_modalities(StrategyKind k) {
    if (k == StrategyKind::multimodal_ensemble || k == StrategyKind::disagree) return {"thermal", "rgb"};
    return {"thermal"};
}

/// Validated, normalized creation request; this exact form is what the event log stores.
ordered_json normalize_request(const nlohmann::json& body) {
    if (!body.is_object()) throw HttpError(422, "request body must be a JSON object");
    ordered_json n;
    try {
        n["tileset"] = body.at("tileset").get<std::string>();
        const auto kind = parse_strategy(body.value("strategy", std::string("multimodal-single")));
        std::vector<std::string> modalities;
        if (!body.contains("modalities")) {
            modalities = default_modalities(kind);
        } else if (body["modalities"].is_string()) {
            std::stringstream ss(body["modalities"].get<std::string>());
            for (std::string m; std::getline(ss, m, ',');) modalities.push_back(m);
        } else {
            modalities = body["modalities"].get<std::vector<std::string>>();
        }
        n["strategy"] = to_string(kind);
        n["modalities"] = modalities;
        n["budget"] = body.value("budget", std::size_t{500});
        n["batch"] = body.value("batch", std::size_t{10});
        n["seed"] = body.value("seed", std::uint64_t{0});
        n["learning_rate"] = body.value("learning_rate", 1e-2);
        n["epochs"] = body.value("epochs", std::size_t{10});
        std::string oracle = body.value("oracle", std::string("human"));
        std::replace(oracle.begin(), oracle.end(), '-', '_');
        if (oracle != "human" && oracle != "ground_truth") throw HttpError(422, "oracle must be human or ground_truth");
        n["oracle"] = oracle;
    } catch (const nlohmann::json::exception& e) {
        throw HttpError(422, std::string("invalid session request: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw HttpError(422, e.what());
    }
    const std::string name = n["tileset"];
    if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos)
        throw HttpError(422, "tileset must be a plain directory name");
    return n;
}

SessionRequest to_session_request(const ordered_json& n) {
    SessionRequest r;
    r.strategy.kind = parse_strategy(n["strategy"].get<std::string>());
    r.strategy.modalities = n["modalities"].get<std::vector<std::string>>();
    r.budget = n["budget"].get<std::size_t>();
    r.batch_size = n["batch"].get<std::size_t>();
    r.seed = n["seed"].get<std::uint64_t>();
    r.learning_rate = n["learning_rate"].get<double>();
    r.epochs = n["epochs"].get<std::size_t>();
    return r;
}

ordered_json labels_json(std::span<const Label> labels) {
    ordered_json out = ordered_json::array();
    for (Label l : labels) out.push_back(l == Label::positive ? 1 : 0);
    return out;
}

}  // namespace

struct LabelingService::Session {
    std::mutex mutex;
    std::string id;
    ordered_json request;
    std::string idempotency_key;
    std::shared_ptr<const Tileset> tileset;
    std::unique_ptr<ActiveSession> active;
    fs::path log_path;
    bool round_open = false;  // labels recorded without a round-trained event
};

std::string preview_png(const ModalityBlock& block, TileId id) {
    const auto data = block.block(id);
    const std::size_t out_channels = block.channels == 3 ? 3 : 1;
    std::vector<float> lo(out_channels, std::numeric_limits<float>::infinity());
    std::vector<float> hi(out_channels, -std::numeric_limits<float>::infinity());
    const std::size_t pixels = block.height * block.width;
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < out_channels; ++c) {
            const float v = data[p * block.channels + c];
            lo[c] = std::min(lo[c], v);
            hi[c] = std::max(hi[c], v);
        }
    std::vector<std::uint8_t> bytes(pixels * out_channels);
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t c = 0; c < out_channels; ++c) {
            const float range = hi[c] - lo[c];
            const float v = range > 0 ? (data[p * block.channels + c] - lo[c]) / range : 0.0f;
            bytes[p * out_channels + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
    return encode_png(bytes, block.width, block.height, out_channels);
}

LabelingService::LabelingService(ServiceOptions options) : options_(std::move(options)) {
    if (options_.state_dir.empty()) options_.state_dir = options_.data_dir / "sessions";
    fs::create_directories(options_.state_dir);
    std::vector<fs::path> logs;
    for (const auto& entry : fs::directory_iterator(options_.state_dir))
        if (entry.path().extension() == ".jsonl") logs.push_back(entry.path());
    std::sort(logs.begin(), logs.end());
    for (const auto& log : logs) replay(log);
}

LabelingService::~LabelingService() = default;

std::size_t LabelingService::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

ordered_json LabelingService::session_snapshot(const std::string& id) const {
    const auto s = find(id);
    if (!s) return nullptr;
    std::lock_guard lock(s->mutex);
    return s->active->snapshot();
}

std::shared_ptr<LabelingService::Session> LabelingService::find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::shared_ptr<const Tileset> LabelingService::tileset(const std::string& name) {
    {
        std::lock_guard lock(mutex_);
        if (const auto it = tilesets_.find(name); it != tilesets_.end()) return it->second;
    }
    const fs::path dir = options_.data_dir / name;
    if (!fs::exists(dir / "manifest.json")) throw HttpError(404, "unknown tileset '" + name + "'");
    std::shared_ptr<const Tileset> ts;
    try {
        ts = std::make_shared<const Tileset>(load_tileset(dir));
    } catch (const TilesetIoError& e) {
        throw HttpError(422, std::string("tileset '") + name + "' failed to load: " + e.what());
    }
    std::lock_guard lock(mutex_);
    return tilesets_.emplace(name, ts).first->second;
}

void LabelingService::append_event(Session& s, const ordered_json& event) {
    const std::string line = event.dump() + "\n";
    const int fd = ::open(s.log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw Error("cannot open event log " + s.log_path.string());
    const bool ok = ::write(fd, line.data(), line.size()) == static_cast<ssize_t>(line.size()) && ::fsync(fd) == 0;
    ::close(fd);
    if (!ok) throw Error("cannot append to event log " + s.log_path.string());
    if (options_.after_event) options_.after_event(event["event"].get<std::string>());
}

ordered_json LabelingService::status_json(const Session& s) const {
    const auto& a = *s.active;
    ordered_json j;
    j["schema_version"] = kServiceSchemaVersion;
    j["session_id"] = s.id;
    j["tileset"] = s.request["tileset"];
    j["strategy"] = s.request["strategy"];
    j["modalities"] = s.request["modalities"];
    j["oracle"] = s.request["oracle"];
    j["budget"] = a.config().budget;
    j["batch_size"] = a.config().batch_size;
    j["labels_used"] = a.labels_used();
    j["positives_found"] = a.positives_found();
    j["round"] = a.round();
    j["weights"] = a.weights().weights;
    j["correct"] = a.weights().correct;
    j["pending"] = a.pending().size();
    j["finished"] = a.finished();
    j["last_round"] = a.log().empty() ? ordered_json() : round_log_json(a.log().back());
    return j;
}

void LabelingService::run_oracle(Session& s) {
    GroundTruthOracle oracle(s.tileset);
    for (;;) {
        const bool fresh = !s.active->has_pending();
        const std::vector<TileId> batch = s.active->pending_batch();
        if (batch.empty()) break;
        const std::size_t round = s.active->round();
        if (fresh) append_event(s, {{"event", "batch-issued"}, {"round", round}, {"ids", batch}});
        const auto labels = oracle.label(batch);
        append_event(s, {{"event", "labels-received"},
                         {"round", round},
                         {"ids", batch},
                         {"labels", labels_json(labels)},
                         {"source", to_string(oracle.source())}});
        s.active->submit_labels(batch, labels, oracle.source());
        append_event(s, {{"event", "round-trained"}, {"round", round}, {"labels_used", s.active->labels_used()}});
    }
}

void LabelingService::replay(const fs::path& log) {
    const std::string text = read_file(log);
    std::vector<ordered_json> events;
    std::size_t valid_bytes = 0;
    for (std::size_t pos = 0; pos < text.size();) {
        const std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) break;  // torn final write
        try {
            events.push_back(ordered_json::parse(text.substr(pos, end - pos)));
        } catch (const nlohmann::json::exception&) {
            break;
        }
        pos = valid_bytes = end + 1;
    }
    if (valid_bytes != text.size()) fs::resize_file(log, valid_bytes);
    if (events.empty() || events.front().value("event", "") != "created") return;

    auto s = std::make_shared<Session>();
    const auto& created = events.front();
    s->id = created["session_id"].get<std::string>();
    s->request = created["request"];
    s->idempotency_key = created.value("idempotency_key", std::string());
    s->log_path = log;
    s->tileset = tileset(s->request["tileset"].get<std::string>());
    s->active = open_session(s->tileset, to_session_request(s->request));

    for (std::size_t i = 1; i < events.size(); ++i) {
        const auto& e = events[i];
        const std::string kind = e["event"];
        if (kind == "batch-issued") {
            const auto& batch = s->active->pending_batch();
            if (batch != e["ids"].get<std::vector<TileId>>())
                throw Error("replay of " + log.string() + " diverged at round " + e["round"].dump());
        } else if (kind == "labels-received") {
            std::vector<Label> labels;
            for (const auto& v : e["labels"]) labels.push_back(v.get<int>() == 1 ? Label::positive : Label::negative);
            s->active->pending_batch();
            s->active->submit_labels(e["ids"].get<std::vector<TileId>>(), labels,
                                     parse_label_source(e["source"].get<std::string>()));
            s->round_open = true;
        } else if (kind == "round-trained") {
            s->round_open = false;
        }
    }
    if (s->round_open) {
        // Labels were durable but the crash came before the round was recorded as trained.
        append_event(*s, {{"event", "round-trained"},
                          {"round", s->active->round() - 1},
                          {"labels_used", s->active->labels_used()}});
        s->round_open = false;
    }
    if (s->request["oracle"] == "ground_truth") run_oracle(*s);

    std::lock_guard lock(mutex_);
    sessions_[s->id] = s;
    if (!s->idempotency_key.empty()) idempotency_[s->idempotency_key] = s->id;
    const auto number = std::stoull(s->id.substr(1));
    next_id_ = std::max<std::size_t>(next_id_, number + 1);
}

ApiResponse LabelingService::handle(const ApiRequest& request) {
    try {
        const auto parts = split_path(request.path);
        if (parts.empty() || parts[0] != "sessions") throw HttpError(404, "no route for " + request.path);
        if (parts.size() == 1) {
            if (request.method != "POST") throw HttpError(405, "use POST /sessions");
            return create_session(request);
        }
        const auto s = find(parts[1]);
        if (!s) throw HttpError(404, "unknown session '" + parts[1] + "'");
        std::lock_guard lock(s->mutex);
        if (parts.size() == 2 && request.method == "GET") return get_status(*s);
        if (parts.size() == 3 && parts[2] == "batch" && request.method == "GET") return get_batch(*s);
        if (parts.size() == 3 && parts[2] == "labels" && request.method == "POST") return post_labels(*s, request);
        if (parts.size() == 3 && parts[2] == "results" && request.method == "GET") return get_results(*s, request);
        throw HttpError(404, "no route for " + request.method + " " + request.path);
    } catch (const HttpError& e) {
        return error_response(e.status, e.what(), e.extra);
    }
}

ApiResponse LabelingService::create_session(const ApiRequest& request) {
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(request.body);
    } catch (const nlohmann::json::exception& e) {
        throw HttpError(422, std::string("request body is not JSON: ") + e.what());
    }
    std::string key = body.is_object() ? body.value("idempotency_key", std::string()) : std::string();
    if (const auto h = request.headers.find("idempotency-key"); key.empty() && h != request.headers.end()) key = h->second;
    if (!key.empty()) {
        std::shared_ptr<Session> existing;
        {
            std::lock_guard lock(mutex_);
            if (const auto it = idempotency_.find(key); it != idempotency_.end()) existing = sessions_.at(it->second);
        }
        if (existing) {
            std::lock_guard lock(existing->mutex);
            return json_response(200, {{"schema_version", kServiceSchemaVersion},
                                       {"session_id", existing->id},
                                       {"status", status_json(*existing)}});
        }
    }

    auto s = std::make_shared<Session>();
    s->request = normalize_request(body);
    s->idempotency_key = key;
    s->tileset = tileset(s->request["tileset"].get<std::string>());
    const bool oracle = s->request["oracle"] == "ground_truth";
    if (oracle && s->tileset->counts().unlabeled != 0)
        throw HttpError(422, "the ground_truth oracle needs a fully labeled tileset");
    try {
        s->active = open_session(s->tileset, to_session_request(s->request));
    } catch (const InvalidArgument& e) {
        throw HttpError(422, e.what());
    }
    const std::size_t achievable = s->active->unlabeled_in_pool();
    if (s->active->config().budget > achievable)
        throw HttpError(422, "budget exceeds the unlabeled tiles available to the session",
                        {{"achievable_max", achievable}});

    std::lock_guard<std::mutex> session_lock(s->mutex);
    {
        std::lock_guard lock(mutex_);
        if (!key.empty() && idempotency_.contains(key)) {
            // Lost a race with an identical request; answer with the winner.
            const auto winner = sessions_.at(idempotency_.at(key));
            return json_response(200, {{"schema_version", kServiceSchemaVersion}, {"session_id", winner->id}});
        }
        char id[32];
        std::snprintf(id, sizeof id, "s%06zu", next_id_++);
        s->id = id;
        s->log_path = options_.state_dir / (s->id + ".jsonl");
        sessions_[s->id] = s;
        if (!key.empty()) idempotency_[key] = s->id;
    }
    ordered_json created = {{"event", "created"}, {"session_id", s->id}, {"request", s->request}};
    if (!key.empty()) created["idempotency_key"] = key;
    append_event(*s, created);
    if (oracle) run_oracle(*s);
    return json_response(201, {{"schema_version", kServiceSchemaVersion}, {"session_id", s->id}, {"status", status_json(*s)}});
}

ApiResponse LabelingService::get_batch(Session& s) {
    auto& a = *s.active;
    if (a.finished())
        throw HttpError(409, "session budget is exhausted", {{"status", status_json(s)}});
    const bool fresh = !a.has_pending();
    const std::vector<TileId> batch = a.pending_batch();
    if (fresh) append_event(s, {{"event", "batch-issued"}, {"round", a.round()}, {"ids", batch}});

    const auto& ctx = a.context();
    ordered_json requests = ordered_json::array();
    for (TileId id : batch) {
        const auto rank = static_cast<std::size_t>(
            std::find(ctx.rank.order.begin(), ctx.rank.order.end(), id) - ctx.rank.order.begin());
        ordered_json previews = ordered_json::object();
        for (const auto& block : s.tileset->modalities)
            if (block.name.find('+') == std::string::npos) previews[block.name] = base64_encode(preview_png(block, id));
        const auto& tile = s.tileset->tiles[id];
        requests.push_back({{"session_id", s.id},
                            {"tile_id", id},
                            {"rank_position", rank},
                            {"metric_value", ctx.rank.metric[id]},
                            {"center", {tile.center.x, tile.center.y}},
                            {"previews", previews}});
    }
    return json_response(200, {{"schema_version", kServiceSchemaVersion},
                               {"session_id", s.id},
                               {"round", a.round()},
                               {"requests", requests}});
}

ApiResponse LabelingService::post_labels(Session& s, const ApiRequest& request) {
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(request.body);
    } catch (const nlohmann::json::exception& e) {
        throw HttpError(422, std::string("request body is not JSON: ") + e.what());
    }
    const nlohmann::json& items = body.is_array() ? body : body.value("labels", nlohmann::json::array());
    if (!items.is_array()) throw HttpError(422, "labels must be an array");
    std::vector<TileId> ids;
    std::vector<Label> labels;
    for (const auto& item : items) {
        if (!item.is_object() || !item.contains("tile_id") || !item["tile_id"].is_number_unsigned())
            throw HttpError(422, "each label needs a tile_id");
        if (!item.contains("label")) throw HttpError(422, "each label needs a label value");
        ids.push_back(item["tile_id"].get<TileId>());
        labels.push_back(parse_label_value(item["label"]));
    }
    LabelSource source = LabelSource::human;
    if (body.is_object() && body.contains("source")) {
        try {
            source = parse_label_source(body["source"].get<std::string>());
        } catch (const std::exception& e) {
            throw HttpError(422, std::string("unknown label source: ") + e.what());
        }
    }

    auto& a = *s.active;
    if (!a.has_pending()) throw HttpError(409, "no batch is pending for this session", {{"status", status_json(s)}});
    std::vector<TileId> sorted = ids, pending = a.pending();
    std::sort(sorted.begin(), sorted.end());
    std::sort(pending.begin(), pending.end());
    if (sorted != pending)
        throw HttpError(409, "labels do not cover exactly the pending batch",
                        {{"pending", a.pending()}, {"status", status_json(s)}});

    const std::size_t round = a.round();
    append_event(s, {{"event", "labels-received"},
                     {"round", round},
                     {"ids", ids},
                     {"labels", labels_json(labels)},
                     {"source", to_string(source)}});
    s.round_open = true;
    a.submit_labels(ids, labels, source);
    append_event(s, {{"event", "round-trained"}, {"round", round}, {"labels_used", a.labels_used()}});
    s.round_open = false;
    return json_response(200, status_json(s));
}

ApiResponse LabelingService::get_status(Session& s) { return json_response(200, status_json(s)); }

ApiResponse LabelingService::get_results(Session& s, const ApiRequest& request) {
    const auto& a = *s.active;
    if (const auto it = request.query.find("part"); it != request.query.end() && it->second == "run_log")
        return {200, run_log_text(a)};
    std::vector<double> outputs(s.tileset->size());
    for (const auto& t : s.tileset->tiles) outputs[t.id] = a.score_positive(t.id);
    ordered_json detections = ordered_json::array();
    for (const auto& p : detections_to_points(*s.tileset, outputs, a.config().classifier.decision_threshold))
        detections.push_back(
            {{"x", p.position.x}, {"y", p.position.y}, {"confidence", p.confidence}, {"members", p.members}});
    return json_response(200, {{"schema_version", kServiceSchemaVersion},
                               {"session_id", s.id},
                               {"run_log", run_log_json(a)},
                               {"detections", detections}});
}

// ---- HTTP ---------------------------------------------------------------------

struct HttpServer::Impl {
    LabelingService& service;
    httplib::Server server;
    std::thread thread;

    explicit Impl(LabelingService& s) : service(s) {
        auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
            ApiRequest api;
            api.method = req.method;
            api.path = req.path;
            api.body = req.body;
            for (const auto& [k, v] : req.params) api.query[k] = v;
            for (const auto& [k, v] : req.headers) {
                std::string name = k;
                std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
                api.headers[name] = v;
            }
            ApiResponse out;
            try {
                out = service.handle(api);
            } catch (const std::exception& e) {
                out = error_response(500, e.what());
            }
            res.status = out.status;
            res.set_header("Access-Control-Allow-Origin", "*");
            res.set_content(out.body, out.content_type);
        };
        server.Get(".*", dispatch);
        server.Post(".*", dispatch);
        server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, Idempotency-Key");
            res.status = 204;
        });
    }
};

HttpServer::HttpServer(LabelingService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void HttpServer::stop() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace rarequery
