#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

#include <json.hpp>

#include "rarequery/experiments.hpp"

namespace rarequery {

inline constexpr int kServiceSchemaVersion = 1;

struct ServiceOptions {
    std::filesystem::path data_dir;   // tilesets live in data_dir/<name>
    std::filesystem::path state_dir;  // event logs; defaults to data_dir/sessions
    // Called after each event is durable; throwing simulates a crash at that point.
    std::function<void(std::string_view event)> after_event;
};

struct ApiRequest {
    std::string method;
    std::string path;
    std::string body;
    std::map<std::string, std::string> query;
    std::map<std::string, std::string> headers;  // lower-case names
};

struct ApiResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

/// Session store and REST handlers. Every mutation is appended to a per-session
/// JSON-lines event log before it is acknowledged; constructing a service over
/// an existing state directory replays the logs.
class LabelingService {
public:
    explicit LabelingService(ServiceOptions options);
    ~LabelingService();
    LabelingService(const LabelingService&) = delete;
    LabelingService& operator=(const LabelingService&) = delete;

    ApiResponse handle(const ApiRequest& request);

    std::size_t session_count() const;
    /// Session state snapshot, for replay checks; null when unknown.
    nlohmann::ordered_json session_snapshot(const std::string& id) const;

private:
    struct Session;

    ApiResponse create_session(const ApiRequest& request);
    ApiResponse get_batch(Session& s);
    ApiResponse post_labels(Session& s, const ApiRequest& request);
    ApiResponse get_status(Session& s);
    ApiResponse get_results(Session& s, const ApiRequest& request);

    std::shared_ptr<const Tileset> tileset(const std::string& name);
    std::shared_ptr<Session> find(const std::string& id) const;
    void append_event(Session& s, const nlohmann::ordered_json& event);
    void run_oracle(Session& s);
    void replay(const std::filesystem::path& log);
    nlohmann::ordered_json status_json(const Session& s) const;

    ServiceOptions options_;
    mutable std::mutex mutex_;  // guards the maps below
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, std::string> idempotency_;
    std::map<std::string, std::shared_ptr<const Tileset>> tilesets_;
    std::size_t next_id_ = 1;
};

/// HTTP front end (cpp-httplib) dispatching to a LabelingService.
class HttpServer {
public:
    explicit HttpServer(LabelingService& service);
    ~HttpServer();

    /// Binds (port 0 picks a free port) and serves on a background thread.
    int start(const std::string& host, int port);
    /// Binds and serves on the calling thread until stop().
    bool listen(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// 8-bit preview of one tile block: per-channel min-max stretch over the tile.
std::string preview_png(const ModalityBlock& block, TileId id);

}  // namespace rarequery
