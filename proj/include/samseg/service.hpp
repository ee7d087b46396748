#pragma once

// Session service: encode once per session, decode per click, persist
// clicks so sessions survive a restart, and expose everything over HTTP.

#include "samseg/clicker.hpp"
#include "samseg/data.hpp"
#include "samseg/image_io.hpp"
#include "samseg/rle.hpp"
#include "samseg/segmenter.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace samseg {

/// Error carrying the HTTP status it maps to (404, 409, 422).
struct ServiceError : std::runtime_error {
    ServiceError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
    int status;
};

class ModelRegistry {
  public:
    void add(const std::string& id, std::shared_ptr<Segmenter> model, const std::string& description = "");
    std::shared_ptr<Segmenter> find(const std::string& id) const;
    struct Entry {
        std::string id;
        std::string description;
        std::shared_ptr<Segmenter> model;
    };
    const std::vector<Entry>& entries() const { return entries_; }

  private:
    std::vector<Entry> entries_;
};

using PatchLookup = std::function<std::optional<Patch>(const std::string& patch_id)>;

PatchLookup memory_lookup(std::vector<Patch> patches);
PatchLookup manifest_lookup(CorpusManifest manifest);

struct StoredSession {
    std::string id;
    std::string model_id;
    std::string patch_id;  // empty for uploads
    Bytes upload_png;      // empty for corpus sessions
    std::vector<Click> clicks;
    std::string created;
    std::string updated;
};

/// Embedded SQLite store in write-ahead-log mode. Thread-safe.
class SessionStore {
  public:
    /// ":memory:" gives a private in-memory database.
    explicit SessionStore(const std::filesystem::path& path);
    ~SessionStore();
    SessionStore(const SessionStore&) = delete;
    SessionStore& operator=(const SessionStore&) = delete;

    void put(const StoredSession& s);
    void remove(const std::string& id);
    std::vector<StoredSession> all() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SessionInfo {
    std::string id;
    std::string model_id;
    std::string patch_id;
    Index height = 0;
    Index width = 0;
    Index embedding_side = 0;
    bool has_ground_truth = false;
    std::size_t clicks = 0;
    std::string created;
    std::string updated;
};

struct ClickOutcome {
    Click click;
    Mask mask;
    std::optional<double> iou;
    double seconds = 0.0;
};

nlohmann::json to_json(const SessionInfo& s);
nlohmann::json to_json(const ClickOutcome& c);

class SessionManager {
  public:
    SessionManager(std::shared_ptr<const ModelRegistry> models, PatchLookup patches = {},
                   std::shared_ptr<SessionStore> store = nullptr);
    ~SessionManager();

    /// 404 on unknown model or patch.
    SessionInfo create_from_patch(const std::string& model_id, const std::string& patch_id);
    /// 404 on unknown model, 422 on an undecodable or non-square image.
    SessionInfo create_from_upload(const std::string& model_id, std::span<const std::uint8_t> png);

    /// 404 on unknown session, 422 on out-of-bounds coordinates (state is
    /// left unchanged). Concurrent calls on one session are serialized.
    ClickOutcome add_click(const std::string& id, Index row, Index col, Polarity polarity);
    /// Pops the last click and restores the prediction before it; 409 when
    /// there is nothing to undo. Returns the info after the undo.
    SessionInfo undo(const std::string& id);

    std::vector<TrajectoryEntry> export_session(const std::string& id) const;
    /// Current binary mask (all background before the first click).
    Mask current_mask(const std::string& id) const;
    SessionInfo info(const std::string& id) const;
    InteractionState state(const std::string& id) const;
    std::size_t session_count() const;

    /// Rebuilds every persisted session: re-encodes the image and replays the
    /// stored clicks. Returns the number restored.
    std::size_t restore();

  private:
    struct Session;
    std::shared_ptr<Session> get(const std::string& id) const;
    std::shared_ptr<Session> open(const std::string& id, const std::string& model_id, const std::string& patch_id,
                                  Bytes upload, const std::string& created);
    void persist(const Session& s) const;
    static ClickOutcome apply_click(Session& s, Index row, Index col, Polarity polarity);
    static SessionInfo describe(const Session& s);

    std::shared_ptr<const ModelRegistry> models_;
    PatchLookup patches_;
    std::shared_ptr<SessionStore> store_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path static_dir;  // optional UI assets mounted at /
};

/// HTTP+JSON front end over a SessionManager.
class HttpServer {
  public:
    HttpServer(SessionManager& sessions, const ModelRegistry& models, ServerOptions opts = {});
    ~HttpServer();

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Binds and serves on the calling thread until stop().
    void run();
    void stop();
    int port() const { return port_; }

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::string host_;
    int port_ = 0;
};

}  // namespace samseg
