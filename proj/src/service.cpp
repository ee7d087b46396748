#include "samseg/service.hpp"

#include <httplib.h>
#include <sqlite3.h>

#include <chrono>
#include <ctime>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

namespace samseg {

void ModelRegistry::add(const std::string& id, std::shared_ptr<Segmenter> model, const std::string& description) {
    if (find(id)) throw ArgumentError("model id '" + id + "' registered twice");
    entries_.push_back({id, description, std::move(model)});
}

std::shared_ptr<Segmenter> ModelRegistry::find(const std::string& id) const {
    for (const auto& e : entries_)
        if (e.id == id) return e.model;
    return nullptr;
}

PatchLookup memory_lookup(std::vector<Patch> patches) {
    auto shared = std::make_shared<std::vector<Patch>>(std::move(patches));
    return [shared](const std::string& id) -> std::optional<Patch> {
        for (const auto& p : *shared)
            if (p.patch_id == id) return p;
        return std::nullopt;
    };
}

PatchLookup manifest_lookup(CorpusManifest manifest) {
    auto shared = std::make_shared<CorpusManifest>(std::move(manifest));
    return [shared](const std::string& id) -> std::optional<Patch> {
        for (const auto& e : shared->entries)
            if (e.patch_id == id) return load_patch(*shared, e);
        return std::nullopt;
    };
}

// ---------------------------------------------------------------- store

struct SessionStore::Impl {
    sqlite3* db = nullptr;
    mutable std::mutex mutex;

    void exec(const char* sql) const {
        char* err = nullptr;
        if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
            std::string msg = err ? err : "unknown error";
            sqlite3_free(err);
            throw std::runtime_error("session store: " + msg);
        }
    }
    void check(int rc, const char* what) const {
        if (rc != SQLITE_OK && rc != SQLITE_DONE && rc != SQLITE_ROW)
            throw std::runtime_error(std::string("session store: ") + what + ": " + sqlite3_errmsg(db));
    }
};

namespace {

struct Statement {
    sqlite3_stmt* stmt = nullptr;
    Statement(sqlite3* db, const char* sql) {
        if (sqlite3_prepare_v2(db, sql, -1, &stmt, nullptr) != SQLITE_OK)
            throw std::runtime_error(std::string("session store: prepare: ") + sqlite3_errmsg(db));
    }
    ~Statement() { sqlite3_finalize(stmt); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;
    void text(int i, const std::string& s) { sqlite3_bind_text(stmt, i, s.c_str(), -1, SQLITE_TRANSIENT); }
    std::string column_text(int i) const {
        const auto* p = sqlite3_column_text(stmt, i);
        return p ? reinterpret_cast<const char*>(p) : "";
    }
};

}  // namespace

SessionStore::SessionStore(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
    if (sqlite3_open(path.c_str(), &impl_->db) != SQLITE_OK) {
        std::string msg = sqlite3_errmsg(impl_->db);
        sqlite3_close(impl_->db);
        throw std::runtime_error("session store: cannot open " + path.string() + ": " + msg);
    }
    impl_->exec("PRAGMA journal_mode=WAL;");
    impl_->exec("PRAGMA synchronous=NORMAL;");
    impl_->exec(
        "CREATE TABLE IF NOT EXISTS sessions ("
        " id TEXT PRIMARY KEY, model_id TEXT NOT NULL, patch_id TEXT NOT NULL, upload BLOB,"
        " clicks TEXT NOT NULL, created TEXT NOT NULL, updated TEXT NOT NULL);");
}

SessionStore::~SessionStore() { sqlite3_close(impl_->db); }

void SessionStore::put(const StoredSession& s) {
    std::lock_guard lock(impl_->mutex);
    Statement st(impl_->db,
                 "INSERT INTO sessions (id, model_id, patch_id, upload, clicks, created, updated)"
                 " VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)"
                 " ON CONFLICT(id) DO UPDATE SET clicks = excluded.clicks, updated = excluded.updated;");
    nlohmann::json clicks = nlohmann::json::array();
    for (const auto& c : s.clicks) clicks.push_back(to_json(c));
    st.text(1, s.id);
    st.text(2, s.model_id);
    st.text(3, s.patch_id);
    if (s.upload_png.empty())
        sqlite3_bind_null(st.stmt, 4);
    else
        sqlite3_bind_blob(st.stmt, 4, s.upload_png.data(), static_cast<int>(s.upload_png.size()), SQLITE_TRANSIENT);
    st.text(5, clicks.dump());
    st.text(6, s.created);
    st.text(7, s.updated);
    impl_->check(sqlite3_step(st.stmt), "put");
}

void SessionStore::remove(const std::string& id) {
    std::lock_guard lock(impl_->mutex);
    Statement st(impl_->db, "DELETE FROM sessions WHERE id = ?1;");
    st.text(1, id);
    impl_->check(sqlite3_step(st.stmt), "remove");
}

std::vector<StoredSession> SessionStore::all() const {
    std::lock_guard lock(impl_->mutex);
    Statement st(impl_->db,
                 "SELECT id, model_id, patch_id, upload, clicks, created, updated FROM sessions ORDER BY created, id;");
    std::vector<StoredSession> out;
    int rc;
    while ((rc = sqlite3_step(st.stmt)) == SQLITE_ROW) {
        StoredSession s;
        s.id = st.column_text(0);
        s.model_id = st.column_text(1);
        s.patch_id = st.column_text(2);
        if (const void* blob = sqlite3_column_blob(st.stmt, 3)) {
            const auto* b = static_cast<const std::uint8_t*>(blob);
            s.upload_png.assign(b, b + sqlite3_column_bytes(st.stmt, 3));
        }
        for (const auto& c : nlohmann::json::parse(st.column_text(4))) s.clicks.push_back(click_from_json(c));
        s.created = st.column_text(5);
        s.updated = st.column_text(6);
        out.push_back(std::move(s));
    }
    impl_->check(rc, "scan");
    return out;
}

// ---------------------------------------------------------------- sessions

struct SessionManager::Session {
    std::mutex mutex;
    std::string id, model_id, patch_id, created, updated;
    Bytes upload;
    std::shared_ptr<Segmenter> model;
    std::shared_ptr<const EncodedImage> encoded;
    Index height = 0, width = 0;
    std::optional<Mask> gt;
    InteractionState state;
    struct Snapshot {
        std::optional<Mask> prediction;
        std::optional<Logits> logits;
    };
    std::vector<Snapshot> history;  // state before each click
    std::vector<std::optional<double>> ious;
};

namespace {

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

std::string new_session_id() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(m);
    char buf[33];
    std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(rng()),
                  static_cast<unsigned long long>(rng()));
    return buf;
}

}  // namespace

SessionManager::SessionManager(std::shared_ptr<const ModelRegistry> models, PatchLookup patches,
                               std::shared_ptr<SessionStore> store)
    : models_(std::move(models)), patches_(std::move(patches)), store_(std::move(store)) {}

SessionManager::~SessionManager() = default;

std::shared_ptr<SessionManager::Session> SessionManager::open(const std::string& id, const std::string& model_id,
                                                              const std::string& patch_id, Bytes upload,
                                                              const std::string& created) {
    auto model = models_->find(model_id);
    if (!model) throw ServiceError(404, "unknown model '" + model_id + "'");
    RgbImage image;
    auto s = std::make_shared<Session>();
    if (!patch_id.empty()) {
        std::optional<Patch> patch = patches_ ? patches_(patch_id) : std::nullopt;
        if (!patch) throw ServiceError(404, "unknown patch '" + patch_id + "'");
        image = std::move(patch->image);
        s->gt = std::move(patch->gt);
    } else {
        try {
            image = decode_png_rgb(upload);
        } catch (const ImageIoError& ex) {
            throw ServiceError(422, std::string("undecodable image: ") + ex.what());
        }
        if (image.height() != image.width())
            throw ServiceError(422, "uploaded image must be square, got " + std::to_string(image.height()) + "x" +
                                        std::to_string(image.width()));
    }
    s->id = id;
    s->model_id = model_id;
    s->patch_id = patch_id;
    s->upload = std::move(upload);
    s->model = std::move(model);
    s->height = image.height();
    s->width = image.width();
    s->created = created;
    s->updated = created;
    s->state.patch_id = patch_id.empty() ? "upload:" + id : patch_id;
    s->encoded = s->model->encode(image);
    return s;
}

void SessionManager::persist(const Session& s) const {
    if (!store_) return;
    store_->put({s.id, s.model_id, s.patch_id, s.upload, s.state.clicks, s.created, s.updated});
}

SessionInfo SessionManager::describe(const Session& s) {
    SessionInfo info;
    info.id = s.id;
    info.model_id = s.model_id;
    info.patch_id = s.patch_id;
    info.height = s.height;
    info.width = s.width;
    info.embedding_side = s.encoded->embedding_side();
    info.has_ground_truth = s.gt.has_value();
    info.clicks = s.state.clicks.size();
    info.created = s.created;
    info.updated = s.updated;
    return info;
}

SessionInfo SessionManager::create_from_patch(const std::string& model_id, const std::string& patch_id) {
    if (patch_id.empty()) throw ServiceError(422, "patch_id must not be empty");
    auto s = open(new_session_id(), model_id, patch_id, {}, now_iso());
    persist(*s);
    std::lock_guard lock(mutex_);
    sessions_[s->id] = s;
    return describe(*s);
}

SessionInfo SessionManager::create_from_upload(const std::string& model_id, std::span<const std::uint8_t> png) {
    auto s = open(new_session_id(), model_id, "", Bytes(png.begin(), png.end()), now_iso());
    persist(*s);
    std::lock_guard lock(mutex_);
    sessions_[s->id] = s;
    return describe(*s);
}

std::shared_ptr<SessionManager::Session> SessionManager::get(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
    return it->second;
}

ClickOutcome SessionManager::apply_click(Session& s, Index row, Index col, Polarity polarity) {
    try {
        require_in_bounds(row, col, s.height, s.width);
    } catch (const CoordinateError& ex) {
        throw ServiceError(422, ex.what());
    }
    std::vector<Click> clicks = s.state.clicks;
    Click click{row, col, polarity, static_cast<int>(clicks.size()) + 1};
    clicks.push_back(click);
    const Logits* feedback = s.state.prev_logits ? &*s.state.prev_logits : nullptr;
    const auto t0 = std::chrono::steady_clock::now();
    Decoded out = s.model->decode(*s.encoded, clicks, feedback);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out.logits.rows() != s.height || out.logits.cols() != s.width)
        throw std::runtime_error("model returned logits of the wrong size");

    s.history.push_back({s.state.prev_prediction, s.state.prev_logits});
    s.state.clicks = std::move(clicks);
    s.state.prev_prediction = binarize(out.logits);
    if (out.feedback.size() > 0)
        s.state.prev_logits = std::move(out.feedback);
    else
        s.state.prev_logits.reset();
    ClickOutcome result;
    result.click = click;
    result.mask = *s.state.prev_prediction;
    if (s.gt) result.iou = iou(result.mask, *s.gt);
    result.seconds = seconds;
    s.ious.push_back(result.iou);
    return result;
}

ClickOutcome SessionManager::add_click(const std::string& id, Index row, Index col, Polarity polarity) {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    ClickOutcome out = apply_click(*s, row, col, polarity);
    s->updated = now_iso();
    persist(*s);
    return out;
}

SessionInfo SessionManager::undo(const std::string& id) {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    if (s->state.clicks.empty()) throw ServiceError(409, "nothing to undo");
    s->state.clicks.pop_back();
    s->state.prev_prediction = std::move(s->history.back().prediction);
    s->state.prev_logits = std::move(s->history.back().logits);
    s->history.pop_back();
    s->ious.pop_back();
    s->updated = now_iso();
    persist(*s);
    return describe(*s);
}

std::vector<TrajectoryEntry> SessionManager::export_session(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    std::vector<TrajectoryEntry> out;
    for (std::size_t i = 0; i < s->state.clicks.size(); ++i) out.push_back({s->state.clicks[i], s->ious[i]});
    return out;
}

Mask SessionManager::current_mask(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    return s->state.prev_prediction ? *s->state.prev_prediction : Mask::Zero(s->height, s->width);
}

SessionInfo SessionManager::info(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    return describe(*s);
}

InteractionState SessionManager::state(const std::string& id) const {
    auto s = get(id);
    std::lock_guard lock(s->mutex);
    return s->state;
}

std::size_t SessionManager::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::size_t SessionManager::restore() {
    if (!store_) return 0;
    std::size_t restored = 0;
    for (auto& stored : store_->all()) {
        try {
            auto s = open(stored.id, stored.model_id, stored.patch_id, std::move(stored.upload_png), stored.created);
            for (const auto& c : stored.clicks) apply_click(*s, c.row, c.col, c.polarity);
            s->updated = stored.updated;
            std::lock_guard lock(mutex_);
            sessions_[s->id] = s;
            ++restored;
        } catch (const std::exception& ex) {
            std::cerr << "warning: could not restore session " << stored.id << ": " << ex.what() << '\n';
        }
    }
    return restored;
}

nlohmann::json to_json(const SessionInfo& s) {
    return {{"session_id", s.id},
            {"model_id", s.model_id},
            {"patch_id", s.patch_id.empty() ? nlohmann::json(nullptr) : nlohmann::json(s.patch_id)},
            {"height", s.height},
            {"width", s.width},
            {"embedding_side", s.embedding_side},
            {"ground_truth", s.has_ground_truth},
            {"clicks", s.clicks},
            {"created", s.created},
            {"updated", s.updated}};
}

nlohmann::json to_json(const ClickOutcome& c) {
    return {{"click", to_json(c.click)},
            {"mask", to_json(rle_encode(c.mask))},
            {"iou", c.iou ? nlohmann::json(*c.iou) : nlohmann::json(nullptr)},
            {"seconds", c.seconds}};
}

// ---------------------------------------------------------------- http

struct HttpServer::Impl {
    httplib::Server server;
    std::thread thread;
};

namespace {

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const ServiceError& ex) {
            send_json(res, {{"error", ex.what()}}, ex.status);
        } catch (const nlohmann::json::exception& ex) {
            send_json(res, {{"error", std::string("malformed request: ") + ex.what()}}, 400);
        } catch (const CoordinateError& ex) {
            send_json(res, {{"error", ex.what()}}, 422);
        } catch (const std::invalid_argument& ex) {
            send_json(res, {{"error", ex.what()}}, 422);
        } catch (const std::exception& ex) {
            send_json(res, {{"error", ex.what()}}, 500);
        }
    };
}

}  // namespace

HttpServer::HttpServer(SessionManager& sessions, const ModelRegistry& models, ServerOptions opts)
    : impl_(std::make_unique<Impl>()), port_(opts.port) {
    auto& srv = impl_->server;
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    srv.Get("/models", guarded([&models](const httplib::Request&, httplib::Response& res) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& e : models.entries())
            list.push_back({{"id", e.id}, {"name", e.model->name()}, {"description", e.description}});
        send_json(res, {{"models", list}});
    }));

    srv.Post("/sessions", guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
        const auto type = req.get_header_value("Content-Type");
        SessionInfo info;
        if (type.rfind("image/png", 0) == 0 || type.rfind("application/octet-stream", 0) == 0) {
            if (!req.has_param("model_id")) throw ServiceError(422, "upload requires ?model_id=");
            const auto* data = reinterpret_cast<const std::uint8_t*>(req.body.data());
            info = sessions.create_from_upload(req.get_param_value("model_id"), {data, req.body.size()});
        } else {
            const auto body = nlohmann::json::parse(req.body);
            info = sessions.create_from_patch(body.at("model_id").get<std::string>(),
                                              body.at("patch_id").get<std::string>());
        }
        send_json(res, to_json(info), 201);
    }));

    srv.Get(R"(/sessions/([0-9a-f]+))", guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
        const auto id = req.matches[1].str();
        auto j = to_json(sessions.info(id));
        nlohmann::json clicks = nlohmann::json::array();
        for (const auto& c : sessions.state(id).clicks) clicks.push_back(to_json(c));
        j["click_list"] = clicks;
        j["mask"] = to_json(rle_encode(sessions.current_mask(id)));
        send_json(res, j);
    }));

    srv.Post(R"(/sessions/([0-9a-f]+)/clicks)",
             guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
                 const auto body = nlohmann::json::parse(req.body);
                 const auto polarity = polarity_from_string(body.value("polarity", std::string("positive")));
                 const auto out = sessions.add_click(req.matches[1].str(), body.at("row").get<Index>(),
                                                     body.at("col").get<Index>(), polarity);
                 send_json(res, to_json(out));
             }));

    srv.Post(R"(/sessions/([0-9a-f]+)/undo)", guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
        const auto id = req.matches[1].str();
        auto j = to_json(sessions.undo(id));
        j["mask"] = to_json(rle_encode(sessions.current_mask(id)));
        send_json(res, j);
    }));

    srv.Get(R"(/sessions/([0-9a-f]+)/mask\.png)",
            guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
                const Bytes png = encode_png(mask_to_gray(sessions.current_mask(req.matches[1].str())));
                res.set_content(std::string(png.begin(), png.end()), "image/png");
            }));

    srv.Get(R"(/sessions/([0-9a-f]+)/export)", guarded([&sessions](const httplib::Request& req, httplib::Response& res) {
        std::ostringstream os;
        write_trajectory(os, sessions.export_session(req.matches[1].str()));
        res.set_content(os.str(), "application/x-ndjson");
    }));

    if (!opts.static_dir.empty() && !srv.set_mount_point("/", opts.static_dir.string()))
        throw ArgumentError("static directory " + opts.static_dir.string() + " does not exist");
    impl_->server.set_keep_alive_max_count(100);
    host_ = opts.host;
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
    auto& srv = impl_->server;
    port_ = port_ == 0 ? srv.bind_to_any_port(host_) : (srv.bind_to_port(host_, port_) ? port_ : -1);
    if (port_ < 0) throw std::runtime_error("cannot bind " + host_);
    impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    return port_;
}

void HttpServer::run() {
    auto& srv = impl_->server;
    port_ = port_ == 0 ? srv.bind_to_any_port(host_) : (srv.bind_to_port(host_, port_) ? port_ : -1);
    if (port_ < 0) throw std::runtime_error("cannot bind " + host_);
    srv.listen_after_bind();
}

void HttpServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace samseg
