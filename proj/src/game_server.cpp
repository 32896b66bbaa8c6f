#include "derail/game_server.hpp"

#include <httplib.h>

namespace derail::game {

using nlohmann::json;
using nlohmann::ordered_json;

int http_status(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::schema:
    case ErrorKind::config: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::precondition:
    case ErrorKind::conflict: return 409;
    case ErrorKind::infeasible: return 422;
    case ErrorKind::backend: return 502;
    case ErrorKind::io: return 500;
    }
    return 500;
}

namespace {

void send(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
    ordered_json body;
    body["error"] = {{"kind", kind}, {"message", message}};
    send(res, status, body);
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        json j = json::parse(req.body);
        if (!j.is_object()) fail(ErrorKind::schema, "request body must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        fail(ErrorKind::schema, std::string("malformed JSON body: ") + e.what());
    }
}

std::optional<std::string> optional_string(const json& body, const char* key) {
    if (!body.contains(key) || body[key].is_null()) return std::nullopt;
    if (!body[key].is_string()) fail(ErrorKind::schema, std::string("'") + key + "' must be a string");
    return body[key].get<std::string>();
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const Error& e) {
            send_error(res, http_status(e.kind()), std::string(to_string(e.kind())), e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "internal", e.what());
        }
    };
}

ActionRequest action_request(const httplib::Request& req) {
    const json body = parse_body(req);
    ActionRequest a;
    a.conversation_id = optional_string(body, "conversation_id");
    a.idempotency_key = optional_string(body, "idempotency_key");
    if (!a.idempotency_key && req.has_header("Idempotency-Key")) a.idempotency_key = req.get_header_value("Idempotency-Key");
    return a;
}

} // namespace

GameServer::GameServer(GameService& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
    auto& s = *server_;
    s.Post("/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        const auto participant = optional_string(body, "participant_id");
        const auto round = optional_string(body, "round_id");
        if (!participant || !round) fail(ErrorKind::schema, "participant_id and round_id are required");
        const auto [created, view] = service_.create_session(*participant, *round);
        send(res, created ? 201 : 200, view);
    }));
    s.Get(R"(/v1/sessions/([^/]+)/state)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send(res, 200, service_.state(req.matches[1]));
    }));
    s.Post(R"(/v1/sessions/([^/]+)/reveal)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send(res, 200, service_.reveal(req.matches[1], action_request(req)));
    }));
    s.Post(R"(/v1/sessions/([^/]+)/trigger)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send(res, 200, service_.trigger(req.matches[1], action_request(req)));
    }));
    s.Get(R"(/v1/rounds/([^/]+)/leaderboard)", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send(res, 200, service_.leaderboard(req.matches[1]));
    }));
    s.Get("/v1/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
        if (!service_.admin_enabled()) {
            send_error(res, 403, "forbidden", "export is disabled: no admin token configured");
            return;
        }
        const std::string auth = req.get_header_value("Authorization");
        const std::string prefix = "Bearer ";
        const std::string token = auth.rfind(prefix, 0) == 0 ? auth.substr(prefix.size()) : "";
        if (!service_.check_admin(token)) {
            send_error(res, 401, "unauthorized", "admin token required");
            return;
        }
        send(res, 200, service_.export_outcomes());
    }));
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send_error(res, res.status, "http", "no such route");
    });
}

GameServer::~GameServer() { stop(); }

int GameServer::start(const std::string& host, int port) {
    if (port == 0) {
        port_ = server_->bind_to_any_port(host);
    } else {
        port_ = server_->bind_to_port(host, port) ? port : -1;
    }
    if (port_ <= 0) fail(ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void GameServer::run(const std::string& host, int port) {
    port_ = port;
    if (!server_->listen(host, port)) fail(ErrorKind::io, "cannot listen on " + host + ":" + std::to_string(port));
}

void GameServer::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

} // namespace derail::game
