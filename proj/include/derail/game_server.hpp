#pragma once

#include <memory>
#include <string>
#include <thread>

#include "derail/error.hpp"
#include "derail/game.hpp"

namespace httplib {
class Server;
}

namespace derail::game {

int http_status(ErrorKind kind);

// REST front end for a GameService. Routes:
//   POST /v1/sessions                  {participant_id, round_id}
//   GET  /v1/sessions/{id}/state
//   POST /v1/sessions/{id}/reveal      {conversation_id?, idempotency_key?}
//   POST /v1/sessions/{id}/trigger     {conversation_id?, idempotency_key?}
//   GET  /v1/rounds/{id}/leaderboard
//   GET  /v1/export                    Authorization: Bearer <admin token>
// The Idempotency-Key header is accepted in place of the body field.
class GameServer {
public:
    explicit GameServer(GameService& service);
    ~GameServer();

    GameServer(const GameServer&) = delete;
    GameServer& operator=(const GameServer&) = delete;

    // Binds to host:port (0 picks a free port) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    // Serves on the calling thread until stop().
    void run(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

private:
    GameService& service_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int port_ = 0;
};

} // namespace derail::game
