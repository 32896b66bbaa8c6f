#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "derail/corpus.hpp"
#include "derail/eval.hpp"

namespace derail::game {

inline constexpr const char* kWarmupRound = "warmup";

struct RoundSpec {
    std::string round_id;
    bool warmup = false;
    // participant id -> ordered conversation ids
    std::map<std::string, std::vector<std::string>> assignments;
};

struct ExperimentPlan {
    std::uint64_t seed = 0;
    std::vector<std::string> participants;
    std::vector<std::string> warmup; // 4 ids, shared by everyone
    std::vector<std::string> pool;   // shared by every main round
    int per_participant = 10;
    std::vector<RoundSpec> rounds;   // warmup first

    const RoundSpec* find_round(const std::string& round_id) const;

    nlohmann::ordered_json to_json() const;
    static ExperimentPlan from_json(const nlohmann::json& j);
};

struct PlanOptions {
    int per_participant = 10;   // even
    int main_rounds = 2;
    std::size_t warmup_size = 4; // even
    std::optional<Split> split;
};

// Pool of |roster| * per_participant balanced conversations. Each main round
// hands every participant one derailing block and one calm block; rounds use
// distinct cyclic block offsets, so a participant never sees a conversation
// twice and each pool conversation is assigned once per round.
ExperimentPlan build_plan(const Corpus& corpus, const std::vector<std::string>& roster, std::uint64_t seed,
                          const PlanOptions& options = {});

// Milliseconds; injectable so tests and replays are deterministic.
using Clock = std::function<std::int64_t()>;
Clock system_clock();

struct ConversationResult {
    std::string conversation_id;
    int revealed = 0;
    bool resolved = false;
    bool correct = false;
    std::optional<int> trigger_position;
};

struct Session {
    std::string session_id;
    std::string participant_id;
    std::string round_id;
    std::vector<std::string> assignment;
    std::size_t cursor = 0; // index of the current conversation; == size when complete
    std::vector<ConversationResult> results;
    int score = 0;
    std::map<std::string, nlohmann::ordered_json> idempotent; // key -> stored response
    std::map<std::string, std::string> idempotent_action;

    bool complete() const { return cursor >= assignment.size(); }
};

struct ActionRequest {
    std::optional<std::string> conversation_id; // stale ids are rejected
    std::optional<std::string> idempotency_key;
};

// Event-sourced game state. Every mutation is appended to the log before it
// is acknowledged; replaying the log rebuilds the same state.
class GameService {
public:
    GameService(const Corpus& corpus, ExperimentPlan plan, std::filesystem::path event_log = {},
                Clock clock = system_clock(), std::string admin_token = {});

    // Returns {created, state view}. Existing (participant, round) sessions are resumed.
    std::pair<bool, nlohmann::ordered_json> create_session(const std::string& participant_id,
                                                           const std::string& round_id);
    nlohmann::ordered_json state(const std::string& session_id) const;
    nlohmann::ordered_json reveal(const std::string& session_id, const ActionRequest& request = {});
    nlohmann::ordered_json trigger(const std::string& session_id, const ActionRequest& request = {});
    nlohmann::ordered_json leaderboard(const std::string& round_id) const;

    bool admin_enabled() const { return !admin_token_.empty(); }
    bool check_admin(const std::string& token) const;
    nlohmann::ordered_json export_outcomes() const;

    // Main-round outcomes in session-creation order, warmup excluded.
    std::vector<Outcome> outcomes() const;

    const ExperimentPlan& plan() const { return plan_; }
    const Session& session(const std::string& session_id) const;
    std::vector<std::string> session_ids() const;

private:
    nlohmann::ordered_json apply(const nlohmann::json& event);
    nlohmann::ordered_json act(const std::string& session_id, const std::string& action, const ActionRequest& request);
    void append(nlohmann::ordered_json event);
    nlohmann::ordered_json view(const Session& s) const;
    Session& mutable_session(const std::string& session_id);

    const Corpus& corpus_;
    ExperimentPlan plan_;
    std::filesystem::path log_path_;
    std::ofstream log_;
    Clock clock_;
    std::string admin_token_;
    std::uint64_t seq_ = 0;
    std::map<std::string, Session> sessions_;
    std::vector<std::string> order_;
    mutable std::mutex mutex_;
};

} // namespace derail::game
