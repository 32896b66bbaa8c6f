#include "derail/game.hpp"

#include <algorithm>
#include <chrono>
#include <set>

#include "derail/report.hpp"
#include "derail/util.hpp"

namespace derail::game {

using nlohmann::json;
using nlohmann::ordered_json;

const RoundSpec* ExperimentPlan::find_round(const std::string& round_id) const {
    for (const auto& r : rounds) {
        if (r.round_id == round_id) return &r;
    }
    return nullptr;
}

ordered_json ExperimentPlan::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    j["participants"] = participants;
    j["warmup"] = warmup;
    j["pool"] = pool;
    j["per_participant"] = per_participant;
    j["rounds"] = ordered_json::array();
    for (const auto& r : rounds) {
        ordered_json rj;
        rj["round_id"] = r.round_id;
        rj["warmup"] = r.warmup;
        rj["assignments"] = ordered_json::object();
        for (const auto& [p, ids] : r.assignments) rj["assignments"][p] = ids;
        j["rounds"].push_back(std::move(rj));
    }
    return j;
}

ExperimentPlan ExperimentPlan::from_json(const json& j) {
    try {
        ExperimentPlan p;
        p.seed = j.at("seed").get<std::uint64_t>();
        p.participants = j.at("participants").get<std::vector<std::string>>();
        p.warmup = j.at("warmup").get<std::vector<std::string>>();
        p.pool = j.at("pool").get<std::vector<std::string>>();
        p.per_participant = j.at("per_participant").get<int>();
        for (const auto& rj : j.at("rounds")) {
            RoundSpec r;
            r.round_id = rj.at("round_id").get<std::string>();
            r.warmup = rj.value("warmup", false);
            for (const auto& [pid, ids] : rj.at("assignments").items()) r.assignments[pid] = ids.get<std::vector<std::string>>();
            p.rounds.push_back(std::move(r));
        }
        return p;
    } catch (const json::exception& e) {
        fail(ErrorKind::schema, std::string("experiment plan: ") + e.what());
    }
}

ExperimentPlan build_plan(const Corpus& corpus, const std::vector<std::string>& roster, std::uint64_t seed,
                          const PlanOptions& options) {
    if (roster.empty()) fail(ErrorKind::precondition, "plan needs at least one participant");
    if (std::set<std::string>(roster.begin(), roster.end()).size() != roster.size())
        fail(ErrorKind::precondition, "participant ids must be unique");
    if (options.per_participant < 2 || options.per_participant % 2 != 0)
        fail(ErrorKind::config, "per-participant count must be even and >= 2");
    if (options.warmup_size % 2 != 0) fail(ErrorKind::config, "warmup size must be even");
    if (options.main_rounds < 1) fail(ErrorKind::config, "plan needs at least one main round");
    const std::size_t participants = roster.size();
    if (static_cast<std::size_t>(options.main_rounds) > participants)
        fail(ErrorKind::infeasible, "a shared pool cannot give " + std::to_string(participants) +
                                        " participant(s) disjoint sets across " +
                                        std::to_string(options.main_rounds) + " rounds");

    const std::string seed_text = std::to_string(seed);
    const std::size_t per = static_cast<std::size_t>(options.per_participant);
    const auto pool_ptrs = sample_balanced(corpus, participants * per, seed, options.split);

    ExperimentPlan plan;
    plan.seed = seed;
    plan.participants = roster;
    plan.per_participant = options.per_participant;

    std::vector<std::string> derailing, calm;
    std::set<std::string> in_pool;
    for (const auto* c : pool_ptrs) {
        plan.pool.push_back(c->id);
        in_pool.insert(c->id);
        (c->derails ? derailing : calm).push_back(c->id);
    }
    std::sort(derailing.begin(), derailing.end());
    std::sort(calm.begin(), calm.end());
    Rng rng(hash_parts({"plan", seed_text}));
    rng.shuffle(derailing);
    rng.shuffle(calm);

    // Warmup comes from outside the pool.
    std::vector<std::string> spare_d, spare_c;
    for (const auto& c : corpus.conversations()) {
        if (in_pool.count(c.id) || (options.split && c.split != *options.split)) continue;
        (c.derails ? spare_d : spare_c).push_back(c.id);
    }
    const std::size_t half_warmup = options.warmup_size / 2;
    if (spare_d.size() < half_warmup || spare_c.size() < half_warmup)
        fail(ErrorKind::infeasible, "not enough conversations outside the pool for the warmup round");
    std::sort(spare_d.begin(), spare_d.end());
    std::sort(spare_c.begin(), spare_c.end());
    rng.shuffle(spare_d);
    rng.shuffle(spare_c);
    for (std::size_t i = 0; i < half_warmup; ++i) {
        plan.warmup.push_back(spare_d[i]);
        plan.warmup.push_back(spare_c[i]);
    }
    rng.shuffle(plan.warmup);

    RoundSpec warm;
    warm.round_id = kWarmupRound;
    warm.warmup = true;
    for (const auto& p : roster) warm.assignments[p] = plan.warmup;
    plan.rounds.push_back(std::move(warm));

    std::vector<std::size_t> offsets{0};
    std::vector<std::size_t> others;
    for (std::size_t o = 1; o < participants; ++o) others.push_back(o);
    rng.shuffle(others);
    for (int r = 1; r < options.main_rounds; ++r) offsets.push_back(others[static_cast<std::size_t>(r - 1)]);

    const std::size_t half = per / 2;
    for (int r = 0; r < options.main_rounds; ++r) {
        RoundSpec round;
        round.round_id = "round-" + std::to_string(r + 1);
        for (std::size_t i = 0; i < participants; ++i) {
            const std::size_t block = (i + offsets[static_cast<std::size_t>(r)]) % participants;
            std::vector<std::string> mine(derailing.begin() + static_cast<std::ptrdiff_t>(block * half),
                                          derailing.begin() + static_cast<std::ptrdiff_t>((block + 1) * half));
            mine.insert(mine.end(), calm.begin() + static_cast<std::ptrdiff_t>(block * half),
                        calm.begin() + static_cast<std::ptrdiff_t>((block + 1) * half));
            Rng order(hash_parts({"order", seed_text, round.round_id, roster[i]}));
            order.shuffle(mine);
            round.assignments[roster[i]] = std::move(mine);
        }
        plan.rounds.push_back(std::move(round));
    }
    return plan;
}

Clock system_clock() {
    return [] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
            .count();
    };
}

namespace {

std::string session_id_for(const std::string& participant, const std::string& round) {
    return "s-" + hex64(hash_parts({"session", participant, round}));
}

} // namespace

GameService::GameService(const Corpus& corpus, ExperimentPlan plan, std::filesystem::path event_log, Clock clock,
                         std::string admin_token)
    : corpus_(corpus), plan_(std::move(plan)), log_path_(std::move(event_log)), clock_(std::move(clock)),
      admin_token_(std::move(admin_token)) {
    for (const auto& r : plan_.rounds) {
        for (const auto& [p, ids] : r.assignments) {
            for (const auto& id : ids) {
                if (!corpus_.find(id))
                    fail(ErrorKind::not_found, "plan references unknown conversation '" + id + "'");
            }
        }
    }
    if (log_path_.empty()) return;
    if (std::filesystem::exists(log_path_)) {
        for_each_line(log_path_, [&](std::size_t lineno, const std::string& line) {
            json event;
            try {
                event = json::parse(line);
            } catch (const json::exception& e) {
                fail(ErrorKind::schema, "event log line " + std::to_string(lineno) + ": " + e.what());
            }
            try {
                apply(event);
            } catch (const Error& e) {
                fail(e.kind(), "event log line " + std::to_string(lineno) + ": " + e.what());
            }
        });
    } else if (log_path_.has_parent_path()) {
        std::filesystem::create_directories(log_path_.parent_path());
    }
    log_.open(log_path_, std::ios::app | std::ios::binary);
    if (!log_) fail(ErrorKind::io, "cannot open event log " + log_path_.string());
}

void GameService::append(ordered_json event) {
    if (!log_path_.empty()) {
        log_ << event.dump() << '\n';
        log_.flush();
        if (!log_) fail(ErrorKind::io, "event log write failed");
    }
}

Session& GameService::mutable_session(const std::string& session_id) {
    const auto it = sessions_.find(session_id);
    if (it == sessions_.end()) fail(ErrorKind::not_found, "unknown session '" + session_id + "'");
    return it->second;
}

const Session& GameService::session(const std::string& session_id) const {
    const auto it = sessions_.find(session_id);
    if (it == sessions_.end()) fail(ErrorKind::not_found, "unknown session '" + session_id + "'");
    return it->second;
}

std::vector<std::string> GameService::session_ids() const {
    std::lock_guard lock(mutex_);
    return order_;
}

ordered_json GameService::view(const Session& s) const {
    const RoundSpec* round = plan_.find_round(s.round_id);
    ordered_json v;
    v["session_id"] = s.session_id;
    v["participant_id"] = s.participant_id;
    v["round_id"] = s.round_id;
    v["excluded_from_analysis"] = round && round->warmup;
    std::size_t resolved = 0;
    for (const auto& r : s.results) resolved += r.resolved ? 1 : 0;
    v["progress"] = {{"index", std::min(s.cursor + 1, s.assignment.size())},
                     {"total", s.assignment.size()},
                     {"resolved", resolved}};
    v["score"] = s.score;
    v["complete"] = s.complete();
    if (s.complete()) {
        v["conversation"] = nullptr;
    } else {
        const auto& r = s.results[s.cursor];
        const Conversation& c = corpus_.get(r.conversation_id);
        ordered_json cv;
        cv["conversation_id"] = c.id;
        cv["revealed"] = ordered_json::array();
        for (int pos = 1; pos <= r.revealed; ++pos) {
            const Utterance& u = c.at(pos);
            cv["revealed"].push_back({{"position", u.position}, {"speaker", u.speaker}, {"text", u.text}});
        }
        cv["can_reveal"] = true;
        cv["can_trigger"] = r.revealed >= 1;
        v["conversation"] = std::move(cv);
    }
    v["last_feedback"] = nullptr;
    for (auto it = s.results.rbegin(); it != s.results.rend(); ++it) {
        if (!it->resolved) continue;
        const Conversation& c = corpus_.get(it->conversation_id);
        ordered_json fb;
        fb["conversation_id"] = c.id;
        fb["correct"] = it->correct;
        fb["derails"] = c.derails;
        fb["decision"] = it->trigger_position ? "triggered" : "completed";
        fb["trigger_position"] = it->trigger_position ? ordered_json(*it->trigger_position) : ordered_json(nullptr);
        v["last_feedback"] = std::move(fb);
        break;
    }
    return v;
}

ordered_json GameService::apply(const json& event) {
    const std::string type = event.at("type").get<std::string>();
    const auto seq = event.at("seq").get<std::uint64_t>();
    if (seq != seq_ + 1) fail(ErrorKind::schema, "event sequence gap: expected " + std::to_string(seq_ + 1));

    if (type == "session_created") {
        const std::string participant = event.at("participant_id").get<std::string>();
        const std::string round_id = event.at("round_id").get<std::string>();
        const RoundSpec* round = plan_.find_round(round_id);
        if (!round) fail(ErrorKind::not_found, "unknown round '" + round_id + "'");
        const auto a = round->assignments.find(participant);
        if (a == round->assignments.end())
            fail(ErrorKind::not_found, "participant '" + participant + "' is not on the roster");
        Session s;
        s.session_id = event.at("session_id").get<std::string>();
        if (sessions_.count(s.session_id)) fail(ErrorKind::conflict, "session '" + s.session_id + "' already exists");
        s.participant_id = participant;
        s.round_id = round_id;
        s.assignment = a->second;
        for (const auto& id : s.assignment) s.results.push_back({id, 0, false, false, std::nullopt});
        order_.push_back(s.session_id);
        const auto id = s.session_id;
        sessions_.emplace(id, std::move(s));
        seq_ = seq;
        return view(sessions_.at(id));
    }
    if (type != "reveal" && type != "trigger") fail(ErrorKind::schema, "unknown event type '" + type + "'");

    // Work on a copy so a rejected action leaves state untouched.
    Session s = mutable_session(event.at("session_id").get<std::string>());
    if (s.complete()) fail(ErrorKind::conflict, "session is complete");
    ConversationResult& r = s.results[s.cursor];
    const std::string conv_id = event.at("conversation_id").get<std::string>();
    if (conv_id != r.conversation_id) {
        const bool done = std::any_of(s.results.begin(), s.results.end(),
                                      [&](const ConversationResult& x) { return x.conversation_id == conv_id && x.resolved; });
        fail(ErrorKind::conflict, done ? "conversation '" + conv_id + "' is already resolved"
                                       : "conversation '" + conv_id + "' is not the current conversation");
    }
    const Conversation& c = corpus_.get(r.conversation_id);
    const int displayable = c.last_decision_point();

    ordered_json response;
    response["action"] = type;
    response["conversation_id"] = c.id;
    response["utterance"] = nullptr;
    if (type == "reveal") {
        if (r.revealed >= displayable) fail(ErrorKind::conflict, "nothing left to reveal");
        ++r.revealed;
        const Utterance& u = c.at(r.revealed);
        response["utterance"] = {{"position", u.position}, {"speaker", u.speaker}, {"text", u.text}};
        if (r.revealed == displayable) {
            r.resolved = true;
            r.correct = !c.derails;
        }
    } else {
        if (r.revealed < 1) fail(ErrorKind::precondition, "trigger requires at least one revealed utterance");
        r.resolved = true;
        r.trigger_position = r.revealed;
        r.correct = c.derails;
    }
    if (event.contains("position") && event["position"].get<int>() != r.revealed)
        fail(ErrorKind::schema, "event position does not match replayed state");

    response["resolution"] = nullptr;
    if (r.resolved) {
        ordered_json res;
        res["correct"] = r.correct;
        res["derails"] = c.derails;
        res["decision"] = r.trigger_position ? "triggered" : "completed";
        res["trigger_position"] = r.trigger_position ? ordered_json(*r.trigger_position) : ordered_json(nullptr);
        res["horizon"] = (c.derails && r.trigger_position) ? ordered_json(c.n() - *r.trigger_position)
                                                           : ordered_json(nullptr);
        response["resolution"] = std::move(res);
        s.score += r.correct ? 1 : 0;
        ++s.cursor;
    }
    response["state"] = view(s);
    if (event.contains("idempotency_key") && !event["idempotency_key"].is_null()) {
        const auto key = event["idempotency_key"].get<std::string>();
        s.idempotent[key] = response;
        s.idempotent_action[key] = type;
    }
    sessions_[s.session_id] = std::move(s);
    seq_ = seq;
    return response;
}

std::pair<bool, ordered_json> GameService::create_session(const std::string& participant_id,
                                                          const std::string& round_id) {
    std::lock_guard lock(mutex_);
    const std::string id = session_id_for(participant_id, round_id);
    if (const auto it = sessions_.find(id); it != sessions_.end()) return {false, view(it->second)};
    ordered_json event;
    event["seq"] = seq_ + 1;
    event["ts"] = clock_();
    event["type"] = "session_created";
    event["session_id"] = id;
    event["participant_id"] = participant_id;
    event["round_id"] = round_id;
    const RoundSpec* round = plan_.find_round(round_id);
    if (!round) fail(ErrorKind::not_found, "unknown round '" + round_id + "'");
    if (!round->assignments.count(participant_id))
        fail(ErrorKind::not_found, "participant '" + participant_id + "' is not on the roster");
    append(event);
    return {true, apply(event)};
}

ordered_json GameService::act(const std::string& session_id, const std::string& action, const ActionRequest& request) {
    std::lock_guard lock(mutex_);
    const Session& s = session(session_id);
    if (request.idempotency_key) {
        const auto it = s.idempotent.find(*request.idempotency_key);
        if (it != s.idempotent.end()) {
            if (s.idempotent_action.at(*request.idempotency_key) != action)
                fail(ErrorKind::conflict, "idempotency key reused for a different action");
            return it->second;
        }
    }
    if (s.complete()) fail(ErrorKind::conflict, "session is complete");
    ordered_json event;
    event["seq"] = seq_ + 1;
    event["ts"] = clock_();
    event["type"] = action;
    event["session_id"] = session_id;
    event["conversation_id"] = request.conversation_id.value_or(s.results[s.cursor].conversation_id);
    const int revealed = s.results[s.cursor].revealed;
    event["position"] = action == "reveal" ? revealed + 1 : revealed;
    event["idempotency_key"] = request.idempotency_key ? ordered_json(*request.idempotency_key) : ordered_json(nullptr);

    // Dry run on a copy of the whole state so invalid actions are never logged.
    {
        const auto saved = sessions_.at(session_id);
        const auto saved_seq = seq_;
        apply(event);
        sessions_[session_id] = saved;
        seq_ = saved_seq;
    }
    append(event);
    return apply(event);
}

ordered_json GameService::state(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    return view(session(session_id));
}

ordered_json GameService::reveal(const std::string& session_id, const ActionRequest& request) {
    return act(session_id, "reveal", request);
}

ordered_json GameService::trigger(const std::string& session_id, const ActionRequest& request) {
    return act(session_id, "trigger", request);
}

ordered_json GameService::leaderboard(const std::string& round_id) const {
    std::lock_guard lock(mutex_);
    if (!plan_.find_round(round_id)) fail(ErrorKind::not_found, "unknown round '" + round_id + "'");
    struct Entry {
        std::string participant;
        int score;
        std::size_t resolved;
    };
    std::vector<Entry> entries;
    for (const auto& id : order_) {
        const Session& s = sessions_.at(id);
        if (s.round_id != round_id) continue;
        std::size_t resolved = 0;
        for (const auto& r : s.results) resolved += r.resolved ? 1 : 0;
        entries.push_back({s.participant_id, s.score, resolved});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.participant < b.participant;
    });
    ordered_json out;
    out["round_id"] = round_id;
    out["entries"] = ordered_json::array();
    int rank = 0;
    for (const auto& e : entries) {
        out["entries"].push_back(
            {{"rank", ++rank}, {"participant_id", e.participant}, {"score", e.score}, {"resolved", e.resolved}});
    }
    return out;
}

bool GameService::check_admin(const std::string& token) const {
    if (admin_token_.empty() || token.size() != admin_token_.size()) return false;
    unsigned char diff = 0;
    for (std::size_t i = 0; i < token.size(); ++i)
        diff |= static_cast<unsigned char>(token[i] ^ admin_token_[i]);
    return diff == 0;
}

std::vector<Outcome> GameService::outcomes() const {
    std::vector<Outcome> out;
    for (const auto& id : order_) {
        const Session& s = sessions_.at(id);
        const RoundSpec* round = plan_.find_round(s.round_id);
        if (!round || round->warmup) continue;
        for (const auto& r : s.results) {
            if (r.resolved) out.push_back(classify_trigger(corpus_.get(r.conversation_id), r.trigger_position));
        }
    }
    return out;
}

ordered_json GameService::export_outcomes() const {
    std::lock_guard lock(mutex_);
    ordered_json out;
    out["outcomes"] = ordered_json::array();
    std::vector<Outcome> all;
    for (const auto& id : order_) {
        const Session& s = sessions_.at(id);
        const RoundSpec* round = plan_.find_round(s.round_id);
        if (!round || round->warmup) continue;
        for (const auto& r : s.results) {
            if (!r.resolved) continue;
            const Conversation& c = corpus_.get(r.conversation_id);
            const Outcome o = classify_trigger(c, r.trigger_position);
            ordered_json j;
            j["participant_id"] = s.participant_id;
            j["round_id"] = s.round_id;
            j["session_id"] = s.session_id;
            j["conversation_id"] = c.id;
            j["derails"] = c.derails;
            j["n"] = c.n();
            j["decision"] = r.trigger_position ? "triggered" : "completed";
            j["trigger_position"] = r.trigger_position ? ordered_json(*r.trigger_position) : ordered_json(nullptr);
            j["correct"] = r.correct;
            j["outcome"] = std::string(to_string(o.cls));
            j["horizon"] = o.horizon ? ordered_json(*o.horizon) : ordered_json(nullptr);
            out["outcomes"].push_back(std::move(j));
            all.push_back(o);
        }
    }
    out["metrics"] = all.empty() ? ordered_json(nullptr) : metrics_json(compute_metrics(all));
    return out;
}

} // namespace derail::game
