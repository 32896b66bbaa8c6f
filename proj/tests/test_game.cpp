#include <doctest.h>

#include <set>

#include <httplib.h>

#include "derail/game.hpp"
#include "derail/game_server.hpp"
#include "derail/synthetic.hpp"
#include "helpers.hpp"

using namespace derail;
using namespace derail::game;
using nlohmann::json;

namespace {

Conversation with_attack(const std::string& id, bool derails, int n) {
    std::vector<std::pair<std::string, std::string>> turns;
    for (int pos = 1; pos <= n; ++pos) {
        const bool attack = derails && pos == n;
        turns.emplace_back(pos % 2 ? "alice" : "bob", attack ? "ATTACK-TEXT-" + id : id + " says " + std::to_string(pos));
    }
    return make_conversation(id, derails, Split::test, std::move(turns));
}

Corpus game_corpus() {
    std::vector<Conversation> convs{with_attack("d5", true, 5), with_attack("d6", true, 6), with_attack("c4", false, 4),
                                    with_attack("c3", false, 3), with_attack("w1", false, 2), with_attack("w2", true, 3)};
    for (int i = 0; i < 20; ++i) convs.push_back(with_attack("k" + std::to_string(i), false, 2));
    return Corpus("game", std::move(convs));
}

ExperimentPlan manual_plan() {
    ExperimentPlan p;
    p.participants = {"p1", "p2"};
    p.warmup = {"w1", "w2"};
    p.pool = {"d5", "d6", "c4", "c3"};
    p.per_participant = 2;
    RoundSpec warm{kWarmupRound, true, {{"p1", p.warmup}, {"p2", p.warmup}}};
    RoundSpec r1{"round-1", false, {{"p1", {"d5", "c4"}}, {"p2", {"d6", "c3"}}}};
    RoundSpec r2{"round-2", false, {{"p1", {"d6", "c3"}}, {"p2", {"d5", "c4"}}}};
    p.rounds = {warm, r1, r2};
    return p;
}

Clock fixed_clock() {
    auto t = std::make_shared<std::int64_t>(1000);
    return [t] { return (*t)++; };
}

std::string sid(const json& view) { return view.at("session_id").get<std::string>(); }

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::io;
}

} // namespace

TEST_SUITE("game") {

TEST_CASE("plan: nine participants get disjoint balanced sets") {
    synthetic::CorpusOptions opts;
    opts.conversations = 300;
    opts.seed = 4;
    const auto corpus = synthetic::make_corpus(opts);
    std::vector<std::string> roster;
    for (int i = 1; i <= 9; ++i) roster.push_back("v" + std::to_string(i));
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL, 17ULL}) {
        const auto plan = build_plan(corpus, roster, seed);
        REQUIRE(plan.rounds.size() == 3);
        CHECK(plan.rounds[0].warmup);
        CHECK(plan.warmup.size() == 4);
        CHECK(plan.pool.size() == 90);
        const std::set<std::string> pool(plan.pool.begin(), plan.pool.end());
        for (const auto& w : plan.warmup) CHECK_FALSE(pool.count(w));
        for (std::size_t r = 1; r < plan.rounds.size(); ++r) {
            std::map<std::string, int> seen;
            for (const auto& [p, ids] : plan.rounds[r].assignments) {
                CHECK(ids.size() == 10);
                int derailing = 0;
                for (const auto& id : ids) {
                    ++seen[id];
                    derailing += corpus.get(id).derails ? 1 : 0;
                }
                CHECK(derailing == 5);
            }
            CHECK(seen.size() == pool.size());
            for (const auto& [id, count] : seen) {
                CHECK(count == 1);
                CHECK(pool.count(id));
            }
        }
        for (const auto& p : roster) {
            const auto& a = plan.rounds[1].assignments.at(p);
            const auto& b = plan.rounds[2].assignments.at(p);
            for (const auto& id : a) CHECK(std::find(b.begin(), b.end(), id) == b.end());
        }
    }
    CHECK(build_plan(corpus, roster, 3).to_json() == build_plan(corpus, roster, 3).to_json());
    CHECK(build_plan(corpus, roster, 3).to_json() != build_plan(corpus, roster, 4).to_json());
    const auto plan = build_plan(corpus, roster, 3);
    CHECK(ExperimentPlan::from_json(json::parse(plan.to_json().dump())).to_json() == plan.to_json());
}

TEST_CASE("plan: infeasible rosters") {
    synthetic::CorpusOptions opts;
    opts.conversations = 100;
    const auto corpus = synthetic::make_corpus(opts);
    CHECK(kind_of([&] { build_plan(corpus, {"solo"}, 0); }) == ErrorKind::infeasible);
    std::vector<std::string> many;
    for (int i = 0; i < 12; ++i) many.push_back("p" + std::to_string(i));
    CHECK(kind_of([&] { build_plan(corpus, many, 0); }) == ErrorKind::infeasible); // needs 120 conversations
    CHECK_THROWS_AS(build_plan(corpus, {"a", "a"}, 0), Error);
}

TEST_CASE("reveal and trigger semantics") {
    const auto corpus = game_corpus();
    GameService svc(corpus, manual_plan(), {}, fixed_clock());
    const auto [created, view] = svc.create_session("p1", "round-1");
    CHECK(created);
    const auto id = sid(view);
    CHECK(view.at("conversation").at("conversation_id") == "d5");
    CHECK(view.at("conversation").at("can_trigger") == false);
    CHECK(kind_of([&] { svc.trigger(id); }) == ErrorKind::precondition); // nothing revealed yet

    // Derailing n=5: four reveals reach the displayable end and resolve as a miss.
    for (int i = 1; i <= 3; ++i) {
        const auto r = svc.reveal(id);
        CHECK(r.at("utterance").at("position") == i);
        CHECK(r.at("resolution").is_null());
    }
    const auto last = svc.reveal(id);
    CHECK(last.at("utterance").at("position") == 4);
    CHECK(last.at("resolution").at("correct") == false);
    CHECK(last.at("resolution").at("decision") == "completed");
    CHECK(last.at("state").at("conversation").at("conversation_id") == "c4");
    CHECK(kind_of([&] { svc.reveal(id, {std::string("d5"), std::nullopt}); }) == ErrorKind::conflict);

    // Calm: trigger is a false alarm.
    svc.reveal(id);
    const auto fa = svc.trigger(id);
    CHECK(fa.at("resolution").at("correct") == false);
    CHECK(fa.at("resolution").at("trigger_position") == 1);
    CHECK(fa.at("state").at("complete") == true);
    CHECK(kind_of([&] { svc.reveal(id); }) == ErrorKind::conflict);
    CHECK(svc.session(id).score == 0);

    const auto [c2, v2] = svc.create_session("p2", "round-1");
    const auto id2 = sid(v2);
    for (int i = 0; i < 3; ++i) svc.reveal(id2);
    const auto hit = svc.trigger(id2); // d6 after 3 reveals
    CHECK(hit.at("resolution").at("correct") == true);
    CHECK(hit.at("resolution").at("horizon") == 3);
    for (int i = 0; i < 3; ++i) svc.reveal(id2); // calm n=3, all revealed
    CHECK(svc.session(id2).score == 2);
    CHECK(svc.session(id2).results[1].correct);

    const auto [again, resumed] = svc.create_session("p2", "round-1");
    CHECK_FALSE(again);
    CHECK(sid(resumed) == id2);
    CHECK(kind_of([&] { svc.create_session("nobody", "round-1"); }) == ErrorKind::not_found);
    CHECK(kind_of([&] { svc.state("s-missing"); }) == ErrorKind::not_found);
}

TEST_CASE("calm n=4: four reveals resolve correct") {
    const auto corpus = game_corpus();
    auto plan = manual_plan();
    plan.rounds[1].assignments["p1"] = {"c4"};
    GameService svc(corpus, plan, {}, fixed_clock());
    const auto id = sid(svc.create_session("p1", "round-1").second);
    json r;
    for (int i = 0; i < 4; ++i) r = svc.reveal(id);
    CHECK(r.at("resolution").at("correct") == true);
    CHECK(svc.session(id).score == 1);
}

TEST_CASE("idempotency keys") {
    const auto corpus = game_corpus();
    GameService svc(corpus, manual_plan(), {}, fixed_clock());
    const auto id = sid(svc.create_session("p1", "round-1").second);
    const auto first = svc.reveal(id, {std::nullopt, std::string("k1")});
    const auto again = svc.reveal(id, {std::nullopt, std::string("k1")});
    CHECK(first == again);
    CHECK(svc.session(id).results[0].revealed == 1);
    CHECK(kind_of([&] { svc.trigger(id, {std::nullopt, std::string("k1")}); }) == ErrorKind::conflict);
}

TEST_CASE("event log replay rebuilds state") {
    const auto corpus = game_corpus();
    testing::TempDir dir;
    const auto log = dir / "events.jsonl";
    nlohmann::ordered_json before_state, before_board;
    std::string id;
    {
        GameService svc(corpus, manual_plan(), log, fixed_clock());
        id = sid(svc.create_session("p1", "round-1").second);
        svc.reveal(id, {std::nullopt, std::string("a")});
        svc.reveal(id);
        svc.trigger(id, {std::string("d5"), std::string("b")});
        svc.reveal(id);
        CHECK_THROWS_AS(svc.trigger(id, {std::string("d5"), std::nullopt}), Error); // not logged
        before_state = svc.state(id);
        before_board = svc.leaderboard("round-1");
    }
    const auto lines = read_file(log);
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 5);
    const auto first = json::parse(lines.substr(0, lines.find('\n')));
    CHECK(first.at("seq") == 1);
    CHECK(first.at("type") == "session_created");
    CHECK(first.at("ts") == 1000);

    GameService replayed(corpus, manual_plan(), log, fixed_clock());
    CHECK(replayed.state(id) == before_state);
    CHECK(replayed.leaderboard("round-1") == before_board);
    // Idempotent responses survive the restart.
    CHECK(replayed.session(id).results[0].trigger_position == 2);
    CHECK(replayed.trigger(id, {std::nullopt, std::string("b")}).at("resolution").at("horizon") == 3);

    write_file(dir / "gap.jsonl", lines.substr(lines.find('\n') + 1));
    CHECK_THROWS_AS(GameService(corpus, manual_plan(), dir / "gap.jsonl", fixed_clock()), Error);
}

TEST_CASE("leaderboard orders by score then participant") {
    std::vector<Conversation> convs;
    for (int i = 0; i < 20; ++i) convs.push_back(with_attack("c" + std::to_string(i), false, 2));
    const Corpus corpus("lb", convs);
    ExperimentPlan plan;
    plan.participants = {"alpha", "beta", "gamma"};
    RoundSpec round{"round-1", false, {}};
    for (int p = 0; p < 2; ++p) {
        for (int i = 0; i < 10; ++i) round.assignments[plan.participants[static_cast<std::size_t>(p)]].push_back("c" + std::to_string(p * 10 + i));
    }
    round.assignments["gamma"] = {"c0"};
    plan.rounds = {round};
    GameService svc(corpus, plan, {}, fixed_clock());
    auto play = [&](const std::string& who, int correct) {
        const auto id = sid(svc.create_session(who, "round-1").second);
        for (int i = 0; i < 10; ++i) {
            svc.reveal(id);
            if (i < correct) svc.reveal(id);
            else svc.trigger(id);
        }
    };
    play("alpha", 7);
    play("beta", 9);
    const auto board = svc.leaderboard("round-1").at("entries");
    REQUIRE(board.size() == 2);
    CHECK(board[0].at("score") == 9);
    CHECK(board[0].at("participant_id") == "beta");
    CHECK(board[1].at("score") == 7);
    CHECK(board[1].at("rank") == 2);
    CHECK(kind_of([&] { svc.leaderboard("nope"); }) == ErrorKind::not_found);
}

TEST_CASE("export feeds eval and excludes warmup") {
    const auto corpus = game_corpus();
    GameService svc(corpus, manual_plan(), {}, fixed_clock(), "secret");
    CHECK_FALSE(svc.check_admin("wrong"));
    CHECK(svc.check_admin("secret"));
    // Perfect play: trigger derailing after one reveal, reveal calm to the end.
    for (const std::string p : {"p1", "p2"}) {
        for (const std::string round : {kWarmupRound, "round-1", "round-2"}) {
            const auto id = sid(svc.create_session(p, round).second);
            while (!svc.session(id).complete()) {
                const auto& s = svc.session(id);
                const auto& c = corpus.get(s.assignment[s.cursor]);
                svc.reveal(id);
                if (c.derails) svc.trigger(id);
                else
                    while (!svc.session(id).complete() && svc.session(id).assignment[svc.session(id).cursor] == c.id)
                        svc.reveal(id);
            }
        }
    }
    const auto exported = svc.export_outcomes();
    const auto& rows = exported.at("outcomes");
    CHECK(rows.size() == 8);
    for (const auto& row : rows) {
        CHECK(row.at("round_id") != kWarmupRound);
        const auto& c = corpus.get(row.at("conversation_id").get<std::string>());
        RunResult run;
        run.conversation_id = c.id;
        if (!row.at("trigger_position").is_null()) {
            run.triggered = true;
            run.trigger_index = row.at("trigger_position").get<int>();
        }
        const auto o = classify_outcome(c, run);
        CHECK(row.at("outcome") == std::string(to_string(o.cls)));
        if (o.horizon) CHECK(row.at("horizon") == *o.horizon);
        CHECK(row.at("correct") == (o.cls == OutcomeClass::tp || o.cls == OutcomeClass::tn));
    }
    CHECK(exported.at("metrics").at("accuracy") == 1.0);
    CHECK(compute_metrics(svc.outcomes()).accuracy == 1.0);
    CHECK(svc.outcomes().size() == 8);
}

TEST_CASE("http status mapping") {
    CHECK(http_status(ErrorKind::schema) == 400);
    CHECK(http_status(ErrorKind::config) == 400);
    CHECK(http_status(ErrorKind::not_found) == 404);
    CHECK(http_status(ErrorKind::conflict) == 409);
    CHECK(http_status(ErrorKind::precondition) == 409);
    CHECK(http_status(ErrorKind::infeasible) == 422);
    CHECK(http_status(ErrorKind::backend) == 502);
    CHECK(http_status(ErrorKind::io) == 500);
}

TEST_CASE("REST API") {
    const auto corpus = game_corpus();
    GameService svc(corpus, manual_plan(), {}, fixed_clock(), "tok");
    GameServer server(svc);
    const int port = server.start();
    httplib::Client cli("127.0.0.1", port);
    std::vector<std::string> bodies;
    auto post = [&](const std::string& path, const json& body, const httplib::Headers& h = {}) {
        auto res = cli.Post(path, h, body.dump(), "application/json");
        REQUIRE(res);
        bodies.push_back(res->body);
        return res;
    };

    auto created = post("/v1/sessions", {{"participant_id", "p1"}, {"round_id", "round-1"}});
    CHECK(created->status == 201);
    const auto id = json::parse(created->body).at("session_id").get<std::string>();
    CHECK(post("/v1/sessions", {{"participant_id", "p1"}, {"round_id", "round-1"}})->status == 200);
    CHECK(post("/v1/sessions", {{"participant_id", "p1"}})->status == 400);
    CHECK(post("/v1/sessions", {{"participant_id", "zz"}, {"round_id", "round-1"}})->status == 404);
    CHECK(cli.Post("/v1/sessions", "{not json", "application/json")->status == 400);

    CHECK(post("/v1/sessions/" + id + "/trigger", json::object())->status == 409);
    auto r1 = post("/v1/sessions/" + id + "/reveal", json::object(), {{"Idempotency-Key", "x"}});
    CHECK(r1->status == 200);
    auto r1b = post("/v1/sessions/" + id + "/reveal", json::object(), {{"Idempotency-Key", "x"}});
    CHECK(r1b->body == r1->body);
    CHECK(post("/v1/sessions/" + id + "/reveal", {{"conversation_id", "c4"}})->status == 409);
    for (int i = 0; i < 3; ++i) post("/v1/sessions/" + id + "/reveal", json::object());
    auto state = cli.Get("/v1/sessions/" + id + "/state");
    REQUIRE(state);
    bodies.push_back(state->body);
    CHECK(json::parse(state->body).at("conversation").at("conversation_id") == "c4");
    CHECK(cli.Get("/v1/sessions/nope/state")->status == 404);
    auto board = cli.Get("/v1/rounds/round-1/leaderboard");
    CHECK(board->status == 200);
    bodies.push_back(board->body);

    CHECK(cli.Get("/v1/export")->status == 401);
    CHECK(cli.Get("/v1/export", {{"Authorization", "Bearer nope"}})->status == 401);
    auto exported = cli.Get("/v1/export", {{"Authorization", "Bearer tok"}});
    CHECK(exported->status == 200);
    bodies.push_back(exported->body);
    CHECK(cli.Get("/v1/unknown")->status == 404);

    for (const auto& b : bodies) CHECK(b.find("ATTACK-TEXT") == std::string::npos);
    server.stop();

    GameService closed(corpus, manual_plan(), {}, fixed_clock());
    GameServer server2(closed);
    httplib::Client cli2("127.0.0.1", server2.start());
    CHECK(cli2.Get("/v1/export", {{"Authorization", "Bearer tok"}})->status == 403);
}

} // TEST_SUITE
