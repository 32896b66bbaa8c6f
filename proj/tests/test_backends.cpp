#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>

#include "derail/backends.hpp"
#include "helpers.hpp"

using namespace derail;
using testing::conv;
using nlohmann::json;

namespace {

// In-process model server speaking the scorer/simulator protocol.
class FakeModelServer {
public:
    std::atomic<int> score_requests{0};
    std::atomic<int> simulate_requests{0};
    std::atomic<int> fail_first{0}; // this many requests answer 503 first
    std::atomic<int> status_override{0};
    double out_of_range = -1.0;       // when >= 0 the scorer returns this value

    FakeModelServer() {
        server_.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
            ++score_requests;
            if (reject(res)) return;
            const json body = json::parse(req.body);
            const auto len = body.at("context").size();
            const double p = out_of_range >= 0 ? out_of_range : 0.1 * static_cast<double>(len % 10);
            res.set_content(json{{"p", p}}.dump(), "application/json");
        });
        server_.Post("/v1/simulate", [this](const httplib::Request& req, httplib::Response& res) {
            ++simulate_requests;
            if (reject(res)) return;
            const json body = json::parse(req.body);
            json utts = json::array();
            for (int i = 0; i < body.at("m").get<int>(); ++i)
                utts.push_back({{"text", "sim " + std::to_string(i) + " seed " + std::to_string(body.at("seed").get<int>())}});
            res.set_content(json{{"utterances", utts}}.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeModelServer() {
        server_.stop();
        thread_.join();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    RemoteConfig remote() const {
        RemoteConfig r;
        r.endpoint = url();
        r.timeout = std::chrono::milliseconds(2000);
        r.retry.initial_backoff = std::chrono::milliseconds(1);
        r.seed_id = "remote-0";
        return r;
    }

private:
    bool reject(httplib::Response& res) {
        if (fail_first > 0) {
            --fail_first;
            res.status = 503;
            return true;
        }
        if (status_override != 0) {
            res.status = status_override;
            return true;
        }
        return false;
    }

    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

Backends synthetic_backends(std::uint64_t seed, const std::filesystem::path& cache = {}) {
    BackendConfig cfg;
    cfg.scorer = SyntheticConfig{seed};
    cfg.simulator = SyntheticConfig{seed};
    cfg.cache_dir = cache;
    return Backends(cfg);
}

} // namespace

TEST_SUITE("backends") {

TEST_CASE("table backend returns stored values exactly") {
    testing::TempDir dir;
    write_traces(dir / "t.jsonl", {testing::trace("c1", {0.50, 0.59, 0.65})});
    BackendConfig cfg;
    cfg.scorer = TableConfig{dir / "t.jsonl", "0"};
    Backends b(cfg);
    const auto c = conv("c1", false, 3);
    CHECK(b.score_prefix(c, 3) == 0.65);
    CHECK(b.score_prefix(c, 1) == 0.50);
    CHECK_THROWS_AS(b.score_prefix(c, 0), Error);
    CHECK_THROWS_AS(b.score_prefix(c, 4), Error);
    try {
        b.score_prefix(conv("missing", false, 3), 1);
        FAIL("expected missing trace entry");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("missing trace entry") != std::string::npos);
    }
}

TEST_CASE("trace and simulation files round-trip") {
    testing::TempDir dir;
    const std::vector<TensionTrace> traces{testing::trace("a", {0.1, 0.25}, "s1"), testing::trace("b", {0.3}, "s2")};
    write_traces(dir / "t.jsonl", traces);
    CHECK(load_traces(dir / "t.jsonl") == traces);

    const std::vector<SimulationBundle> bundles{{"a", 1, 7, {{"hello there", 0.53}, {"ok", 0.5}}}};
    write_simulations(dir / "s.jsonl", bundles);
    CHECK(load_simulations(dir / "s.jsonl") == bundles);

    write_file(dir / "bad.jsonl", R"({"conversation_id":"a","seed_id":"s","probs":[1.5]})");
    CHECK_THROWS_AS(load_traces(dir / "bad.jsonl"), Error);
}

TEST_CASE("table simulator serves stored bundles") {
    testing::TempDir dir;
    const std::vector<double> probs{0.53, 0.50, 0.50, 0.47, 0.50, 0.65, 0.50, 0.44, 0.50, 0.38};
    SimulationBundle bundle{"c1", 2, 3, {}};
    for (std::size_t i = 0; i < probs.size(); ++i) bundle.sims.push_back({"reply " + std::to_string(i), probs[i]});
    write_simulations(dir / "s.jsonl", {bundle});
    write_traces(dir / "t.jsonl", {testing::trace("c1", {0.5, 0.6, 0.7, 0.2})});
    BackendConfig cfg;
    cfg.scorer = TableConfig{dir / "t.jsonl", "0"};
    cfg.simulator = TableConfig{dir / "s.jsonl", {}};
    Backends b(cfg);
    const auto c = conv("c1", false, 4);
    const auto got = b.simulate_next(c, 2, 10, 3);
    REQUIRE(got.m() == 10);
    for (std::size_t i = 0; i < probs.size(); ++i) CHECK(got.sims[i].prob == probs[i]);
    CHECK_THROWS_AS(b.simulate_next(c, 3, 10, 3), Error); // cache miss on a table backend
    CHECK_THROWS_AS(b.simulate_next(c, 2, 11, 3), Error); // fewer stored than requested
}

TEST_CASE("synthetic backend is deterministic and seed-dependent") {
    auto a = synthetic_backends(1);
    auto a2 = synthetic_backends(1);
    auto b = synthetic_backends(2);
    const auto c = conv("c1", true, 5);
    CHECK(a.score_prefix(c, 2) == a2.score_prefix(c, 2));
    const auto ta = a.build_trace(c);
    const auto tb = b.build_trace(c);
    CHECK(ta.probs.size() == 5);
    CHECK(ta.seed_id == "1");
    CHECK(tb.seed_id == "2");
    CHECK(ta.probs != tb.probs);
    for (double p : ta.probs) CHECK((p >= 0.0 && p <= 1.0));

    const auto one = a.simulate_next(c, 2, 1, 9);
    CHECK(one.m() == 1);
    CHECK(one == a2.simulate_next(c, 2, 1, 9));
    const auto ten = a.simulate_next(c, 2, 10, 9);
    CHECK(ten.m() == 10);
    for (const auto& s : ten.sims) CHECK((s.prob >= 0.0 && s.prob <= 1.0));
}

TEST_CASE("simulate preconditions") {
    auto b = synthetic_backends(0);
    const auto calm = conv("c", false, 4);
    CHECK_THROWS_AS(b.simulate_next(calm, 4, 3, 0), Error); // k = n
    CHECK_THROWS_AS(b.simulate_next(calm, 1, 0, 0), Error); // m = 0
    CHECK_NOTHROW(b.simulate_at_decision_point(calm, 4, 3, 0));
    const auto derailing = conv("d", true, 4);
    CHECK_THROWS_AS(b.simulate_at_decision_point(derailing, 4, 3, 0), Error);
}

TEST_CASE("warm persistent cache answers without touching the source") {
    testing::TempDir dir;
    const auto c = conv("c1", false, 5);
    TensionTrace cold;
    SimulationBundle cold_bundle;
    {
        auto b = synthetic_backends(4, dir.path());
        cold = b.build_trace(c);
        cold_bundle = b.simulate_next(c, 2, 4, 1);
        CHECK(b.source_score_calls() > 0);
    }
    auto warm = synthetic_backends(4, dir.path());
    CHECK(warm.build_trace(c) == cold);
    CHECK(warm.simulate_next(c, 2, 4, 1) == cold_bundle);
    CHECK(warm.source_score_calls() == 0);
    CHECK(warm.source_simulation_calls() == 0);
}

TEST_CASE("remote scorer speaks the protocol, retries and caches") {
    FakeModelServer server;
    testing::TempDir dir;
    const auto c = conv("c1", false, 4);
    BackendConfig cfg;
    cfg.scorer = server.remote();
    cfg.simulator = server.remote();
    cfg.cache_dir = dir.path();
    {
        Backends b(cfg);
        server.fail_first = 2;
        CHECK(b.score_prefix(c, 3) == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(server.score_requests == 3);

        const auto bundle = b.simulate_next(c, 2, 3, 5);
        CHECK(bundle.m() == 3);
        CHECK(bundle.sims[0].text == "sim 0 seed 5");
        // Continuations are scored with the reply appended: context length 3.
        CHECK(bundle.sims[0].prob == doctest::Approx(0.3).epsilon(1e-12));
    }
    const int before_score = server.score_requests;
    const int before_sim = server.simulate_requests;
    Backends warm(cfg);
    CHECK(warm.score_prefix(c, 3) == doctest::Approx(0.3).epsilon(1e-12));
    warm.simulate_next(c, 2, 3, 5);
    CHECK(server.score_requests == before_score);
    CHECK(server.simulate_requests == before_sim);
    CHECK(warm.source_score_calls() == 0);
}

TEST_CASE("remote failures") {
    FakeModelServer server;
    const auto c = conv("c1", false, 4);
    BackendConfig cfg;
    cfg.scorer = server.remote();
    cfg.simulator = server.remote();

    SUBCASE("out-of-range probability is rejected, not clamped") {
        server.out_of_range = 1.5;
        Backends b(cfg);
        try {
            b.score_prefix(c, 1);
            FAIL("expected backend error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::backend);
            CHECK(std::string(e.what()).find("out-of-range") != std::string::npos);
        }
    }
    SUBCASE("retries are exhausted on persistent 5xx") {
        server.status_override = 500;
        Backends b(cfg);
        CHECK_THROWS_AS(b.score_prefix(c, 1), Error);
        CHECK(server.score_requests == 3);
    }
    SUBCASE("4xx is not retried") {
        server.status_override = 400;
        Backends b(cfg);
        CHECK_THROWS_AS(b.score_prefix(c, 1), Error);
        CHECK(server.score_requests == 1);
    }
    SUBCASE("unreachable endpoint") {
        RemoteConfig dead;
        dead.endpoint = "http://127.0.0.1:1";
        dead.timeout = std::chrono::milliseconds(200);
        dead.retry.max_attempts = 2;
        dead.retry.initial_backoff = std::chrono::milliseconds(1);
        BackendConfig d;
        d.scorer = dead;
        d.simulator = dead;
        Backends b(d);
        try {
            b.score_prefix(c, 1);
            FAIL("expected backend error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::backend);
        }
    }
}

TEST_CASE("backend config validation") {
    BackendConfig cfg;
    cfg.scorer = TableConfig{"/nonexistent/traces.jsonl", "0"};
    CHECK_THROWS_AS(validate(cfg), Error);
    RemoteConfig r;
    r.endpoint = "http://127.0.0.1:9";
    r.timeout = std::chrono::milliseconds(0);
    cfg.scorer = r;
    CHECK_THROWS_AS(validate(cfg), Error);
}

} // TEST_SUITE
