#include "derail/backends.hpp"

#include "derail/synthetic.hpp"
#include "derail/util.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

namespace derail {

using nlohmann::json;
using nlohmann::ordered_json;

double TensionTrace::at(int k) const {
    if (k < 1 || k > static_cast<int>(probs.size()))
        fail(ErrorKind::not_found, "trace for '" + conversation_id + "' (seed " + seed_id + ") has no entry k=" +
                                       std::to_string(k));
    return probs[static_cast<std::size_t>(k - 1)];
}

// ---------------------------------------------------------------------------
// File formats

std::string serialize_trace(const TensionTrace& trace) {
    ordered_json j;
    j["conversation_id"] = trace.conversation_id;
    j["seed_id"] = trace.seed_id;
    j["probs"] = trace.probs;
    return j.dump();
}

std::vector<TensionTrace> load_traces(const std::filesystem::path& path) {
    std::vector<TensionTrace> out;
    for_each_line(path, [&](std::size_t line, const std::string& text) {
        try {
            const auto j = json::parse(text);
            TensionTrace t;
            t.conversation_id = j.at("conversation_id").get<std::string>();
            t.seed_id = j.at("seed_id").get<std::string>();
            t.probs = j.at("probs").get<std::vector<double>>();
            for (double p : t.probs) {
                if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::schema, "probability out of [0,1]");
            }
            out.push_back(std::move(t));
        } catch (const json::exception& e) {
            fail(ErrorKind::schema, path.string() + ":" + std::to_string(line) + ": " + e.what());
        } catch (const Error& e) {
            fail(ErrorKind::schema, path.string() + ":" + std::to_string(line) + ": " + e.what());
        }
    });
    return out;
}

void write_traces(const std::filesystem::path& path, const std::vector<TensionTrace>& traces) {
    std::string out;
    for (const auto& t : traces) out += serialize_trace(t) + "\n";
    write_file(path, out);
}

std::string serialize_bundle(const SimulationBundle& bundle) {
    ordered_json j;
    j["conversation_id"] = bundle.conversation_id;
    j["k"] = bundle.k;
    j["seed"] = bundle.seed;
    j["sims"] = ordered_json::array();
    for (const auto& s : bundle.sims) {
        ordered_json sj;
        sj["text"] = s.text;
        sj["prob"] = s.prob;
        j["sims"].push_back(std::move(sj));
    }
    return j.dump();
}

namespace {

SimulationBundle parse_bundle(const json& j) {
    SimulationBundle b;
    b.conversation_id = j.at("conversation_id").get<std::string>();
    b.k = j.at("k").get<int>();
    b.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("sims")) {
        SimulatedReply r{s.at("text").get<std::string>(), s.at("prob").get<double>()};
        if (!(r.prob >= 0.0 && r.prob <= 1.0)) fail(ErrorKind::schema, "simulated probability out of [0,1]");
        b.sims.push_back(std::move(r));
    }
    if (b.sims.empty()) fail(ErrorKind::schema, "simulation bundle with no sims");
    return b;
}

} // namespace

std::vector<SimulationBundle> load_simulations(const std::filesystem::path& path) {
    std::vector<SimulationBundle> out;
    for_each_line(path, [&](std::size_t line, const std::string& text) {
        try {
            out.push_back(parse_bundle(json::parse(text)));
        } catch (const json::exception& e) {
            fail(ErrorKind::schema, path.string() + ":" + std::to_string(line) + ": " + e.what());
        } catch (const Error& e) {
            fail(ErrorKind::schema, path.string() + ":" + std::to_string(line) + ": " + e.what());
        }
    });
    return out;
}

void write_simulations(const std::filesystem::path& path, const std::vector<SimulationBundle>& bundles) {
    std::string out;
    for (const auto& b : bundles) out += serialize_bundle(b) + "\n";
    write_file(path, out);
}

void validate(const BackendConfig& cfg) {
    auto check = [](const SourceConfig& source, const char* role) {
        if (const auto* table = std::get_if<TableConfig>(&source)) {
            if (!std::filesystem::exists(table->path))
                fail(ErrorKind::config, std::string(role) + " table file not found: " + table->path.string());
        } else if (const auto* remote = std::get_if<RemoteConfig>(&source)) {
            if (remote->endpoint.empty()) fail(ErrorKind::config, std::string(role) + " endpoint is empty");
            if (remote->timeout.count() <= 0) fail(ErrorKind::config, std::string(role) + " timeout must be positive");
            if (remote->retry.max_attempts < 1) fail(ErrorKind::config, std::string(role) + " needs max_attempts >= 1");
        }
    };
    check(cfg.scorer, "scorer");
    check(cfg.simulator, "simulator");
}

// ---------------------------------------------------------------------------
// Sources

namespace {

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

class SyntheticScorer final : public ScoreSource {
public:
    explicit SyntheticScorer(SyntheticConfig cfg) : cfg_(cfg), seed_(std::to_string(cfg.seed)) {}

    std::string fingerprint() const override {
        return "synthetic-scorer:v1:seed=" + seed_ + ":smoothing=" + format_fixed(cfg_.smoothing, 6) +
               ":drift=" + format_fixed(cfg_.drift, 6);
    }
    std::string seed_id() const override { return seed_; }

    double score_prefix(const Conversation& c, int k) override {
        ++calls_;
        return clamp01(smoothed(c, k) + drift(c, k));
    }

    double score_continuation(const Conversation& c, int k, const std::string& text) override {
        ++calls_;
        const double noise = unit_interval(hash_parts({"continuation", seed_, c.id, std::to_string(k), text}));
        const double step = 0.5 * noise + 0.5 * synthetic::hostile_share(text);
        return clamp01(cfg_.smoothing * smoothed(c, k) + (1.0 - cfg_.smoothing) * step + drift(c, k + 1));
    }

    std::uint64_t calls() const override { return calls_; }

private:
    double smoothed(const Conversation& c, int k) const {
        double x = 0.0;
        for (int j = 1; j <= k; ++j) {
            const double u = unit_interval(hash_parts({"prefix", seed_, c.id, std::to_string(j)}));
            x = j == 1 ? u : cfg_.smoothing * x + (1.0 - cfg_.smoothing) * u;
        }
        return x;
    }

    double drift(const Conversation& c, int k) const {
        const double sign = c.derails ? 1.0 : -1.0;
        return sign * cfg_.drift * static_cast<double>(k) / static_cast<double>(std::max(1, c.n()));
    }

    SyntheticConfig cfg_;
    std::string seed_;
    std::atomic<std::uint64_t> calls_{0};
};

class SyntheticSimulator final : public SimulationSource {
public:
    explicit SyntheticSimulator(SyntheticConfig cfg) : cfg_(cfg) {}

    std::string fingerprint() const override { return "synthetic-simulator:v1:seed=" + std::to_string(cfg_.seed); }

    std::vector<RawContinuation> simulate(const Conversation& c, int k, int m, std::uint64_t seed) override {
        ++calls_;
        std::vector<RawContinuation> out;
        const std::string base = std::to_string(cfg_.seed);
        const std::string request_seed = std::to_string(seed);
        for (int i = 0; i < m; ++i) {
            const auto h = hash_parts({"simulate", base, request_seed, c.id, std::to_string(k), std::to_string(i)});
            const double tone = unit_interval(mix64(h));
            out.push_back({synthetic::reply_text(h, tone), std::nullopt});
        }
        return out;
    }

    std::uint64_t calls() const override { return calls_; }

private:
    SyntheticConfig cfg_;
    std::atomic<std::uint64_t> calls_{0};
};

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

class TableScorer final : public ScoreSource {
public:
    explicit TableScorer(const TableConfig& cfg) : digest_(file_digest(cfg.path)), seed_id_(cfg.seed_id) {
        auto traces = load_traces(cfg.path);
        if (seed_id_.empty()) {
            std::set<std::string> seeds;
            for (const auto& t : traces) seeds.insert(t.seed_id);
            if (seeds.size() != 1)
                fail(ErrorKind::config, "trace file " + cfg.path.string() + " holds " + std::to_string(seeds.size()) +
                                            " seed ids; select one");
            seed_id_ = *seeds.begin();
        }
        for (auto& t : traces) {
            if (t.seed_id != seed_id_) continue;
            auto id = t.conversation_id;
            if (!traces_.emplace(std::move(id), std::move(t.probs)).second)
                fail(ErrorKind::schema, "duplicate trace for '" + t.conversation_id + "' seed " + seed_id_);
        }
    }

    std::string fingerprint() const override { return "table-scorer:" + digest_ + ":" + seed_id_; }
    std::string seed_id() const override { return seed_id_; }

    double score_prefix(const Conversation& c, int k) override {
        ++calls_;
        auto it = traces_.find(c.id);
        if (it == traces_.end() || k > static_cast<int>(it->second.size()))
            fail(ErrorKind::not_found, "missing trace entry for '" + c.id + "' k=" + std::to_string(k) +
                                           " (seed " + seed_id_ + ")");
        return it->second[static_cast<std::size_t>(k - 1)];
    }

    double score_continuation(const Conversation& c, int k, const std::string&) override {
        fail(ErrorKind::not_found, "table scorer cannot score unseen continuations ('" + c.id + "' k=" +
                                       std::to_string(k) + ")");
    }

    std::uint64_t calls() const override { return calls_; }

private:
    std::string digest_;
    std::string seed_id_;
    std::map<std::string, std::vector<double>> traces_;
    std::atomic<std::uint64_t> calls_{0};
};

class TableSimulator final : public SimulationSource {
public:
    explicit TableSimulator(const TableConfig& cfg) : digest_(file_digest(cfg.path)) {
        for (auto& b : load_simulations(cfg.path)) {
            auto key = std::make_tuple(b.conversation_id, b.k, b.seed);
            bundles_.emplace(std::move(key), std::move(b));
        }
    }

    std::string fingerprint() const override { return "table-simulator:" + digest_; }

    std::vector<RawContinuation> simulate(const Conversation& c, int k, int m, std::uint64_t seed) override {
        ++calls_;
        auto it = bundles_.find(std::make_tuple(c.id, k, seed));
        if (it == bundles_.end() || it->second.m() < m)
            fail(ErrorKind::not_found, "simulation table has no bundle of size " + std::to_string(m) + " for '" +
                                           c.id + "' k=" + std::to_string(k) + " seed=" + std::to_string(seed));
        std::vector<RawContinuation> out;
        for (int i = 0; i < m; ++i) {
            const auto& s = it->second.sims[static_cast<std::size_t>(i)];
            out.push_back({s.text, s.prob});
        }
        return out;
    }

    std::uint64_t calls() const override { return calls_; }

private:
    std::string digest_;
    std::map<std::tuple<std::string, int, std::uint64_t>, SimulationBundle> bundles_;
    std::atomic<std::uint64_t> calls_{0};
};

json context_json(const Conversation& c, int k) {
    json ctx = json::array();
    for (int pos = 1; pos <= k; ++pos) {
        const auto& u = c.at(pos);
        ctx.push_back({{"speaker", u.speaker}, {"text", u.text}});
    }
    return ctx;
}

// POSTs JSON with retry on transport failures, 429 and 5xx.
json post_json(const RemoteConfig& cfg, const std::string& path, const json& body) {
    std::string endpoint = cfg.endpoint;
    while (!endpoint.empty() && endpoint.back() == '/') endpoint.pop_back();
    auto backoff = cfg.retry.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= cfg.retry.max_attempts; ++attempt) {
        httplib::Client client(endpoint);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());
        auto res = client.Post(path, body.dump(), "application/json");
        bool retryable = true;
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
        } else if (res->status == 200) {
            try {
                return json::parse(res->body);
            } catch (const json::exception& e) {
                fail(ErrorKind::backend, endpoint + path + ": malformed response: " + e.what());
            }
        } else {
            last_error = "HTTP " + std::to_string(res->status);
            retryable = res->status == 429 || res->status >= 500;
        }
        if (!retryable) break;
        if (attempt < cfg.retry.max_attempts) {
            std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(
                static_cast<long long>(static_cast<double>(backoff.count()) * cfg.retry.multiplier));
        }
    }
    fail(ErrorKind::backend, endpoint + path + " failed: " + last_error);
}

double parse_probability(const json& response, const std::string& where) {
    if (!response.is_object() || !response.contains("p") || !response["p"].is_number())
        fail(ErrorKind::backend, where + ": response lacks numeric 'p'");
    const double p = response["p"].get<double>();
    if (!(p >= 0.0 && p <= 1.0))
        fail(ErrorKind::backend, where + ": out-of-range probability " + response["p"].dump());
    return p;
}

class RemoteScorer final : public ScoreSource {
public:
    explicit RemoteScorer(RemoteConfig cfg) : cfg_(std::move(cfg)) {}

    std::string fingerprint() const override { return "remote-scorer:" + cfg_.endpoint + ":" + cfg_.seed_id; }
    std::string seed_id() const override { return cfg_.seed_id; }

    double score_prefix(const Conversation& c, int k) override {
        ++calls_;
        const auto res = post_json(cfg_, "/v1/score", {{"context", context_json(c, k)}});
        return parse_probability(res, "score '" + c.id + "' k=" + std::to_string(k));
    }

    double score_continuation(const Conversation& c, int k, const std::string& text) override {
        ++calls_;
        auto ctx = context_json(c, k);
        ctx.push_back({{"speaker", "simulated"}, {"text", text}});
        const auto res = post_json(cfg_, "/v1/score", {{"context", ctx}});
        return parse_probability(res, "score continuation '" + c.id + "' k=" + std::to_string(k));
    }

    std::uint64_t calls() const override { return calls_; }

private:
    RemoteConfig cfg_;
    std::atomic<std::uint64_t> calls_{0};
};

class RemoteSimulator final : public SimulationSource {
public:
    explicit RemoteSimulator(RemoteConfig cfg) : cfg_(std::move(cfg)) {}

    std::string fingerprint() const override { return "remote-simulator:" + cfg_.endpoint; }

    std::vector<RawContinuation> simulate(const Conversation& c, int k, int m, std::uint64_t seed) override {
        ++calls_;
        const auto res = post_json(cfg_, "/v1/simulate", {{"context", context_json(c, k)}, {"m", m}, {"seed", seed}});
        if (!res.is_object() || !res.contains("utterances") || !res["utterances"].is_array())
            fail(ErrorKind::backend, "simulate '" + c.id + "': response lacks 'utterances'");
        std::vector<RawContinuation> out;
        for (const auto& u : res["utterances"]) {
            if (!u.is_object() || !u.contains("text") || !u["text"].is_string())
                fail(ErrorKind::backend, "simulate '" + c.id + "': utterance lacks 'text'");
            out.push_back({u["text"].get<std::string>(), std::nullopt});
        }
        return out;
    }

    std::uint64_t calls() const override { return calls_; }

private:
    RemoteConfig cfg_;
    std::atomic<std::uint64_t> calls_{0};
};

} // namespace

std::unique_ptr<ScoreSource> make_score_source(const SourceConfig& cfg) {
    return std::visit(
        [](const auto& c) -> std::unique_ptr<ScoreSource> {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, RemoteConfig>) return std::make_unique<RemoteScorer>(c);
            else if constexpr (std::is_same_v<T, TableConfig>) return std::make_unique<TableScorer>(c);
            else return std::make_unique<SyntheticScorer>(c);
        },
        cfg);
}

std::unique_ptr<SimulationSource> make_simulation_source(const SourceConfig& cfg) {
    return std::visit(
        [](const auto& c) -> std::unique_ptr<SimulationSource> {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, RemoteConfig>) return std::make_unique<RemoteSimulator>(c);
            else if constexpr (std::is_same_v<T, TableConfig>) return std::make_unique<TableSimulator>(c);
            else return std::make_unique<SyntheticSimulator>(c);
        },
        cfg);
}

// ---------------------------------------------------------------------------
// Cache

BackendCache::BackendCache(std::filesystem::path dir, std::string score_fingerprint,
                           std::string bundle_fingerprint) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    score_file_ = dir / ("scores-" + hex64(fnv1a64(score_fingerprint)) + ".jsonl");
    bundle_file_ = dir / ("sims-" + hex64(fnv1a64(bundle_fingerprint)) + ".jsonl");
    if (std::filesystem::exists(score_file_)) {
        for_each_line(score_file_, [&](std::size_t, const std::string& text) {
            const auto j = json::parse(text);
            scores_.emplace(ScoreKey{j.at("conversation_id").get<std::string>(), j.at("k").get<int>()},
                            j.at("p").get<double>());
        });
    }
    if (std::filesystem::exists(bundle_file_)) {
        for (auto& b : load_simulations(bundle_file_)) {
            BundleKey key{b.conversation_id, b.k, b.m(), b.seed};
            bundles_.emplace(std::move(key), std::move(b));
        }
    }
}

std::optional<double> BackendCache::score(const std::string& conversation_id, int k) const {
    std::lock_guard lock(mutex_);
    auto it = scores_.find(ScoreKey{conversation_id, k});
    if (it == scores_.end()) return std::nullopt;
    return it->second;
}

void BackendCache::put_score(const std::string& conversation_id, int k, double p) {
    std::lock_guard lock(mutex_);
    if (!scores_.emplace(ScoreKey{conversation_id, k}, p).second) return;
    if (score_file_.empty()) return;
    ordered_json j;
    j["conversation_id"] = conversation_id;
    j["k"] = k;
    j["p"] = p;
    std::ofstream out(score_file_, std::ios::app | std::ios::binary);
    out << j.dump() << '\n';
}

std::optional<SimulationBundle> BackendCache::bundle(const std::string& conversation_id, int k, int m,
                                                     std::uint64_t seed) const {
    std::lock_guard lock(mutex_);
    auto it = bundles_.find(BundleKey{conversation_id, k, m, seed});
    if (it == bundles_.end()) return std::nullopt;
    return it->second;
}

void BackendCache::put_bundle(const SimulationBundle& b) {
    std::lock_guard lock(mutex_);
    if (!bundles_.emplace(BundleKey{b.conversation_id, b.k, b.m(), b.seed}, b).second) return;
    if (bundle_file_.empty()) return;
    std::ofstream out(bundle_file_, std::ios::app | std::ios::binary);
    out << serialize_bundle(b) << '\n';
}

// ---------------------------------------------------------------------------
// Front end

Backends::Backends(std::unique_ptr<ScoreSource> scorer, std::unique_ptr<SimulationSource> simulator,
                   const std::filesystem::path& cache_dir)
    : scorer_(std::move(scorer)),
      simulator_(std::move(simulator)),
      cache_(cache_dir, scorer_->fingerprint(), scorer_->fingerprint() + "|" + simulator_->fingerprint()) {}

Backends::Backends(const BackendConfig& cfg)
    : Backends((validate(cfg), make_score_source(cfg.scorer)), make_simulation_source(cfg.simulator), cfg.cache_dir) {}

namespace {

double checked_probability(double p, const std::string& where) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::backend, where + ": out-of-range probability " + std::to_string(p));
    return p;
}

} // namespace

double Backends::score_prefix(const Conversation& c, int k) {
    if (k < 1 || k > c.n())
        fail(ErrorKind::precondition, "score_prefix: k=" + std::to_string(k) + " outside 1.." + std::to_string(c.n()));
    if (auto hit = cache_.score(c.id, k)) return *hit;
    const double p = checked_probability(scorer_->score_prefix(c, k), "score '" + c.id + "' k=" + std::to_string(k));
    cache_.put_score(c.id, k, p);
    return p;
}

SimulationBundle Backends::simulate_next(const Conversation& c, int k, int m, std::uint64_t seed) {
    if (k < 1 || k >= c.n())
        fail(ErrorKind::precondition, "simulate_next: k=" + std::to_string(k) + " outside 1.." +
                                          std::to_string(c.n() - 1) + " (nothing follows the final utterance)");
    return simulate_impl(c, k, m, seed);
}

SimulationBundle Backends::simulate_at_decision_point(const Conversation& c, int k, int m, std::uint64_t seed) {
    if (k < 1 || k > c.last_decision_point())
        fail(ErrorKind::precondition, "simulate: k=" + std::to_string(k) + " is not a decision point of '" + c.id + "'");
    return simulate_impl(c, k, m, seed);
}

SimulationBundle Backends::simulate_impl(const Conversation& c, int k, int m, std::uint64_t seed) {
    if (m < 1) fail(ErrorKind::precondition, "simulate: m must be >= 1");
    if (auto hit = cache_.bundle(c.id, k, m, seed)) return *hit;
    auto raw = simulator_->simulate(c, k, m, seed);
    if (static_cast<int>(raw.size()) != m)
        fail(ErrorKind::backend, "simulator returned " + std::to_string(raw.size()) + " continuations, expected " +
                                     std::to_string(m));
    SimulationBundle bundle{c.id, k, seed, {}};
    bundle.sims.reserve(raw.size());
    for (auto& r : raw) {
        const double p = r.prob ? *r.prob : scorer_->score_continuation(c, k, r.text);
        bundle.sims.push_back({std::move(r.text), checked_probability(p, "simulation '" + c.id + "' k=" + std::to_string(k))});
    }
    cache_.put_bundle(bundle);
    return bundle;
}

TensionTrace Backends::build_trace(const Conversation& c) {
    TensionTrace t{c.id, seed_id(), {}};
    t.probs.reserve(static_cast<std::size_t>(c.n()));
    for (int k = 1; k <= c.n(); ++k) t.probs.push_back(score_prefix(c, k));
    return t;
}

} // namespace derail
