#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "derail/corpus.hpp"

namespace derail {

struct TensionTrace {
    std::string conversation_id;
    std::string seed_id;
    std::vector<double> probs; // probs[k-1] = P(derailment | u_1..u_k)

    double at(int k) const;
    bool operator==(const TensionTrace&) const = default;
};

struct SimulatedReply {
    std::string text;
    double prob = 0.0;

    bool operator==(const SimulatedReply&) const = default;
};

struct SimulationBundle {
    std::string conversation_id;
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<SimulatedReply> sims;

    int m() const { return static_cast<int>(sims.size()); }
    bool operator==(const SimulationBundle&) const = default;
};

// Trace file: {"conversation_id","seed_id","probs"} per line.
std::vector<TensionTrace> load_traces(const std::filesystem::path& path);
std::string serialize_trace(const TensionTrace& trace);
void write_traces(const std::filesystem::path& path, const std::vector<TensionTrace>& traces);

// Simulation file: {"conversation_id","k","seed","sims":[{"text","prob"}]} per line.
std::vector<SimulationBundle> load_simulations(const std::filesystem::path& path);
std::string serialize_bundle(const SimulationBundle& bundle);
void write_simulations(const std::filesystem::path& path, const std::vector<SimulationBundle>& bundles);

struct RetryPolicy {
    int max_attempts = 3; // including the first
    std::chrono::milliseconds initial_backoff{100};
    double multiplier = 2.0;
};

struct RemoteConfig {
    std::string endpoint; // e.g. http://127.0.0.1:8080
    std::chrono::milliseconds timeout{30000};
    RetryPolicy retry;
    std::string seed_id = "remote";
};

struct TableConfig {
    std::filesystem::path path; // trace file for scorers, simulation file for simulators
    std::string seed_id;        // scorer only; empty selects the single seed in the file
};

struct SyntheticConfig {
    std::uint64_t seed = 0;
    double smoothing = 0.6; // weight on the previous smoothed value
    double drift = 0.25;    // label-aligned drift, scaled by k/n
};

using SourceConfig = std::variant<RemoteConfig, TableConfig, SyntheticConfig>;

struct BackendConfig {
    SourceConfig scorer = SyntheticConfig{};
    SourceConfig simulator = SyntheticConfig{};
    std::filesystem::path cache_dir; // empty: in-memory caching only
};

void validate(const BackendConfig& cfg);

// A proposed continuation; prob is set when the source scores its own output
// (table files), otherwise the scorer is asked.
struct RawContinuation {
    std::string text;
    std::optional<double> prob;
};

class ScoreSource {
public:
    virtual ~ScoreSource() = default;
    virtual std::string fingerprint() const = 0;
    virtual std::string seed_id() const = 0;
    virtual double score_prefix(const Conversation& conversation, int k) = 0;
    // P(derailment | u_1..u_k, text)
    virtual double score_continuation(const Conversation& conversation, int k, const std::string& text) = 0;
    virtual std::uint64_t calls() const = 0;
};

class SimulationSource {
public:
    virtual ~SimulationSource() = default;
    virtual std::string fingerprint() const = 0;
    virtual std::vector<RawContinuation> simulate(const Conversation& conversation, int k, int m,
                                                  std::uint64_t seed) = 0;
    virtual std::uint64_t calls() const = 0;
};

std::unique_ptr<ScoreSource> make_score_source(const SourceConfig& cfg);
std::unique_ptr<SimulationSource> make_simulation_source(const SourceConfig& cfg);

// Persistent cache keyed by (fingerprint, conversation id, k[, m, seed]).
// Safe for concurrent use; entries are immutable once written.
class BackendCache {
public:
    BackendCache(std::filesystem::path dir, std::string score_fingerprint, std::string bundle_fingerprint);

    std::optional<double> score(const std::string& conversation_id, int k) const;
    void put_score(const std::string& conversation_id, int k, double p);

    std::optional<SimulationBundle> bundle(const std::string& conversation_id, int k, int m,
                                           std::uint64_t seed) const;
    void put_bundle(const SimulationBundle& bundle);

private:
    using ScoreKey = std::pair<std::string, int>;
    using BundleKey = std::tuple<std::string, int, int, std::uint64_t>;

    std::filesystem::path score_file_;
    std::filesystem::path bundle_file_;
    mutable std::mutex mutex_;
    std::map<ScoreKey, double> scores_;
    std::map<BundleKey, SimulationBundle> bundles_;
};

// Scoring and simulation front end: validates preconditions and ranges,
// consults the cache, and delegates misses to the configured sources.
class Backends {
public:
    Backends(std::unique_ptr<ScoreSource> scorer, std::unique_ptr<SimulationSource> simulator,
             const std::filesystem::path& cache_dir = {});
    explicit Backends(const BackendConfig& cfg);

    double score_prefix(const Conversation& conversation, int k);

    // Strict form: 1 <= k < n.
    SimulationBundle simulate_next(const Conversation& conversation, int k, int m, std::uint64_t seed);
    // Runner form: any decision point, including k = n of a calm conversation.
    SimulationBundle simulate_at_decision_point(const Conversation& conversation, int k, int m,
                                                std::uint64_t seed);

    TensionTrace build_trace(const Conversation& conversation);

    std::string scorer_fingerprint() const { return scorer_->fingerprint(); }
    std::string simulator_fingerprint() const { return simulator_->fingerprint(); }
    std::string seed_id() const { return scorer_->seed_id(); }

    std::uint64_t source_score_calls() const { return scorer_->calls(); }
    std::uint64_t source_simulation_calls() const { return simulator_->calls(); }

private:
    SimulationBundle simulate_impl(const Conversation& conversation, int k, int m, std::uint64_t seed);

    std::unique_ptr<ScoreSource> scorer_;
    std::unique_ptr<SimulationSource> simulator_;
    BackendCache cache_;
};

} // namespace derail
