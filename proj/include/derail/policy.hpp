#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "derail/backends.hpp"
#include "derail/corpus.hpp"
#include "derail/error.hpp"
#include "derail/util.hpp"

namespace derail {

enum class PolicyKind {
    threshold,
    selective_deferral,
    random_deferral,
    simulation_average,
    simulation_majority,
    variance_deferral,
};

std::string_view to_string(PolicyKind kind);
PolicyKind parse_policy_kind(std::string_view text);

enum class Decision { wait, trigger, defer };

std::string_view to_string(Decision d);
Decision parse_decision(std::string_view text);

struct PolicyConfig {
    PolicyKind kind = PolicyKind::threshold;
    double threshold = 0.5;
    int m = 10;
    int tau = 7;
    std::optional<double> p_defer;       // random_deferral
    std::optional<double> var_threshold; // variance_deferral
    std::uint64_t seed = 0;
    // simulation_average / simulation_majority: simulate at every decision
    // point, or only where p_k > T.
    bool simulate_every_point = true;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static PolicyConfig from_json(const nlohmann::json& j);
};

struct DecisionRecord {
    std::string conversation_id;
    int k = 0;
    double p = 0.0; // tension used for the tense test (ensemble mean for variance deferral)
    Decision decision = Decision::wait;
    std::optional<int> calm;
    std::string detail;

    bool operator==(const DecisionRecord&) const = default;
};

struct RunResult {
    std::string conversation_id;
    std::vector<DecisionRecord> records;
    bool triggered = false;
    std::optional<int> trigger_index;

    bool operator==(const RunResult&) const = default;
};

class RunError : public Error {
public:
    RunError(const std::string& conversation_id, int k, const Error& cause)
        : Error(cause.kind(), "run '" + conversation_id + "' failed at k=" + std::to_string(k) + ": " + cause.what()),
          conversation_id_(conversation_id), k_(k) {}

    const std::string& conversation_id() const { return conversation_id_; }
    int k() const { return k_; }

private:
    std::string conversation_id_;
    int k_;
};

// g_k = 1{p_k > T}
bool threshold_decision(double p, double threshold);

// g^{sim_i} for each simulated continuation.
std::vector<bool> simulated_decisions(const SimulationBundle& bundle, double threshold);
int calm_count(const SimulationBundle& bundle, double threshold);

Decision selective_deferral_decision(double p, double threshold, int calm, int m, int tau);

// Draws from rng only at tense points.
Decision random_deferral_decision(double p, double threshold, double p_defer, Rng& rng);

bool simulation_average_decision(const SimulationBundle& bundle, double threshold);
bool simulation_majority_decision(const SimulationBundle& bundle, double threshold);

// Population variance across seeds gates deferral; the mean decides tenseness.
Decision variance_deferral_decision(std::span<const double> seed_probs, double threshold, double var_threshold);

double population_variance(std::span<const double> values);

// Deferred tense moments over all tense moments in the supplied runs.
double estimate_deferral_rate(std::span<const RunResult> runs);

// Runs one policy over one conversation. `ensemble` supplies the per-seed
// scorers for variance deferral and is ignored otherwise.
RunResult run_forecaster(const Conversation& conversation, const PolicyConfig& policy, Backends& backends,
                         std::span<Backends* const> ensemble = {});

std::vector<RunResult> run_forecaster_all(std::span<const Conversation* const> conversations,
                                          const PolicyConfig& policy, Backends& backends,
                                          std::span<Backends* const> ensemble = {}, unsigned jobs = 1);

nlohmann::ordered_json to_json(const RunResult& run, const PolicyConfig& policy);
RunResult run_from_json(const nlohmann::json& j);

} // namespace derail
