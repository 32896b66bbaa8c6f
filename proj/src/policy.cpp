#include "derail/policy.hpp"

#include <numeric>

namespace derail {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::threshold: return "threshold";
    case PolicyKind::selective_deferral: return "selective_deferral";
    case PolicyKind::random_deferral: return "random_deferral";
    case PolicyKind::simulation_average: return "simulation_average";
    case PolicyKind::simulation_majority: return "simulation_majority";
    case PolicyKind::variance_deferral: return "variance_deferral";
    }
    return "threshold";
}

PolicyKind parse_policy_kind(std::string_view text) {
    for (auto kind : {PolicyKind::threshold, PolicyKind::selective_deferral, PolicyKind::random_deferral,
                      PolicyKind::simulation_average, PolicyKind::simulation_majority,
                      PolicyKind::variance_deferral}) {
        if (to_string(kind) == text) return kind;
    }
    fail(ErrorKind::config, "unknown policy '" + std::string(text) + "'");
}

std::string_view to_string(Decision d) {
    switch (d) {
    case Decision::wait: return "wait";
    case Decision::trigger: return "trigger";
    case Decision::defer: return "defer";
    }
    return "wait";
}

Decision parse_decision(std::string_view text) {
    if (text == "wait") return Decision::wait;
    if (text == "trigger") return Decision::trigger;
    if (text == "defer") return Decision::defer;
    fail(ErrorKind::schema, "unknown decision '" + std::string(text) + "'");
}

void PolicyConfig::validate() const {
    const auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!in_unit(threshold)) fail(ErrorKind::config, "policy: T must lie in [0,1]");
    if (m < 1) fail(ErrorKind::config, "policy: M must be >= 1");
    if (tau < 0 || tau > m) fail(ErrorKind::config, "policy: tau must lie in [0, M]");
    if (kind == PolicyKind::random_deferral && (!p_defer || !in_unit(*p_defer)))
        fail(ErrorKind::config, "policy: random_deferral needs p_defer in [0,1]");
    if (kind == PolicyKind::variance_deferral && (!var_threshold || !(*var_threshold >= 0.0)))
        fail(ErrorKind::config, "policy: variance_deferral needs var_threshold >= 0");
}

ordered_json PolicyConfig::to_json() const {
    ordered_json j;
    j["kind"] = std::string(to_string(kind));
    j["T"] = threshold;
    j["M"] = m;
    j["tau"] = tau;
    if (p_defer) j["p_defer"] = *p_defer;
    if (var_threshold) j["var_threshold"] = *var_threshold;
    j["seed"] = seed;
    if (kind == PolicyKind::simulation_average || kind == PolicyKind::simulation_majority)
        j["simulate_every_point"] = simulate_every_point;
    return j;
}

PolicyConfig PolicyConfig::from_json(const json& j) {
    PolicyConfig p;
    p.kind = parse_policy_kind(j.at("kind").get<std::string>());
    p.threshold = j.value("T", p.threshold);
    p.m = j.value("M", p.m);
    p.tau = j.value("tau", p.tau);
    if (j.contains("p_defer")) p.p_defer = j["p_defer"].get<double>();
    if (j.contains("var_threshold")) p.var_threshold = j["var_threshold"].get<double>();
    p.seed = j.value("seed", p.seed);
    p.simulate_every_point = j.value("simulate_every_point", p.simulate_every_point);
    return p;
}

bool threshold_decision(double p, double threshold) { return p > threshold; }

std::vector<bool> simulated_decisions(const SimulationBundle& bundle, double threshold) {
    std::vector<bool> out;
    out.reserve(bundle.sims.size());
    for (const auto& s : bundle.sims) out.push_back(threshold_decision(s.prob, threshold));
    return out;
}

int calm_count(const SimulationBundle& bundle, double threshold) {
    int calm = 0;
    for (const auto& s : bundle.sims) calm += threshold_decision(s.prob, threshold) ? 0 : 1;
    return calm;
}

Decision selective_deferral_decision(double p, double threshold, int calm, int m, int tau) {
    if (calm < 0 || calm > m) fail(ErrorKind::precondition, "calm count outside [0, M]");
    if (tau < 0 || tau > m) fail(ErrorKind::precondition, "tau outside [0, M]");
    if (!threshold_decision(p, threshold)) return Decision::wait;
    return calm <= tau ? Decision::trigger : Decision::defer;
}

Decision random_deferral_decision(double p, double threshold, double p_defer, Rng& rng) {
    if (!threshold_decision(p, threshold)) return Decision::wait;
    return rng.uniform() < p_defer ? Decision::defer : Decision::trigger;
}

bool simulation_average_decision(const SimulationBundle& bundle, double threshold) {
    if (bundle.sims.empty()) fail(ErrorKind::precondition, "empty simulation bundle");
    double sum = 0.0;
    for (const auto& s : bundle.sims) sum += s.prob;
    return threshold_decision(sum / static_cast<double>(bundle.sims.size()), threshold);
}

bool simulation_majority_decision(const SimulationBundle& bundle, double threshold) {
    if (bundle.sims.empty()) fail(ErrorKind::precondition, "empty simulation bundle");
    const int m = bundle.m();
    const int votes = m - calm_count(bundle, threshold);
    return 2 * votes > m;
}

double population_variance(std::span<const double> values) {
    if (values.empty()) return 0.0;
    // Pairwise form: exactly 0 for identical values, where the mean-based form
    // can leave rounding residue.
    const double n = static_cast<double>(values.size());
    double ss = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
        for (std::size_t j = i + 1; j < values.size(); ++j) ss += (values[i] - values[j]) * (values[i] - values[j]);
    return ss / (n * n);
}

Decision variance_deferral_decision(std::span<const double> seed_probs, double threshold, double var_threshold) {
    if (seed_probs.size() < 2) fail(ErrorKind::precondition, "variance deferral needs at least 2 seeds");
    const double mean =
        std::accumulate(seed_probs.begin(), seed_probs.end(), 0.0) / static_cast<double>(seed_probs.size());
    if (!threshold_decision(mean, threshold)) return Decision::wait;
    return population_variance(seed_probs) > var_threshold ? Decision::defer : Decision::trigger;
}

double estimate_deferral_rate(std::span<const RunResult> runs) {
    std::size_t tense = 0, deferred = 0;
    for (const auto& run : runs) {
        for (const auto& r : run.records) {
            if (r.decision == Decision::wait) continue;
            ++tense;
            deferred += r.decision == Decision::defer ? 1 : 0;
        }
    }
    if (tense == 0) fail(ErrorKind::precondition, "estimate_deferral_rate: no tense moments observed");
    return static_cast<double>(deferred) / static_cast<double>(tense);
}

RunResult run_forecaster(const Conversation& c, const PolicyConfig& policy, Backends& backends,
                         std::span<Backends* const> ensemble) {
    policy.validate();
    if (policy.kind == PolicyKind::variance_deferral && ensemble.size() < 2)
        fail(ErrorKind::config, "variance_deferral needs an ensemble of at least 2 scorers");

    RunResult result;
    result.conversation_id = c.id;
    Rng rng(hash_parts({"random-deferral", std::to_string(policy.seed), c.id}));
    const double T = policy.threshold;

    for (int k = 1; k <= c.last_decision_point(); ++k) {
        DecisionRecord rec;
        rec.conversation_id = c.id;
        rec.k = k;
        try {
            switch (policy.kind) {
            case PolicyKind::threshold:
                rec.p = backends.score_prefix(c, k);
                rec.decision = threshold_decision(rec.p, T) ? Decision::trigger : Decision::wait;
                break;
            case PolicyKind::selective_deferral:
                rec.p = backends.score_prefix(c, k);
                if (threshold_decision(rec.p, T)) {
                    const auto bundle = backends.simulate_at_decision_point(c, k, policy.m, policy.seed);
                    rec.calm = calm_count(bundle, T);
                    rec.decision = selective_deferral_decision(rec.p, T, *rec.calm, policy.m, policy.tau);
                }
                break;
            case PolicyKind::random_deferral:
                rec.p = backends.score_prefix(c, k);
                rec.decision = random_deferral_decision(rec.p, T, *policy.p_defer, rng);
                break;
            case PolicyKind::simulation_average:
            case PolicyKind::simulation_majority: {
                rec.p = backends.score_prefix(c, k);
                if (!policy.simulate_every_point && !threshold_decision(rec.p, T)) break;
                const auto bundle = backends.simulate_at_decision_point(c, k, policy.m, policy.seed);
                rec.calm = calm_count(bundle, T);
                const bool fire = policy.kind == PolicyKind::simulation_average
                                      ? simulation_average_decision(bundle, T)
                                      : simulation_majority_decision(bundle, T);
                rec.decision = fire ? Decision::trigger : Decision::wait;
                double sum = 0.0;
                for (const auto& s : bundle.sims) sum += s.prob;
                rec.detail = "sim_mean=" + format_fixed(sum / bundle.m(), 6);
                break;
            }
            case PolicyKind::variance_deferral: {
                std::vector<double> probs;
                probs.reserve(ensemble.size());
                for (auto* member : ensemble) probs.push_back(member->score_prefix(c, k));
                rec.p = std::accumulate(probs.begin(), probs.end(), 0.0) / static_cast<double>(probs.size());
                rec.decision = variance_deferral_decision(probs, T, *policy.var_threshold);
                rec.detail = "var=" + format_fixed(population_variance(probs), 6);
                break;
            }
            }
        } catch (const RunError&) {
            throw;
        } catch (const Error& e) {
            throw RunError(c.id, k, e);
        }
        const bool fired = rec.decision == Decision::trigger;
        result.records.push_back(std::move(rec));
        if (fired) {
            result.triggered = true;
            result.trigger_index = k;
            break;
        }
    }
    return result;
}

std::vector<RunResult> run_forecaster_all(std::span<const Conversation* const> conversations,
                                          const PolicyConfig& policy, Backends& backends,
                                          std::span<Backends* const> ensemble, unsigned jobs) {
    std::vector<RunResult> out(conversations.size());
    parallel_for(conversations.size(), jobs, [&](std::size_t i) {
        out[i] = run_forecaster(*conversations[i], policy, backends, ensemble);
    });
    return out;
}

ordered_json to_json(const RunResult& run, const PolicyConfig& policy) {
    ordered_json j;
    j["conversation_id"] = run.conversation_id;
    j["policy"] = policy.to_json();
    j["records"] = ordered_json::array();
    for (const auto& r : run.records) {
        ordered_json rj;
        rj["k"] = r.k;
        rj["p"] = r.p;
        rj["decision"] = std::string(to_string(r.decision));
        rj["calm"] = r.calm ? ordered_json(*r.calm) : ordered_json(nullptr);
        j["records"].push_back(std::move(rj));
    }
    j["triggered"] = run.triggered;
    j["trigger_index"] = run.trigger_index ? ordered_json(*run.trigger_index) : ordered_json(nullptr);
    return j;
}

RunResult run_from_json(const json& j) {
    RunResult run;
    run.conversation_id = j.at("conversation_id").get<std::string>();
    for (const auto& rj : j.at("records")) {
        DecisionRecord r;
        r.conversation_id = run.conversation_id;
        r.k = rj.at("k").get<int>();
        r.p = rj.at("p").get<double>();
        r.decision = parse_decision(rj.at("decision").get<std::string>());
        if (rj.contains("calm") && !rj["calm"].is_null()) r.calm = rj["calm"].get<int>();
        run.records.push_back(std::move(r));
    }
    run.triggered = j.at("triggered").get<bool>();
    if (j.contains("trigger_index") && !j["trigger_index"].is_null()) run.trigger_index = j["trigger_index"].get<int>();
    return run;
}

} // namespace derail
