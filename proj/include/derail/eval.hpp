#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "derail/backends.hpp"
#include "derail/corpus.hpp"
#include "derail/policy.hpp"

namespace derail {

enum class OutcomeClass { tp, fp, fn, tn };

std::string_view to_string(OutcomeClass c);
OutcomeClass parse_outcome_class(std::string_view text);

struct Outcome {
    std::string conversation_id;
    OutcomeClass cls = OutcomeClass::tn;
    std::optional<int> trigger_index;
    std::optional<int> horizon; // TP only: n - trigger_index

    bool operator==(const Outcome&) const = default;
};

// Shared by model runs and human game sessions.
Outcome classify_trigger(const Conversation& conversation, std::optional<int> trigger_index);
Outcome classify_outcome(const Conversation& conversation, const RunResult& run);

struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    Counts& operator+=(const Counts& o);
    bool operator==(const Counts&) const = default;
};

// Ratios with a zero denominator are absent. f1 = 2tp/(2tp+fp+fn), 0 when
// that denominator is 0.
struct MetricsReport {
    Counts counts;
    std::uint64_t horizon_sum = 0;
    double accuracy = 0.0;
    std::optional<double> fpr, precision, recall;
    double f1 = 0.0;
    std::optional<double> mean_horizon;

    bool operator==(const MetricsReport&) const = default;
};

MetricsReport compute_metrics(std::span<const Outcome> outcomes);
MetricsReport metrics_from_counts(const Counts& counts, std::uint64_t horizon_sum);

struct MeanSd {
    double mean = 0.0;
    std::optional<double> sd; // sample sd, absent for a single value
};

// Per-metric mean ± sample sd across seeds; a metric is absent if absent in
// every seed and averaged over the seeds where present otherwise.
struct AggregateReport {
    std::size_t seeds = 0;
    std::optional<MeanSd> accuracy, fpr, precision, recall, f1, mean_horizon;
};

AggregateReport aggregate(std::span<const MetricsReport> per_seed);

// Traces keyed by conversation id, one scorer seed.
class TraceSet {
public:
    TraceSet() = default;
    explicit TraceSet(std::string seed_id) : seed_id_(std::move(seed_id)) {}

    void add(TensionTrace trace);
    const TensionTrace* find(const std::string& conversation_id) const;
    const TensionTrace& get(const std::string& conversation_id) const;
    const std::string& seed_id() const { return seed_id_; }
    std::size_t size() const { return traces_.size(); }

private:
    std::string seed_id_;
    std::map<std::string, TensionTrace> traces_;
};

// Groups loaded traces by seed id.
std::map<std::string, TraceSet> group_traces(const std::vector<TensionTrace>& traces);

TraceSet build_traces(std::span<const Conversation* const> conversations, Backends& backends, unsigned jobs = 1);

// First k in the decision range with p_k > T, computed from a complete trace.
std::optional<int> threshold_trigger(const Conversation& conversation, const TensionTrace& trace, double threshold);

std::vector<Outcome> threshold_outcomes(std::span<const Conversation* const> conversations, const TraceSet& traces,
                                        double threshold);

// {i * step : i = 0, 1, ...} within [0, 1]; step in (0, 1].
std::vector<double> threshold_grid(double step);

// Smallest grid value maximizing the number of correct outcomes.
double tune_threshold(std::span<const Conversation* const> conversations, const TraceSet& traces,
                      double step = 0.0025);

struct SeedSetup {
    std::string seed_id;
    Backends* backends = nullptr;
    double threshold = 0.5; // accuracy-tuned for this seed
    const TraceSet* traces = nullptr;
};

struct SweepRow {
    int tau = 0;
    MetricsReport metrics; // pooled over seeds
    AggregateReport per_seed;
    std::optional<double> matched_threshold;
    std::optional<MetricsReport> matched_metrics;
};

// Selective deferral at each τ, each seed using its own tuned threshold.
// `base` supplies M and the simulation seed.
std::vector<SweepRow> sweep_tau(std::span<const Conversation* const> conversations, std::span<const SeedSetup> seeds,
                                const PolicyConfig& base, std::span<const int> taus, unsigned jobs = 1);

struct OracleWindow {
    double center = 0.0;
    double half_width = 0.15;
    int steps = 400; // steps + 1 candidates
};

// Candidate thresholds clamped into [0, 1], ascending.
std::vector<double> oracle_candidates(const OracleWindow& window);

// Pooled threshold metrics for one candidate across every seed.
MetricsReport pooled_threshold_metrics(std::span<const Conversation* const> conversations,
                                       std::span<const SeedSetup> seeds, double threshold);

// Fills matched_threshold / matched_metrics on each row: the candidate whose
// pooled FPR is closest to the row's pooled FPR, ties to the lower threshold.
void fpr_matched_oracle(std::vector<SweepRow>& rows, std::span<const Conversation* const> conversations,
                        std::span<const SeedSetup> seeds, const OracleWindow& window);

// Window centred on the mean of the per-seed tuned thresholds.
OracleWindow default_window(std::span<const SeedSetup> seeds);

// D_k = P_k - P_{k+1}; absent when u_{k+1} is the final utterance (which for
// a derailing conversation is the attack).
std::optional<double> tension_delta(const TensionTrace& trace, int k, const Conversation& conversation);

struct TensionEvent {
    std::string conversation_id;
    int k = 0;

    bool operator==(const TensionEvent&) const = default;
};

std::vector<TensionEvent> defer_events(std::span<const RunResult> runs);
std::vector<TensionEvent> trigger_events(std::span<const RunResult> runs);
std::vector<TensionEvent> trigger_events(std::span<const Outcome> outcomes);

struct DecreaseSummary {
    std::size_t events = 0;
    std::size_t excluded = 0;
    std::size_t decreased = 0;
    double fraction = 0.0;
};

DecreaseSummary decrease_summary(std::span<const TensionEvent> events, const TraceSet& traces, const Corpus& corpus);
double decrease_fraction(std::span<const TensionEvent> events, const TraceSet& traces, const Corpus& corpus);

// Mean P_k over trigger events.
double trigger_tension_summary(std::span<const TensionEvent> events, const TraceSet& traces);

} // namespace derail
