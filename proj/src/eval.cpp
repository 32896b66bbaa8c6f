#include "derail/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

namespace derail {

std::string_view to_string(OutcomeClass c) {
    switch (c) {
    case OutcomeClass::tp: return "TP";
    case OutcomeClass::fp: return "FP";
    case OutcomeClass::fn: return "FN";
    case OutcomeClass::tn: return "TN";
    }
    return "TN";
}

OutcomeClass parse_outcome_class(std::string_view text) {
    if (text == "TP") return OutcomeClass::tp;
    if (text == "FP") return OutcomeClass::fp;
    if (text == "FN") return OutcomeClass::fn;
    if (text == "TN") return OutcomeClass::tn;
    fail(ErrorKind::schema, "unknown outcome class '" + std::string(text) + "'");
}

Outcome classify_trigger(const Conversation& c, std::optional<int> trigger_index) {
    if (trigger_index && (*trigger_index < 1 || *trigger_index > c.last_decision_point()))
        fail(ErrorKind::precondition, "trigger index " + std::to_string(*trigger_index) + " outside the decision range of '" +
                                          c.id + "'");
    Outcome o;
    o.conversation_id = c.id;
    o.trigger_index = trigger_index;
    if (c.derails) {
        o.cls = trigger_index ? OutcomeClass::tp : OutcomeClass::fn;
        if (trigger_index) o.horizon = c.n() - *trigger_index;
    } else {
        o.cls = trigger_index ? OutcomeClass::fp : OutcomeClass::tn;
    }
    return o;
}

Outcome classify_outcome(const Conversation& c, const RunResult& run) {
    if (run.conversation_id != c.id)
        fail(ErrorKind::precondition, "run for '" + run.conversation_id + "' classified against '" + c.id + "'");
    if (run.triggered != run.trigger_index.has_value())
        fail(ErrorKind::precondition, "run for '" + c.id + "' has inconsistent trigger fields");
    return classify_trigger(c, run.trigger_index);
}

Counts& Counts::operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

MetricsReport metrics_from_counts(const Counts& counts, std::uint64_t horizon_sum) {
    if (counts.total() == 0) fail(ErrorKind::precondition, "metrics over an empty outcome set");
    const auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    MetricsReport m;
    m.counts = counts;
    m.horizon_sum = horizon_sum;
    m.accuracy = *ratio(counts.tp + counts.tn, counts.total());
    m.fpr = ratio(counts.fp, counts.fp + counts.tn);
    m.precision = ratio(counts.tp, counts.tp + counts.fp);
    m.recall = ratio(counts.tp, counts.tp + counts.fn);
    m.f1 = ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn).value_or(0.0);
    m.mean_horizon = ratio(horizon_sum, counts.tp);
    return m;
}

MetricsReport compute_metrics(std::span<const Outcome> outcomes) {
    Counts counts;
    std::uint64_t horizon_sum = 0;
    for (const auto& o : outcomes) {
        switch (o.cls) {
        case OutcomeClass::tp:
            ++counts.tp;
            if (!o.horizon || *o.horizon < 1)
                fail(ErrorKind::precondition, "TP outcome for '" + o.conversation_id + "' lacks a positive horizon");
            horizon_sum += static_cast<std::uint64_t>(*o.horizon);
            break;
        case OutcomeClass::fp: ++counts.fp; break;
        case OutcomeClass::fn: ++counts.fn; break;
        case OutcomeClass::tn: ++counts.tn; break;
        }
    }
    return metrics_from_counts(counts, horizon_sum);
}

AggregateReport aggregate(std::span<const MetricsReport> per_seed) {
    AggregateReport out;
    out.seeds = per_seed.size();
    const auto summarize = [&](auto&& pick) -> std::optional<MeanSd> {
        std::vector<double> values;
        for (const auto& m : per_seed) {
            if (const std::optional<double> v = pick(m)) values.push_back(*v);
        }
        if (values.empty()) return std::nullopt;
        MeanSd s;
        s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        if (values.size() >= 2) {
            double ss = 0.0;
            for (double v : values) ss += (v - s.mean) * (v - s.mean);
            s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        return s;
    };
    out.accuracy = summarize([](const MetricsReport& m) { return std::optional<double>(m.accuracy); });
    out.fpr = summarize([](const MetricsReport& m) { return m.fpr; });
    out.precision = summarize([](const MetricsReport& m) { return m.precision; });
    out.recall = summarize([](const MetricsReport& m) { return m.recall; });
    out.f1 = summarize([](const MetricsReport& m) { return std::optional<double>(m.f1); });
    out.mean_horizon = summarize([](const MetricsReport& m) { return m.mean_horizon; });
    return out;
}

void TraceSet::add(TensionTrace trace) {
    if (seed_id_.empty()) seed_id_ = trace.seed_id;
    if (trace.seed_id != seed_id_)
        fail(ErrorKind::conflict, "trace for '" + trace.conversation_id + "' has seed '" + trace.seed_id +
                                      "', expected '" + seed_id_ + "'");
    const std::string id = trace.conversation_id;
    if (!traces_.emplace(id, std::move(trace)).second)
        fail(ErrorKind::conflict, "duplicate trace for '" + id + "' (seed " + seed_id_ + ")");
}

const TensionTrace* TraceSet::find(const std::string& id) const {
    const auto it = traces_.find(id);
    return it == traces_.end() ? nullptr : &it->second;
}

const TensionTrace& TraceSet::get(const std::string& id) const {
    if (const auto* t = find(id)) return *t;
    fail(ErrorKind::not_found, "no trace for '" + id + "' (seed " + seed_id_ + ")");
}

std::map<std::string, TraceSet> group_traces(const std::vector<TensionTrace>& traces) {
    std::map<std::string, TraceSet> out;
    for (const auto& t : traces) out.try_emplace(t.seed_id, t.seed_id).first->second.add(t);
    return out;
}

TraceSet build_traces(std::span<const Conversation* const> conversations, Backends& backends, unsigned jobs) {
    std::vector<TensionTrace> traces(conversations.size());
    parallel_for(conversations.size(), jobs, [&](std::size_t i) { traces[i] = backends.build_trace(*conversations[i]); });
    TraceSet set(backends.seed_id());
    for (auto& t : traces) set.add(std::move(t));
    return set;
}

namespace {

void check_trace(const Conversation& c, const TensionTrace& trace) {
    if (trace.conversation_id != c.id)
        fail(ErrorKind::precondition, "trace for '" + trace.conversation_id + "' used for '" + c.id + "'");
    if (static_cast<int>(trace.probs.size()) < c.last_decision_point())
        fail(ErrorKind::precondition, "trace for '" + c.id + "' is shorter than its decision range");
}

// Max p_k over the decision range: the threshold policy triggers iff it exceeds T.
double peak_tension(const Conversation& c, const TensionTrace& trace) {
    check_trace(c, trace);
    const auto end = trace.probs.begin() + c.last_decision_point();
    return *std::max_element(trace.probs.begin(), end);
}

} // namespace

std::optional<int> threshold_trigger(const Conversation& c, const TensionTrace& trace, double threshold) {
    check_trace(c, trace);
    for (int k = 1; k <= c.last_decision_point(); ++k) {
        if (threshold_decision(trace.at(k), threshold)) return k;
    }
    return std::nullopt;
}

std::vector<Outcome> threshold_outcomes(std::span<const Conversation* const> conversations, const TraceSet& traces,
                                        double threshold) {
    std::vector<Outcome> out;
    out.reserve(conversations.size());
    for (const auto* c : conversations)
        out.push_back(classify_trigger(*c, threshold_trigger(*c, traces.get(c->id), threshold)));
    return out;
}

std::vector<double> threshold_grid(double step) {
    if (!(step > 0.0) || !std::isfinite(step)) fail(ErrorKind::config, "threshold grid step must be positive");
    const auto count = static_cast<std::size_t>(std::floor(1.0 / step + 1e-9));
    std::vector<double> grid;
    grid.reserve(count + 1);
    for (std::size_t i = 0; i <= count; ++i) grid.push_back(std::min(1.0, static_cast<double>(i) * step));
    return grid;
}

double tune_threshold(std::span<const Conversation* const> conversations, const TraceSet& traces, double step) {
    const auto grid = threshold_grid(step);
    if (conversations.empty()) fail(ErrorKind::precondition, "threshold tuning over no conversations");
    std::vector<std::pair<double, bool>> peaks;
    peaks.reserve(conversations.size());
    for (const auto* c : conversations) peaks.emplace_back(peak_tension(*c, traces.get(c->id)), c->derails);

    double best = grid.front();
    std::size_t best_correct = 0;
    bool first = true;
    for (double t : grid) {
        std::size_t correct = 0;
        for (const auto& [peak, derails] : peaks) correct += threshold_decision(peak, t) == derails ? 1 : 0;
        if (first || correct > best_correct) {
            best = t;
            best_correct = correct;
            first = false;
        }
    }
    return best;
}

std::vector<SweepRow> sweep_tau(std::span<const Conversation* const> conversations, std::span<const SeedSetup> seeds,
                                const PolicyConfig& base, std::span<const int> taus, unsigned jobs) {
    if (seeds.empty()) fail(ErrorKind::precondition, "tau sweep needs at least one seed");
    for (const auto& s : seeds) {
        if (!s.backends) fail(ErrorKind::precondition, "tau sweep: seed '" + s.seed_id + "' has no backend");
    }
    struct Cell {
        Counts counts;
        std::uint64_t horizon_sum = 0;
    };
    std::vector<Cell> cells(taus.size() * seeds.size());
    parallel_for(cells.size(), jobs, [&](std::size_t i) {
        const int tau = taus[i / seeds.size()];
        const SeedSetup& seed = seeds[i % seeds.size()];
        PolicyConfig policy = base;
        policy.kind = PolicyKind::selective_deferral;
        policy.tau = tau;
        policy.threshold = seed.threshold;
        std::vector<Outcome> outcomes;
        outcomes.reserve(conversations.size());
        for (const auto* c : conversations)
            outcomes.push_back(classify_outcome(*c, run_forecaster(*c, policy, *seed.backends)));
        const auto m = compute_metrics(outcomes);
        cells[i] = Cell{m.counts, m.horizon_sum};
    });

    std::vector<SweepRow> rows;
    rows.reserve(taus.size());
    for (std::size_t t = 0; t < taus.size(); ++t) {
        SweepRow row;
        row.tau = taus[t];
        Counts pooled;
        std::uint64_t horizon = 0;
        std::vector<MetricsReport> per_seed;
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const Cell& cell = cells[t * seeds.size() + s];
            pooled += cell.counts;
            horizon += cell.horizon_sum;
            per_seed.push_back(metrics_from_counts(cell.counts, cell.horizon_sum));
        }
        row.metrics = metrics_from_counts(pooled, horizon);
        row.per_seed = aggregate(per_seed);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<double> oracle_candidates(const OracleWindow& w) {
    if (w.steps < 1) fail(ErrorKind::config, "oracle window needs at least one step");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(w.steps) + 1);
    const double lo = w.center - w.half_width;
    const double width = 2.0 * w.half_width;
    for (int i = 0; i <= w.steps; ++i) {
        const double t = lo + width * static_cast<double>(i) / static_cast<double>(w.steps);
        out.push_back(std::clamp(t, 0.0, 1.0));
    }
    return out;
}

OracleWindow default_window(std::span<const SeedSetup> seeds) {
    if (seeds.empty()) fail(ErrorKind::precondition, "oracle window needs at least one seed");
    double sum = 0.0;
    for (const auto& s : seeds) sum += s.threshold;
    OracleWindow w;
    w.center = sum / static_cast<double>(seeds.size());
    return w;
}

MetricsReport pooled_threshold_metrics(std::span<const Conversation* const> conversations,
                                       std::span<const SeedSetup> seeds, double threshold) {
    std::vector<Outcome> pooled;
    pooled.reserve(conversations.size() * seeds.size());
    for (const auto& s : seeds) {
        if (!s.traces) fail(ErrorKind::not_found, "no traces for seed '" + s.seed_id + "'");
        for (auto& o : threshold_outcomes(conversations, *s.traces, threshold)) pooled.push_back(std::move(o));
    }
    return compute_metrics(pooled);
}

void fpr_matched_oracle(std::vector<SweepRow>& rows, std::span<const Conversation* const> conversations,
                        std::span<const SeedSetup> seeds, const OracleWindow& window) {
    if (seeds.empty()) fail(ErrorKind::precondition, "FPR-matched oracle needs at least one seed");
    const auto candidates = oracle_candidates(window);
    std::vector<MetricsReport> scanned;
    scanned.reserve(candidates.size());
    for (double t : candidates) scanned.push_back(pooled_threshold_metrics(conversations, seeds, t));

    for (auto& row : rows) {
        const auto& target = row.metrics.counts;
        const auto target_neg = static_cast<std::int64_t>(target.fp + target.tn);
        if (target_neg == 0) fail(ErrorKind::precondition, "FPR-matched oracle: target row has no calm conversations");
        std::optional<std::size_t> best;
        std::int64_t best_num = 0;
        std::int64_t best_den = 1;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            const auto& c = scanned[i].counts;
            const auto neg = static_cast<std::int64_t>(c.fp + c.tn);
            if (neg == 0) continue;
            // |fp/neg - fp_t/neg_t| = num / (neg * neg_t), compared by cross-multiplication.
            const std::int64_t num = std::llabs(static_cast<std::int64_t>(c.fp) * target_neg -
                                                static_cast<std::int64_t>(target.fp) * neg);
            const std::int64_t den = neg * target_neg;
            if (!best || static_cast<__int128>(num) * best_den < static_cast<__int128>(best_num) * den) {
                best = i;
                best_num = num;
                best_den = den;
            }
        }
        if (!best) fail(ErrorKind::precondition, "FPR-matched oracle: no candidate has a defined FPR");
        row.matched_threshold = candidates[*best];
        row.matched_metrics = scanned[*best];
    }
}

std::optional<double> tension_delta(const TensionTrace& trace, int k, const Conversation& c) {
    if (trace.conversation_id != c.id)
        fail(ErrorKind::precondition, "trace for '" + trace.conversation_id + "' used for '" + c.id + "'");
    if (k < 1 || k + 1 > c.n())
        fail(ErrorKind::precondition, "D_k needs 1 <= k < n (k=" + std::to_string(k) + ", n=" + std::to_string(c.n()) + ")");
    if (k + 1 == c.n()) return std::nullopt;
    return trace.at(k) - trace.at(k + 1);
}

std::vector<TensionEvent> defer_events(std::span<const RunResult> runs) {
    std::vector<TensionEvent> out;
    for (const auto& run : runs) {
        for (const auto& r : run.records) {
            if (r.decision == Decision::defer) out.push_back({run.conversation_id, r.k});
        }
    }
    return out;
}

std::vector<TensionEvent> trigger_events(std::span<const RunResult> runs) {
    std::vector<TensionEvent> out;
    for (const auto& run : runs) {
        if (run.trigger_index) out.push_back({run.conversation_id, *run.trigger_index});
    }
    return out;
}

std::vector<TensionEvent> trigger_events(std::span<const Outcome> outcomes) {
    std::vector<TensionEvent> out;
    for (const auto& o : outcomes) {
        if (o.trigger_index) out.push_back({o.conversation_id, *o.trigger_index});
    }
    return out;
}

DecreaseSummary decrease_summary(std::span<const TensionEvent> events, const TraceSet& traces, const Corpus& corpus) {
    DecreaseSummary s;
    s.events = events.size();
    for (const auto& e : events) {
        const auto d = tension_delta(traces.get(e.conversation_id), e.k, corpus.get(e.conversation_id));
        if (!d) {
            ++s.excluded;
            continue;
        }
        s.decreased += *d > 0.0 ? 1 : 0;
    }
    const std::size_t kept = s.events - s.excluded;
    if (kept == 0) fail(ErrorKind::precondition, "decrease fraction: no events left after exclusions");
    s.fraction = static_cast<double>(s.decreased) / static_cast<double>(kept);
    return s;
}

double decrease_fraction(std::span<const TensionEvent> events, const TraceSet& traces, const Corpus& corpus) {
    return decrease_summary(events, traces, corpus).fraction;
}

double trigger_tension_summary(std::span<const TensionEvent> events, const TraceSet& traces) {
    if (events.empty()) fail(ErrorKind::precondition, "trigger tension summary needs at least one trigger");
    double sum = 0.0;
    for (const auto& e : events) sum += traces.get(e.conversation_id).at(e.k);
    return sum / static_cast<double>(events.size());
}

} // namespace derail
