#include <doctest.h>

#include <algorithm>
#include <random>

#include "derail/eval.hpp"
#include "derail/synthetic.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace derail;
using testing::conv;

namespace {

Outcome make(OutcomeClass cls, std::optional<int> h = std::nullopt) {
    Outcome o;
    o.conversation_id = "x";
    o.cls = cls;
    if (cls == OutcomeClass::tp || cls == OutcomeClass::fp) o.trigger_index = 1;
    o.horizon = h;
    return o;
}

void check_against_oracle(const MetricsReport& m, const oracle::Rates& r) {
    CHECK(m.accuracy == doctest::Approx(oracle::to_double(r.accuracy)).epsilon(1e-12));
    CHECK(m.f1 == doctest::Approx(oracle::to_double(r.f1)).epsilon(1e-12));
    auto same = [](const std::optional<double>& got, const std::optional<oracle::Q>& want) {
        REQUIRE(got.has_value() == want.has_value());
        if (got) CHECK(*got == doctest::Approx(oracle::to_double(*want)).epsilon(1e-12));
    };
    same(m.fpr, r.fpr);
    same(m.precision, r.precision);
    same(m.recall, r.recall);
    same(m.mean_horizon, r.mean_horizon);
}

struct SweepFixture {
    Corpus corpus;
    std::vector<const Conversation*> test;
    std::vector<std::unique_ptr<Backends>> backends;
    std::vector<TraceSet> traces;
    std::vector<SeedSetup> seeds;

    explicit SweepFixture(std::size_t seeds_n, std::size_t convs = 80) {
        synthetic::CorpusOptions opts;
        opts.conversations = convs;
        opts.seed = 21;
        opts.train_fraction = 0.0;
        opts.validation_fraction = 0.5;
        corpus = synthetic::make_corpus(opts);
        test = corpus.in_split(Split::test);
        const auto val = corpus.in_split(Split::validation);
        for (std::size_t s = 0; s < seeds_n; ++s) {
            BackendConfig cfg;
            cfg.scorer = SyntheticConfig{s};
            cfg.simulator = SyntheticConfig{s};
            backends.push_back(std::make_unique<Backends>(cfg));
        }
        std::vector<const Conversation*> all;
        for (const auto& c : corpus.conversations()) all.push_back(&c);
        traces.reserve(seeds_n);
        for (std::size_t s = 0; s < seeds_n; ++s) traces.push_back(build_traces(all, *backends[s]));
        for (std::size_t s = 0; s < seeds_n; ++s)
            seeds.push_back({traces[s].seed_id(), backends[s].get(), tune_threshold(val, traces[s]), &traces[s]});
    }
};

} // namespace

TEST_SUITE("eval") {

TEST_CASE("classify outcomes") {
    const auto d = conv("d", true, 6);
    const auto tp = classify_trigger(d, 3);
    CHECK(tp.cls == OutcomeClass::tp);
    CHECK(tp.horizon == 3);
    CHECK(classify_trigger(d, 5).horizon == 1);
    CHECK(classify_trigger(d, std::nullopt).cls == OutcomeClass::fn);
    CHECK_THROWS_AS(classify_trigger(d, 6), Error); // the attack is not a decision point
    const auto c = conv("c", false, 6);
    CHECK(classify_trigger(c, 2).cls == OutcomeClass::fp);
    CHECK_FALSE(classify_trigger(c, 2).horizon);
    CHECK(classify_trigger(c, 6).cls == OutcomeClass::fp);
    CHECK(classify_trigger(c, std::nullopt).cls == OutcomeClass::tn);

    RunResult run;
    run.conversation_id = "other";
    CHECK_THROWS_AS(classify_outcome(c, run), Error);
    run.conversation_id = "c";
    run.triggered = true;
    CHECK_THROWS_AS(classify_outcome(c, run), Error);
    run.trigger_index = 4;
    CHECK(classify_outcome(c, run).cls == OutcomeClass::fp);
    CHECK(parse_outcome_class(to_string(OutcomeClass::fn)) == OutcomeClass::fn);
}

TEST_CASE("four-conversation fixture") {
    const std::vector<Outcome> o{make(OutcomeClass::tp, 3), make(OutcomeClass::fn), make(OutcomeClass::fp),
                                 make(OutcomeClass::tn)};
    const auto m = compute_metrics(o);
    // Each rate is 1 of 2; H averages the single TP horizon.
    CHECK(m.accuracy == 0.5);
    CHECK(m.fpr == 0.5);
    CHECK(m.precision == 0.5);
    CHECK(m.recall == 0.5);
    CHECK(m.f1 == 0.5);
    CHECK(m.mean_horizon == 3.0);
    CHECK(m.counts == Counts{1, 1, 1, 1});
}

TEST_CASE("absent ratios") {
    const std::vector<Outcome> tn(5, make(OutcomeClass::tn));
    const auto m = compute_metrics(tn);
    CHECK(m.accuracy == 1.0);
    CHECK(m.fpr == 0.0);
    CHECK_FALSE(m.precision);
    CHECK_FALSE(m.recall);
    CHECK_FALSE(m.mean_horizon);
    CHECK(m.f1 == 0.0);
    CHECK_THROWS_AS(compute_metrics(std::vector<Outcome>{}), Error);
    CHECK_THROWS_AS(metrics_from_counts(Counts{}, 0), Error);
}

TEST_CASE("metrics match a rational oracle on random multisets") {
    std::mt19937_64 gen(99);
    for (int trial = 0; trial < 200; ++trial) {
        std::uniform_int_distribution<int> count(0, 12);
        const int tp = count(gen), fp = count(gen), fn = count(gen), tn = count(gen);
        if (tp + fp + fn + tn == 0) continue;
        std::vector<Outcome> outcomes;
        std::int64_t hsum = 0;
        std::uniform_int_distribution<int> horizon(1, 9);
        for (int i = 0; i < tp; ++i) {
            const int h = horizon(gen);
            hsum += h;
            outcomes.push_back(make(OutcomeClass::tp, h));
        }
        for (int i = 0; i < fp; ++i) outcomes.push_back(make(OutcomeClass::fp));
        for (int i = 0; i < fn; ++i) outcomes.push_back(make(OutcomeClass::fn));
        for (int i = 0; i < tn; ++i) outcomes.push_back(make(OutcomeClass::tn));
        std::shuffle(outcomes.begin(), outcomes.end(), gen);
        const auto m = compute_metrics(outcomes);
        CHECK(m.counts.total() == outcomes.size());
        check_against_oracle(m, oracle::rates(tp, fp, fn, tn, hsum));
    }
}

TEST_CASE("aggregate uses the sample standard deviation") {
    const auto a = metrics_from_counts({1, 1, 1, 1}, 3); // acc 0.5
    const auto b = metrics_from_counts({2, 0, 0, 2}, 4); // acc 1.0
    const std::vector<MetricsReport> two{a, b};
    const auto agg = aggregate(two);
    CHECK(agg.seeds == 2);
    REQUIRE(agg.accuracy);
    CHECK(agg.accuracy->mean == doctest::Approx(0.75));
    // sqrt(((0.25)^2 + (0.25)^2) / (2 - 1))
    CHECK(*agg.accuracy->sd == doctest::Approx(std::sqrt(0.125)));
    const std::vector<MetricsReport> one{a};
    CHECK_FALSE(aggregate(one).accuracy->sd);
}

TEST_CASE("threshold tuning toy") {
    const std::vector<Conversation> convs{conv("calm", false, 3), conv("derail", true, 3)};
    TraceSet traces("0");
    traces.add(testing::trace("calm", {0.2, 0.401, 0.1}));
    traces.add(testing::trace("derail", {0.3, 0.601, 0.99}));
    const auto ptrs = testing::pointers(convs);
    const double tuned = tune_threshold(ptrs, traces);
    // Brute force over the integer grid i/400.
    int best_i = -1, best_correct = -1;
    for (int i = 0; i <= 400; ++i) {
        const double t = i / 400.0;
        int correct = 0;
        correct += (0.401 > t) ? 0 : 1;
        correct += (0.601 > t) ? 1 : 0;
        if (correct > best_correct) best_correct = correct, best_i = i;
    }
    CHECK(best_i == 161);
    CHECK(tuned == doctest::Approx(best_i / 400.0).epsilon(1e-12));
    CHECK(tuned == doctest::Approx(0.4025).epsilon(1e-12));

    CHECK(threshold_grid(1.0) == std::vector<double>{0.0, 1.0});
    CHECK(threshold_grid(0.0025).size() == 401);
    CHECK_THROWS_AS(threshold_grid(0.0), Error);
    CHECK(tune_threshold(ptrs, traces, 1.0) == 0.0);
}

TEST_CASE("tuning is invariant to ordering and maximizes accuracy") {
    SweepFixture fx(1, 60);
    auto convs = fx.corpus.in_split(Split::validation);
    const double base = tune_threshold(convs, fx.traces[0], 0.01);
    std::mt19937_64 gen(5);
    for (int i = 0; i < 3; ++i) {
        std::shuffle(convs.begin(), convs.end(), gen);
        CHECK(tune_threshold(convs, fx.traces[0], 0.01) == base);
    }
    auto accuracy = [&](double t) {
        return compute_metrics(threshold_outcomes(convs, fx.traces[0], t)).accuracy;
    };
    double best = 0.0;
    for (double t : threshold_grid(0.01)) best = std::max(best, accuracy(t));
    CHECK(accuracy(base) == best);
    for (double t : threshold_grid(0.01)) {
        if (t >= base) break;
        CHECK(accuracy(t) < best);
    }
}

TEST_CASE("trace sets") {
    TraceSet ts("0");
    ts.add(testing::trace("a", {0.1}));
    CHECK_THROWS_AS(ts.add(testing::trace("a", {0.2})), Error);
    CHECK_THROWS_AS(ts.add(testing::trace("b", {0.2}, "1")), Error);
    CHECK_THROWS_AS(ts.get("zzz"), Error);
    CHECK(ts.find("zzz") == nullptr);
    const auto groups = group_traces({testing::trace("a", {0.1}, "x"), testing::trace("a", {0.1}, "y")});
    CHECK(groups.size() == 2);
    const auto c = conv("a", false, 3);
    CHECK_THROWS_AS(threshold_trigger(c, ts.get("a"), 0.5), Error); // trace shorter than the conversation
}

TEST_CASE("tau sweep is monotone and degenerates at tau = M") {
    SweepFixture fx(2);
    PolicyConfig base;
    base.m = 10;
    const std::vector<int> taus{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    auto rows = sweep_tau(fx.test, fx.seeds, base, taus, 2);
    REQUIRE(rows.size() == taus.size());
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(*rows[i].metrics.fpr >= *rows[i - 1].metrics.fpr);
        CHECK(*rows[i].metrics.recall >= *rows[i - 1].metrics.recall);
    }
    // τ = M reproduces the threshold policy.
    Counts pooled;
    for (const auto& s : fx.seeds) pooled += compute_metrics(threshold_outcomes(fx.test, *s.traces, s.threshold)).counts;
    CHECK(rows.back().metrics.counts == pooled);
    CHECK(sweep_tau(fx.test, fx.seeds, base, taus, 1)[4].metrics == rows[4].metrics);
}

TEST_CASE("FPR-matched oracle picks the closest candidate") {
    SweepFixture fx(2);
    PolicyConfig base;
    const std::vector<int> taus{3, 7, 10};
    auto rows = sweep_tau(fx.test, fx.seeds, base, taus);
    const auto window = default_window(fx.seeds);
    CHECK(window.center == doctest::Approx((fx.seeds[0].threshold + fx.seeds[1].threshold) / 2));
    const auto candidates = oracle_candidates(window);
    CHECK(candidates.size() == 401);
    CHECK(std::is_sorted(candidates.begin(), candidates.end()));
    fpr_matched_oracle(rows, fx.test, fx.seeds, window);

    std::vector<const TraceSet*> traces{&fx.traces[0], &fx.traces[1]};
    for (const auto& row : rows) {
        REQUIRE(row.matched_threshold);
        const oracle::Q target(static_cast<std::int64_t>(row.metrics.counts.fp),
                               static_cast<std::int64_t>(row.metrics.counts.fp + row.metrics.counts.tn));
        std::optional<oracle::Q> best;
        double best_t = 0.0;
        for (double t : candidates) {
            const auto n = oracle::pooled_fp(fx.test, traces, t);
            const auto gap = boost::abs(oracle::Q(n.fp, n.neg) - target);
            if (!best || gap < *best) best = gap, best_t = t;
        }
        CHECK(*row.matched_threshold == best_t);
        const auto n = oracle::pooled_fp(fx.test, traces, *row.matched_threshold);
        CHECK(row.matched_metrics->counts.fp == static_cast<std::uint64_t>(n.fp));
    }
    // At τ = M the deferral row is the tuned threshold policy, so the match is exact.
    CHECK(rows.back().matched_metrics->fpr == rows.back().metrics.fpr);
}

TEST_CASE("oracle candidates clamp into the unit interval") {
    OracleWindow w;
    w.center = 0.05;
    const auto c = oracle_candidates(w);
    CHECK(c.front() == 0.0);
    CHECK(c.back() == doctest::Approx(0.2));
    w.steps = 0;
    CHECK_THROWS_AS(oracle_candidates(w), Error);
}

TEST_CASE("tension deltas") {
    const auto c = conv("c", false, 4);
    const auto t = testing::trace("c", {0.3, 0.7, 0.4, 0.5});
    CHECK(*tension_delta(t, 2, c) == doctest::Approx(0.3));
    CHECK(*tension_delta(t, 1, c) == doctest::Approx(-0.4));
    CHECK_FALSE(tension_delta(t, 3, c));
    CHECK_THROWS_AS(tension_delta(t, 4, c), Error);
    CHECK_THROWS_AS(tension_delta(t, 0, c), Error);

    const auto d = conv("d", true, 4);
    const auto td = testing::trace("d", {0.3, 0.7, 0.4, 0.9});
    CHECK_FALSE(tension_delta(td, 3, d)); // u_4 is the attack
    CHECK(tension_delta(td, 2, d));

    const auto three = conv("r", false, 3);
    for (auto [a, b] : {std::pair{0.2, 0.9}, std::pair{0.6, 0.1}}) {
        const auto fwd = tension_delta(testing::trace("r", {a, b, 0.0}), 1, three);
        const auto rev = tension_delta(testing::trace("r", {b, a, 0.0}), 1, three);
        CHECK(*fwd == doctest::Approx(-*rev));
    }
}

TEST_CASE("decrease fraction and trigger tension") {
    Corpus corpus("t", {conv("a", false, 5), conv("b", false, 5), conv("c", false, 5), conv("e", false, 5)});
    TraceSet traces("0");
    traces.add(testing::trace("a", {0.5, 0.4, 0.1, 0.1, 0.1})); // k=1: +0.1
    traces.add(testing::trace("b", {0.5, 0.7, 0.1, 0.1, 0.1})); // k=1: -0.2
    traces.add(testing::trace("c", {0.6, 0.3, 0.1, 0.1, 0.1})); // k=1: +0.3
    traces.add(testing::trace("e", {0.6, 0.8, 0.1, 0.1, 0.1}));
    const std::vector<TensionEvent> events{{"a", 1}, {"b", 1}, {"c", 1}, {"e", 4}};
    const auto s = decrease_summary(events, traces, corpus);
    CHECK(s.events == 4);
    CHECK(s.excluded == 1);
    CHECK(s.decreased == 2);
    CHECK(s.fraction == doctest::Approx(2.0 / 3.0));
    const std::vector<TensionEvent> excluded{{"e", 4}};
    CHECK_THROWS_AS(decrease_fraction(excluded, traces, corpus), Error);

    const std::vector<TensionEvent> triggers{{"c", 1}, {"e", 2}}; // 0.6 and 0.8
    CHECK(trigger_tension_summary(triggers, traces) == doctest::Approx(0.7));
    const std::vector<TensionEvent> single{{"c", 1}};
    CHECK(trigger_tension_summary(single, traces) == doctest::Approx(0.6));
    CHECK_THROWS_AS(trigger_tension_summary(std::vector<TensionEvent>{}, traces), Error);
}

TEST_CASE("event extraction") {
    RunResult r;
    r.conversation_id = "a";
    DecisionRecord w, d, t;
    w.k = 1;
    d.k = 2;
    d.decision = Decision::defer;
    t.k = 3;
    t.decision = Decision::trigger;
    r.records = {w, d, t};
    r.triggered = true;
    r.trigger_index = 3;
    const std::vector<RunResult> runs{r};
    CHECK(defer_events(runs) == std::vector<TensionEvent>{{"a", 2}});
    CHECK(trigger_events(runs) == std::vector<TensionEvent>{{"a", 3}});
}

} // TEST_SUITE
