// derail: command-line front end for corpus ingestion, scoring, policy runs,
// sweeps, analyses, reports and the game server.

#include <cstdlib>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "derail/config.hpp"
#include "derail/eval.hpp"
#include "derail/game.hpp"
#include "derail/game_server.hpp"
#include "derail/policy.hpp"
#include "derail/report.hpp"
#include "derail/textstats.hpp"
#include "derail/util.hpp"

using namespace derail;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum class FlagType { text, integer, real };

// Flags that were actually given form the top config layer.
class FlagLayer {
public:
    void add(CLI::App* app, const std::string& flag, const std::string& key, FlagType type, const std::string& help) {
        auto& slot = raw_[key];
        options_.push_back({app->add_option(flag, slot, help), key, type});
    }
    void add_switch(CLI::App* app, const std::string& flag, const std::string& key, bool value, const std::string& help) {
        switches_.push_back({app->add_flag(flag, help), key, value});
    }

    json layer() const {
        json j = json::object();
        for (const auto& o : options_) {
            if (o.option->count() == 0) continue;
            const std::string& v = raw_.at(o.key);
            try {
                switch (o.type) {
                case FlagType::text: j[o.key] = v; break;
                case FlagType::integer: j[o.key] = std::stoll(v); break;
                case FlagType::real: j[o.key] = std::stod(v); break;
                }
            } catch (const std::exception&) {
                fail(ErrorKind::config, "invalid value '" + v + "' for " + o.option->get_name());
            }
        }
        for (const auto& s : switches_) {
            if (s.option->count() > 0) j[s.key] = s.value;
        }
        return j;
    }

private:
    struct Opt {
        CLI::Option* option;
        std::string key;
        FlagType type;
    };
    struct Switch {
        CLI::Option* option;
        std::string key;
        bool value;
    };
    std::map<std::string, std::string> raw_;
    std::vector<Opt> options_;
    std::vector<Switch> switches_;
};

struct Command {
    CLI::App* app = nullptr;
    FlagLayer flags;
    std::string config_file;
};

void add_common(Command& c) {
    c.app->add_option("--config", c.config_file, "JSON config file; flags override its values");
    c.flags.add(c.app, "--corpus", "corpus", FlagType::text, "corpus JSONL path or synthetic:<n>[:<seed>]");
    c.flags.add(c.app, "--adapter", "adapter", FlagType::text, "field-mapping adapter JSON");
    c.flags.add(c.app, "--split", "split", FlagType::text, "evaluation split: train, validation, test or all");
    c.flags.add(c.app, "--out", "out", FlagType::text, "output directory");
    c.flags.add(c.app, "--jobs", "jobs", FlagType::integer, "worker threads");
}

void add_backend(Command& c) {
    c.flags.add(c.app, "--backend", "backend", FlagType::text, "synthetic, table or remote");
    c.flags.add(c.app, "--scorer-url", "scorer_url", FlagType::text, "remote scorer endpoint(s), comma-separated per seed");
    c.flags.add(c.app, "--simulator-url", "simulator_url", FlagType::text, "remote simulator endpoint");
    c.flags.add(c.app, "--trace-file", "trace_file", FlagType::text, "trace JSONL for the table backend");
    c.flags.add(c.app, "--sim-file", "sim_file", FlagType::text, "simulation JSONL for the table backend; {seed} expands");
    c.flags.add(c.app, "--cache-dir", "cache_dir", FlagType::text, "persistent backend cache directory");
    c.flags.add(c.app, "--timeout-ms", "timeout_ms", FlagType::integer, "remote request timeout");
    c.flags.add(c.app, "--retries", "retries", FlagType::integer, "remote attempts per request");
    c.flags.add(c.app, "--seeds", "seeds", FlagType::text, "seed count or comma-separated seed list");
    c.flags.add(c.app, "--tune-split", "tune_split", FlagType::text, "split used to tune T when --T is absent");
    c.flags.add(c.app, "--grid-step", "grid_step", FlagType::real, "threshold tuning grid step");
}

void add_policy(Command& c, bool with_kind) {
    if (with_kind) c.flags.add(c.app, "--policy", "policy", FlagType::text, "policy kind");
    c.flags.add(c.app, "--T", "T", FlagType::real, "trigger threshold (default: tuned per seed)");
    c.flags.add(c.app, "--M", "M", FlagType::integer, "simulations per decision point");
    c.flags.add(c.app, "--p-defer", "p_defer", FlagType::real, "random_deferral probability");
    c.flags.add(c.app, "--var-threshold", "var_threshold", FlagType::real, "variance_deferral threshold");
    c.flags.add(c.app, "--sim-seed", "sim_seed", FlagType::integer, "simulation seed");
    c.flags.add_switch(c.app, "--tense-only", "simulate_every_point", false,
                       "simulation baselines simulate only where p > T");
}

RunConfig resolve(const Command& c) {
    json file = json::object();
    if (!c.config_file.empty()) {
        try {
            file = json::parse(read_file(c.config_file));
        } catch (const json::exception& e) {
            fail(ErrorKind::config, "config file " + c.config_file + ": " + e.what());
        }
    }
    return RunConfig::from_layers(file, c.flags.layer());
}

std::vector<const Conversation*> select(const Corpus& corpus, const std::string& split) {
    const auto s = split_from_config(split);
    std::vector<const Conversation*> out;
    if (s) return corpus.in_split(*s);
    for (const auto& c : corpus.conversations()) out.push_back(&c);
    return out;
}

// Conversations that need traces: the eval split, plus the tuning split when T
// is tuned rather than given. Order follows the corpus; no duplicates.
std::vector<const Conversation*> scoring_set(const Corpus& corpus, const RunConfig& cfg) {
    auto out = select(corpus, cfg.split);
    if (cfg.T) return out;
    std::set<const Conversation*> seen(out.begin(), out.end());
    for (const auto* c : select(corpus, cfg.tune_split))
        if (seen.insert(c).second) out.push_back(c);
    return out;
}

ordered_json corpus_json(const Corpus& corpus, const std::vector<const Conversation*>& eval, const RunConfig& cfg) {
    ordered_json j;
    j["name"] = corpus.name();
    j["digest"] = hex64(fnv1a64(serialize_corpus(corpus)));
    j["conversations"] = corpus.size();
    j["split"] = cfg.split;
    j["evaluated"] = eval.size();
    return j;
}

ordered_json backends_json(const std::vector<SeedBackend>& seeds) {
    ordered_json j = ordered_json::object();
    for (const auto& s : seeds)
        j[s.seed_id] = {{"scorer", s.backends->scorer_fingerprint()}, {"simulator", s.backends->simulator_fingerprint()}};
    return j;
}

std::string jsonl(const std::vector<RunResult>& runs, const PolicyConfig& policy) {
    std::string out;
    for (const auto& r : runs) out += to_json(r, policy).dump() + "\n";
    return out;
}

// Per-seed thresholds: the explicit T, or accuracy-tuned on the tuning split.
std::vector<double> seed_thresholds(const RunConfig& cfg, const Corpus& corpus, std::vector<SeedBackend>& seeds) {
    std::vector<double> out;
    if (cfg.T) return std::vector<double>(seeds.size(), *cfg.T);
    const auto tune = select(corpus, cfg.tune_split);
    if (tune.empty()) fail(ErrorKind::precondition, "tuning split '" + cfg.tune_split + "' is empty; pass --T");
    for (auto& s : seeds) {
        const TraceSet traces = build_traces(tune, *s.backends, cfg.jobs);
        out.push_back(tune_threshold(tune, traces, cfg.grid_step));
    }
    return out;
}

void add_counts(const MetricsReport& m, Counts& into, std::uint64_t& horizon) {
    into += m.counts;
    horizon += m.horizon_sum;
}

MetricsReport metrics_from_json(const json& j) {
    const auto& c = j.at("counts");
    Counts counts{c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(), c.at("fn").get<std::uint64_t>(),
                  c.at("tn").get<std::uint64_t>()};
    return metrics_from_counts(counts, j.at("horizon_sum").get<std::uint64_t>());
}

std::string seed_label(const std::string& id) { return "seed " + id; }

// ---------------------------------------------------------------- commands

int cmd_ingest(const Command& c) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    OutputDir out(cfg.out);
    out.write("corpus.jsonl", serialize_corpus(corpus));
    ordered_json summary;
    summary["name"] = corpus.name();
    summary["conversations"] = corpus.size();
    summary["balance"] = ordered_json::object();
    for (auto s : {Split::train, Split::validation, Split::test}) {
        const auto b = corpus.balance(s);
        summary["balance"][std::string(to_string(s))] = {{"conversations", corpus.in_split(s).size()},
                                                         {"derailing_fraction", b ? ordered_json(*b) : ordered_json(nullptr)}};
    }
    out.write("summary.json", summary.dump(2) + "\n");
    out.write_manifest("ingest", cfg, {{"corpus", corpus_json(corpus, select(corpus, "all"), cfg)}});
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_score(const Command& c) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    const auto eval = scoring_set(corpus, cfg);
    auto seeds = make_seed_backends(cfg);
    OutputDir out(cfg.out);
    std::string lines;
    for (auto& s : seeds) {
        const TraceSet traces = build_traces(eval, *s.backends, cfg.jobs);
        for (const auto* conv : eval) lines += serialize_trace(traces.get(conv->id)) + "\n";
    }
    out.write("traces.jsonl", lines);
    out.write_manifest("score", cfg, {{"corpus", corpus_json(corpus, eval, cfg)}, {"backends", backends_json(seeds)}});
    std::cout << "wrote " << eval.size() * seeds.size() << " traces\n";
    return 0;
}

int cmd_simulate(const Command& c) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    const auto eval = select(corpus, cfg.split);
    auto seeds = make_seed_backends(cfg);
    OutputDir out(cfg.out);
    std::size_t total = 0;
    for (auto& s : seeds) {
        std::vector<std::string> per_conv(eval.size());
        parallel_for(eval.size(), cfg.jobs, [&](std::size_t i) {
            const Conversation& conv = *eval[i];
            for (int k = 1; k <= conv.last_decision_point(); ++k)
                per_conv[i] += serialize_bundle(s.backends->simulate_at_decision_point(conv, k, cfg.M, cfg.sim_seed)) + "\n";
        });
        std::string lines;
        for (const auto& p : per_conv) lines += p;
        for (const auto* conv : eval) total += static_cast<std::size_t>(conv->last_decision_point());
        out.write("simulations." + s.seed_id + ".jsonl", lines);
    }
    out.write_manifest("simulate", cfg, {{"corpus", corpus_json(corpus, eval, cfg)}, {"backends", backends_json(seeds)}});
    std::cout << "wrote " << total << " simulation bundles\n";
    return 0;
}

int cmd_run(const Command& c) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    const auto eval = select(corpus, cfg.split);
    if (eval.empty()) fail(ErrorKind::precondition, "split '" + cfg.split + "' is empty");
    auto seeds = make_seed_backends(cfg);
    const auto thresholds = seed_thresholds(cfg, corpus, seeds);
    PolicyConfig policy = cfg.policy_config(7);
    OutputDir out(cfg.out);

    ordered_json metrics;
    metrics["split"] = cfg.split;
    metrics["seeds"] = ordered_json::array();
    std::vector<LabeledMetrics> rows;
    std::vector<MetricsReport> per_seed;
    std::vector<RunResult> all_runs;
    Counts pooled;
    std::uint64_t horizon = 0;

    const auto record = [&](const std::string& label, const std::string& file, const PolicyConfig& used,
                            const std::vector<RunResult>& runs) {
        std::vector<Outcome> outcomes;
        for (std::size_t i = 0; i < runs.size(); ++i) outcomes.push_back(classify_outcome(*eval[i], runs[i]));
        const MetricsReport m = compute_metrics(outcomes);
        add_counts(m, pooled, horizon);
        per_seed.push_back(m);
        rows.emplace_back(label, m);
        metrics["seeds"].push_back({{"seed_id", label}, {"threshold", used.threshold}, {"metrics", metrics_json(m)}});
        all_runs.insert(all_runs.end(), runs.begin(), runs.end());
        out.write(file, jsonl(runs, used));
    };

    if (policy.kind == PolicyKind::variance_deferral) {
        std::vector<Backends*> ensemble;
        for (auto& s : seeds) ensemble.push_back(s.backends.get());
        policy.threshold = std::accumulate(thresholds.begin(), thresholds.end(), 0.0) / static_cast<double>(thresholds.size());
        const auto runs = run_forecaster_all(eval, policy, *seeds.front().backends, ensemble, cfg.jobs);
        record("ensemble", "runs.ensemble.jsonl", policy, runs);
    } else {
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            PolicyConfig p = policy;
            p.threshold = thresholds[i];
            const auto runs = run_forecaster_all(eval, p, *seeds[i].backends, {}, cfg.jobs);
            record(seeds[i].seed_id, "runs." + seeds[i].seed_id + ".jsonl", p, runs);
        }
    }
    const MetricsReport pooled_metrics = metrics_from_counts(pooled, horizon);
    const AggregateReport agg = aggregate(per_seed);
    ordered_json pj = policy.to_json();
    pj.erase("T");
    metrics["policy"] = pj;
    metrics["pooled"] = metrics_json(pooled_metrics);
    metrics["aggregate"] = aggregate_json(agg);
    try {
        metrics["deferral_rate"] = estimate_deferral_rate(all_runs);
    } catch (const Error&) {
        metrics["deferral_rate"] = nullptr;
    }
    out.write("metrics.json", metrics.dump(2) + "\n");

    std::vector<LabeledMetrics> table;
    for (auto& [label, m] : rows) table.emplace_back(seed_label(label), m);
    table.emplace_back("pooled", pooled_metrics);
    const std::string report = metrics_table(table) + "\n" + aggregate_table({{std::string(to_string(policy.kind)), agg}});
    out.write("report.txt", report);
    out.write_manifest("run", cfg,
                       {{"corpus", corpus_json(corpus, eval, cfg)}, {"backends", backends_json(seeds)}, {"policy", pj}});
    std::cout << report;
    return 0;
}

std::vector<SeedSetup> setups_for(std::vector<SeedBackend>& seeds, const std::vector<double>& thresholds,
                                  const std::vector<TraceSet>& traces) {
    std::vector<SeedSetup> out;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        out.push_back({seeds[i].seed_id, seeds[i].backends.get(), thresholds[i], &traces[i]});
    return out;
}

int cmd_sweep(const Command& c) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    const auto eval = select(corpus, cfg.split);
    if (eval.empty()) fail(ErrorKind::precondition, "split '" + cfg.split + "' is empty");
    auto seeds = make_seed_backends(cfg);
    const auto thresholds = seed_thresholds(cfg, corpus, seeds);
    std::vector<TraceSet> traces;
    for (auto& s : seeds) traces.push_back(build_traces(eval, *s.backends, cfg.jobs));
    const auto setups = setups_for(seeds, thresholds, traces);

    PolicyConfig base = cfg.policy_config(7);
    base.kind = PolicyKind::selective_deferral;
    auto rows = sweep_tau(eval, setups, base, cfg.taus, cfg.jobs);
    ordered_json window = nullptr;
    if (cfg.fpr_match) {
        const OracleWindow w = default_window(setups);
        fpr_matched_oracle(rows, eval, setups, w);
        window = {{"center", w.center}, {"half_width", w.half_width}, {"steps", w.steps}};
    }
    Counts pooled;
    std::uint64_t horizon = 0;
    for (const auto& s : setups) add_counts(compute_metrics(threshold_outcomes(eval, *s.traces, s.threshold)), pooled, horizon);
    const MetricsReport baseline = metrics_from_counts(pooled, horizon);

    OutputDir out(cfg.out);
    ordered_json j;
    j["split"] = cfg.split;
    j["M"] = base.m;
    j["thresholds"] = ordered_json::object();
    for (const auto& s : setups) j["thresholds"][s.seed_id] = s.threshold;
    j["baseline"] = metrics_json(baseline);
    j["oracle_window"] = window;
    j["rows"] = sweep_json(rows);
    out.write("sweep.json", j.dump(2) + "\n");
    out.write("sweep.csv", sweep_csv(rows));
    const std::string table = "threshold baseline: " + slash_row(baseline) + "\n\n" + sweep_table(rows);
    out.write("sweep.txt", table);
    out.write_manifest("sweep", cfg, {{"corpus", corpus_json(corpus, eval, cfg)}, {"backends", backends_json(seeds)}});
    std::cout << table;
    return 0;
}

struct PooledDecrease {
    std::size_t events = 0, excluded = 0, decreased = 0;
    double tension_sum = 0.0;
    std::size_t tension_events = 0;

    void add(const std::vector<TensionEvent>& events_in, const TraceSet& traces, const Corpus& corpus) {
        for (const auto& e : events_in) {
            ++events;
            const auto d = tension_delta(traces.get(e.conversation_id), e.k, corpus.get(e.conversation_id));
            if (!d) {
                ++excluded;
            } else {
                decreased += *d > 0.0 ? 1 : 0;
            }
        }
        if (!events_in.empty()) {
            tension_sum += trigger_tension_summary(events_in, traces) * static_cast<double>(events_in.size());
            tension_events += events_in.size();
        }
    }

    ordered_json to_json() const {
        ordered_json j;
        j["events"] = events;
        j["excluded"] = excluded;
        j["decreased"] = decreased;
        const std::size_t kept = events - excluded;
        j["decrease_fraction"] = kept ? ordered_json(static_cast<double>(decreased) / static_cast<double>(kept))
                                      : ordered_json(nullptr);
        j["mean_tension"] = tension_events ? ordered_json(tension_sum / static_cast<double>(tension_events))
                                           : ordered_json(nullptr);
        return j;
    }
};

int cmd_analyze(const Command& c, const std::string& human_export) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    auto eval = select(corpus, cfg.split);
    if (eval.empty()) fail(ErrorKind::precondition, "split '" + cfg.split + "' is empty");
    auto seeds = make_seed_backends(cfg);
    const auto thresholds = seed_thresholds(cfg, corpus, seeds);
    PolicyConfig policy = cfg.policy_config(5);
    policy.kind = PolicyKind::selective_deferral;

    std::vector<Outcome> human;
    if (!human_export.empty()) {
        const json ex = json::parse(read_file(human_export));
        for (const auto& o : ex.at("outcomes")) {
            const Conversation& conv = corpus.get(o.at("conversation_id").get<std::string>());
            std::optional<int> k;
            if (!o.at("trigger_position").is_null()) k = o["trigger_position"].get<int>();
            human.push_back(classify_trigger(conv, k));
        }
    }
    // Traces must cover every conversation a human triggered on.
    std::vector<const Conversation*> traced = eval;
    {
        std::set<std::string> ids;
        for (const auto* conv : eval) ids.insert(conv->id);
        for (const auto& o : human) {
            if (ids.insert(o.conversation_id).second) traced.push_back(&corpus.get(o.conversation_id));
        }
    }

    PooledDecrease deferrals, sd_triggers, threshold_triggers, human_triggers;
    std::vector<RunResult> all_runs;
    ordered_json per_seed = ordered_json::array();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const TraceSet traces = build_traces(traced, *seeds[i].backends, cfg.jobs);
        PolicyConfig p = policy;
        p.threshold = thresholds[i];
        const auto runs = run_forecaster_all(eval, p, *seeds[i].backends, {}, cfg.jobs);
        deferrals.add(defer_events(runs), traces, corpus);
        sd_triggers.add(trigger_events(runs), traces, corpus);
        std::vector<TensionEvent> base;
        for (const auto* conv : eval) {
            if (const auto k = threshold_trigger(*conv, traces.get(conv->id), thresholds[i])) base.push_back({conv->id, *k});
        }
        threshold_triggers.add(base, traces, corpus);
        if (!human.empty()) human_triggers.add(trigger_events(human), traces, corpus);
        per_seed.push_back({{"seed_id", seeds[i].seed_id}, {"threshold", thresholds[i]}});
        all_runs.insert(all_runs.end(), runs.begin(), runs.end());
    }

    OutputDir out(cfg.out);
    ordered_json j;
    j["split"] = cfg.split;
    j["tau"] = policy.tau;
    j["M"] = policy.m;
    j["seeds"] = per_seed;
    j["tension"] = {{"after_deferral", deferrals.to_json()},
                    {"after_selective_trigger", sd_triggers.to_json()},
                    {"after_threshold_trigger", threshold_triggers.to_json()},
                    {"after_human_trigger", human.empty() ? ordered_json(nullptr) : human_triggers.to_json()}};

    FightinOptions fo;
    fo.order = cfg.ngram;
    fo.alpha0 = cfg.alpha0;
    fo.min_token_length = static_cast<std::size_t>(cfg.min_token_length);
    std::string text_report;
    try {
        const auto [a, b] = collect_reply_sets(all_runs, corpus);
        const auto scores = fightin_words(a, b, fo);
        const TopK top = top_k(scores, cfg.top_k);
        j["reply_sets"] = {{"post_deferral", {{"replies", a.replies.size()}, {"excluded", a.excluded}}},
                           {"post_trigger", {{"replies", b.replies.size()}, {"excluded", b.excluded}}}};
        out.write("ngrams.csv", ngram_csv(scores));
        text_report = top_k_table(top, "post_deferral", "post_trigger");
        out.write("ngrams.txt", text_report);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::precondition) throw;
        j["reply_sets"] = {{"error", e.what()}};
    }
    out.write("analysis.json", j.dump(2) + "\n");
    out.write_manifest("analyze", cfg, {{"corpus", corpus_json(corpus, eval, cfg)}, {"backends", backends_json(seeds)}});
    std::cout << j["tension"].dump(2) << "\n" << text_report;
    return 0;
}

int cmd_report(const std::string& in_dir, const std::string& export_file, const Command& c) {
    std::string text;
    const std::filesystem::path dir = in_dir;
    if (!in_dir.empty() && std::filesystem::exists(dir / "metrics.json")) {
        const json m = json::parse(read_file(dir / "metrics.json"));
        std::vector<LabeledMetrics> rows;
        std::vector<MetricsReport> per_seed;
        for (const auto& s : m.at("seeds")) {
            rows.emplace_back(seed_label(s.at("seed_id").get<std::string>()), metrics_from_json(s.at("metrics")));
            per_seed.push_back(rows.back().second);
        }
        const MetricsReport pooled = metrics_from_json(m.at("pooled"));
        text += "policy " + m.at("policy").at("kind").get<std::string>() + " on split " + m.at("split").get<std::string>() + "\n";
        text += "pooled  " + slash_row(pooled) + "\n\n";
        text += metrics_table(rows) + "\n";
        text += aggregate_table({{m.at("policy").at("kind").get<std::string>(), aggregate(per_seed)}}) + "\n";
    }
    if (!in_dir.empty() && std::filesystem::exists(dir / "sweep.json")) {
        const json s = json::parse(read_file(dir / "sweep.json"));
        text += "threshold baseline  " + slash_row(metrics_from_json(s.at("baseline"))) + "\n";
        for (const auto& r : s.at("rows")) {
            const MetricsReport m = metrics_from_json(r.at("metrics"));
            text += "tau=" + std::to_string(r.at("tau").get<int>()) + ": " + format_percent(m.accuracy) + "/" +
                    format_percent(m.fpr);
            if (!r.at("matched_metrics").is_null()) {
                const MetricsReport o = metrics_from_json(r["matched_metrics"]);
                text += " vs " + format_percent(o.accuracy) + "/" + format_percent(o.fpr) +
                        " (T=" + format_fixed(r.at("matched_threshold").get<double>(), 4) + ")";
            }
            text += "\n";
        }
        text += "\n";
    }
    if (!export_file.empty()) {
        const json ex = json::parse(read_file(export_file));
        std::vector<Outcome> outcomes;
        for (const auto& o : ex.at("outcomes")) {
            Outcome out;
            out.conversation_id = o.at("conversation_id").get<std::string>();
            out.cls = parse_outcome_class(o.at("outcome").get<std::string>());
            if (!o.at("trigger_position").is_null()) out.trigger_index = o["trigger_position"].get<int>();
            if (!o.at("horizon").is_null()) out.horizon = o["horizon"].get<int>();
            outcomes.push_back(std::move(out));
        }
        text += metrics_table({{"human", compute_metrics(outcomes)}});
    }
    if (text.empty()) fail(ErrorKind::not_found, "nothing to report: pass --in with run or sweep output, or --export");
    std::cout << text;
    if (!c.flags.layer().value("out", std::string()).empty()) {
        const RunConfig cfg = resolve(c);
        OutputDir out(cfg.out);
        out.write("report.txt", text);
        out.write_manifest("report", cfg, {{"inputs", {{"in", in_dir}, {"export", export_file}}}});
    }
    return 0;
}

struct PlanArgs {
    std::string participants;
    std::string roster;
    std::uint64_t seed = 0;
    int per = 10;
    int rounds = 2;
    std::size_t warmup = 4;
};

int cmd_plan(const Command& c, const PlanArgs& a) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    std::vector<std::string> roster;
    const std::string spec = trim(a.participants);
    const bool is_count = !spec.empty() && spec.find_first_not_of("0123456789") == std::string::npos;
    if (!a.roster.empty()) {
        for_each_line(a.roster, [&](std::size_t, const std::string& line) { roster.push_back(trim(line)); });
    } else if (is_count) {
        const int n = std::stoi(spec);
        for (int i = 1; i <= n; ++i) roster.push_back("p" + std::to_string(i));
    } else {
        std::stringstream ss(a.participants);
        std::string id;
        while (std::getline(ss, id, ',')) {
            if (!trim(id).empty()) roster.push_back(trim(id));
        }
    }
    game::PlanOptions opts;
    opts.per_participant = a.per;
    opts.main_rounds = a.rounds;
    opts.warmup_size = a.warmup;
    opts.split = split_from_config(cfg.split);
    const auto plan = game::build_plan(corpus, roster, a.seed, opts);
    OutputDir out(cfg.out);
    out.write("plan.json", plan.to_json().dump(2) + "\n");
    out.write_manifest("plan", cfg,
                       {{"corpus", corpus_json(corpus, select(corpus, cfg.split), cfg)},
                        {"plan", {{"seed", a.seed}, {"participants", roster.size()}, {"per_participant", a.per},
                                  {"rounds", a.rounds}, {"warmup", a.warmup}}}});
    std::cout << "plan: " << roster.size() << " participants, pool of " << plan.pool.size() << "\n";
    return 0;
}

int cmd_serve(const Command& c, const std::string& plan_file, const std::string& events, const std::string& host,
              int port) {
    const RunConfig cfg = resolve(c);
    const Corpus corpus = load_corpus_from_config(cfg);
    if (plan_file.empty()) fail(ErrorKind::config, "--plan is required");
    const auto plan = game::ExperimentPlan::from_json(json::parse(read_file(plan_file)));
    const char* token = std::getenv("DERAIL_ADMIN_TOKEN");
    game::GameService service(corpus, plan, events, game::system_clock(), token ? token : "");
    game::GameServer server(service);
    std::cout << ordered_json({{"listening", host + ":" + std::to_string(port)}}).dump() << std::endl;
    server.run(host, port);
    return 0;
}

int exit_code(ErrorKind kind) { return kind == ErrorKind::config ? 2 : 1; }

void print_error(ErrorKind kind, const std::string& message, const std::vector<Violation>& diagnostics = {}) {
    ordered_json j;
    j["error"]["kind"] = std::string(to_string(kind));
    j["error"]["message"] = message;
    if (!diagnostics.empty()) {
        j["error"]["diagnostics"] = ordered_json::array();
        for (const auto& d : diagnostics)
            j["error"]["diagnostics"].push_back({{"conversation_id", d.conversation_id}, {"reason", d.reason}, {"line", d.line}});
    }
    std::cerr << j.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conversational derailment forecasting harness"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Command ingest, score, simulate, run, sweep, analyze, report, plan, serve;
    ingest.app = app.add_subcommand("ingest", "validate a corpus and write its canonical form");
    add_common(ingest);
    score.app = app.add_subcommand("score", "write tension traces for every seed");
    add_common(score);
    add_backend(score);
    simulate.app = app.add_subcommand("simulate", "write simulation bundles at every decision point");
    add_common(simulate);
    add_backend(simulate);
    simulate.flags.add(simulate.app, "--M", "M", FlagType::integer, "simulations per decision point");
    simulate.flags.add(simulate.app, "--sim-seed", "sim_seed", FlagType::integer, "simulation seed");

    run.app = app.add_subcommand("run", "run one policy over a split");
    add_common(run);
    add_backend(run);
    add_policy(run, true);
    run.flags.add(run.app, "--tau", "tau", FlagType::integer, "deferral tolerance");

    sweep.app = app.add_subcommand("sweep", "selective deferral across tau, optionally with the FPR-matched oracle");
    add_common(sweep);
    add_backend(sweep);
    add_policy(sweep, false);
    sweep.flags.add(sweep.app, "--tau", "taus", FlagType::text, "tau values, e.g. 1..9 or 1,3,5");
    sweep.flags.add_switch(sweep.app, "--fpr-match", "fpr_match", true, "add FPR-matched threshold baselines");

    std::string human_export;
    analyze.app = app.add_subcommand("analyze", "tension deltas and distinguishing n-grams around deferrals");
    add_common(analyze);
    add_backend(analyze);
    add_policy(analyze, false);
    analyze.flags.add(analyze.app, "--tau", "tau", FlagType::integer, "deferral tolerance (default 5)");
    analyze.flags.add(analyze.app, "--ngram", "ngram", FlagType::integer, "n-gram order");
    analyze.flags.add(analyze.app, "--alpha0", "alpha0", FlagType::real, "prior mass");
    analyze.flags.add(analyze.app, "--min-token-length", "min_token_length", FlagType::integer, "drop shorter tokens");
    analyze.flags.add(analyze.app, "--top-k", "top_k", FlagType::integer, "n-grams per side");
    analyze.app->add_option("--human-export", human_export, "game export JSON with human triggers");

    std::string in_dir, export_file;
    report.app = app.add_subcommand("report", "render tables from run or sweep output");
    report.app->add_option("--config", report.config_file, "JSON config file");
    report.app->add_option("--in", in_dir, "output directory of run or sweep");
    report.app->add_option("--export", export_file, "game export JSON");
    report.flags.add(report.app, "--out", "out", FlagType::text, "write report.txt and a manifest here");

    PlanArgs plan_args;
    plan.app = app.add_subcommand("plan", "build a balanced game experiment plan");
    add_common(plan);
    plan.app->add_option("--participants", plan_args.participants, "participant count N (ids p1..pN) or comma-separated ids");
    plan.app->add_option("--roster", plan_args.roster, "file with one participant id per line");
    plan.app->add_option("--plan-seed", plan_args.seed, "plan seed");
    plan.app->add_option("--per", plan_args.per, "conversations per participant per round");
    plan.app->add_option("--rounds", plan_args.rounds, "main rounds");
    plan.app->add_option("--warmup", plan_args.warmup, "warmup conversations");

    std::string plan_file, events, host = "127.0.0.1";
    int port = 8080;
    serve.app = app.add_subcommand("serve", "serve the game API; admin token from DERAIL_ADMIN_TOKEN");
    serve.app->add_option("--config", serve.config_file, "JSON config file");
    serve.flags.add(serve.app, "--corpus", "corpus", FlagType::text, "corpus path");
    serve.flags.add(serve.app, "--adapter", "adapter", FlagType::text, "adapter JSON");
    serve.app->add_option("--plan", plan_file, "plan JSON from `plan`");
    serve.app->add_option("--events", events, "append-only event log");
    serve.app->add_option("--host", host, "bind address");
    serve.app->add_option("--port", port, "port");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error(ErrorKind::config, e.what());
        return 2;
    }

    try {
        if (ingest.app->parsed()) return cmd_ingest(ingest);
        if (score.app->parsed()) return cmd_score(score);
        if (simulate.app->parsed()) return cmd_simulate(simulate);
        if (run.app->parsed()) return cmd_run(run);
        if (sweep.app->parsed()) return cmd_sweep(sweep);
        if (analyze.app->parsed()) return cmd_analyze(analyze, human_export);
        if (report.app->parsed()) return cmd_report(in_dir, export_file, report);
        if (plan.app->parsed()) return cmd_plan(plan, plan_args);
        if (serve.app->parsed()) return cmd_serve(serve, plan_file, events, host, port);
    } catch (const CorpusLoadError& e) {
        print_error(e.kind(), e.what(), e.diagnostics());
        return exit_code(e.kind());
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return exit_code(e.kind());
    } catch (const json::exception& e) {
        print_error(ErrorKind::schema, e.what());
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        print_error(ErrorKind::io, e.what());
        return 1;
    }
    return 0;
}
