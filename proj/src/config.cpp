#include "derail/config.hpp"

#include <algorithm>
#include <sstream>

#include "derail/synthetic.hpp"
#include "derail/util.hpp"

namespace derail {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& into) {
    if (!j.contains(key)) return;
    try {
        into = j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::config, std::string("config key '") + key + "': " + e.what());
    }
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& into) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
        into.reset();
        return;
    }
    T value{};
    read(j, key, value);
    into = value;
}

template <typename T>
ordered_json optional_json(const std::optional<T>& v) {
    return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

long long parse_int(const std::string& text, const char* what) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::config, std::string("invalid ") + what + " '" + text + "'");
    }
}

} // namespace

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    const auto items = split_list(text);
    if (items.empty()) fail(ErrorKind::config, "empty seed list");
    std::vector<std::uint64_t> out;
    if (items.size() == 1 && text.find(',') == std::string::npos) {
        const long long count = parse_int(items[0], "seed count");
        if (count < 1) fail(ErrorKind::config, "seed count must be >= 1");
        for (long long i = 0; i < count; ++i) out.push_back(static_cast<std::uint64_t>(i));
        return out;
    }
    for (const auto& item : items) {
        const long long v = parse_int(item, "seed");
        if (v < 0) fail(ErrorKind::config, "seeds must be nonnegative");
        out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
}

std::vector<int> parse_taus(const std::string& text) {
    std::vector<int> out;
    for (const auto& item : split_list(text)) {
        const auto dots = item.find("..");
        if (dots == std::string::npos) {
            out.push_back(static_cast<int>(parse_int(item, "tau")));
            continue;
        }
        const auto lo = static_cast<int>(parse_int(item.substr(0, dots), "tau range start"));
        const auto hi = static_cast<int>(parse_int(item.substr(dots + 2), "tau range end"));
        if (hi < lo) fail(ErrorKind::config, "tau range '" + item + "' is empty");
        for (int t = lo; t <= hi; ++t) out.push_back(t);
    }
    if (out.empty()) fail(ErrorKind::config, "empty tau list");
    return out;
}

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::config, "config must be a JSON object");
    static const std::set<std::string> known = {
        "corpus",   "adapter",   "split",        "tune_split",    "backend",    "scorer_url",
        "simulator_url", "trace_file", "sim_file", "cache_dir",   "timeout_ms", "retries",
        "synthetic_smoothing", "synthetic_drift", "policy", "T", "M", "tau", "p_defer", "var_threshold",
        "sim_seed", "simulate_every_point", "seeds", "taus", "fpr_match", "grid_step", "ngram", "alpha0",
        "min_token_length", "top_k", "jobs", "out"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) fail(ErrorKind::config, "unknown config key '" + key + "'");
    }
    RunConfig c;
    read(j, "corpus", c.corpus);
    read(j, "adapter", c.adapter);
    read(j, "split", c.split);
    read(j, "tune_split", c.tune_split);
    read(j, "backend", c.backend);
    if (j.contains("scorer_url")) {
        if (j["scorer_url"].is_string()) {
            c.scorer_url = split_list(j["scorer_url"].get<std::string>());
        } else {
            read(j, "scorer_url", c.scorer_url);
        }
    }
    read(j, "simulator_url", c.simulator_url);
    read(j, "trace_file", c.trace_file);
    read(j, "sim_file", c.sim_file);
    read(j, "cache_dir", c.cache_dir);
    read(j, "timeout_ms", c.timeout_ms);
    read(j, "retries", c.retries);
    read(j, "synthetic_smoothing", c.synthetic_smoothing);
    read(j, "synthetic_drift", c.synthetic_drift);
    read(j, "policy", c.policy);
    read_optional(j, "T", c.T);
    read(j, "M", c.M);
    read_optional(j, "tau", c.tau);
    read_optional(j, "p_defer", c.p_defer);
    read_optional(j, "var_threshold", c.var_threshold);
    read(j, "sim_seed", c.sim_seed);
    read(j, "simulate_every_point", c.simulate_every_point);
    if (j.contains("seeds")) {
        const auto& s = j["seeds"];
        if (s.is_number_integer()) {
            c.seeds = parse_seeds(std::to_string(s.get<long long>()));
        } else if (s.is_string()) {
            c.seeds = parse_seeds(s.get<std::string>());
        } else {
            read(j, "seeds", c.seeds);
        }
    }
    if (j.contains("taus")) {
        if (j["taus"].is_string()) {
            c.taus = parse_taus(j["taus"].get<std::string>());
        } else {
            read(j, "taus", c.taus);
        }
    }
    read(j, "fpr_match", c.fpr_match);
    read(j, "grid_step", c.grid_step);
    read(j, "ngram", c.ngram);
    read(j, "alpha0", c.alpha0);
    read(j, "min_token_length", c.min_token_length);
    read(j, "top_k", c.top_k);
    read(j, "jobs", c.jobs);
    read(j, "out", c.out);

    if (c.backend != "synthetic" && c.backend != "table" && c.backend != "remote")
        fail(ErrorKind::config, "backend must be synthetic, table or remote");
    if (c.seeds.empty()) fail(ErrorKind::config, "at least one seed is required");
    if (c.jobs < 1) fail(ErrorKind::config, "jobs must be >= 1");
    if (c.M < 1) fail(ErrorKind::config, "M must be >= 1");
    if (c.min_token_length < 1) fail(ErrorKind::config, "min_token_length must be >= 1");
    parse_policy_kind(c.policy);
    return c;
}

RunConfig RunConfig::from_layers(const json& file_layer, const json& flag_layer) {
    json merged = json::object();
    for (const json* layer : {&file_layer, &flag_layer}) {
        if (layer->is_null()) continue;
        if (!layer->is_object()) fail(ErrorKind::config, "config layer must be a JSON object");
        for (const auto& [key, value] : layer->items()) merged[key] = value;
    }
    return from_json(merged);
}

ordered_json RunConfig::to_json(bool include_execution) const {
    ordered_json j;
    j["corpus"] = corpus;
    j["adapter"] = adapter;
    j["split"] = split;
    j["tune_split"] = tune_split;
    j["backend"] = backend;
    j["scorer_url"] = scorer_url;
    j["simulator_url"] = simulator_url;
    j["trace_file"] = trace_file;
    j["sim_file"] = sim_file;
    j["cache_dir"] = cache_dir;
    j["timeout_ms"] = timeout_ms;
    j["retries"] = retries;
    j["synthetic_smoothing"] = synthetic_smoothing;
    j["synthetic_drift"] = synthetic_drift;
    j["policy"] = policy;
    j["T"] = optional_json(T);
    j["M"] = M;
    j["tau"] = optional_json(tau);
    j["p_defer"] = optional_json(p_defer);
    j["var_threshold"] = optional_json(var_threshold);
    j["sim_seed"] = sim_seed;
    j["simulate_every_point"] = simulate_every_point;
    j["seeds"] = seeds;
    j["taus"] = taus;
    j["fpr_match"] = fpr_match;
    j["grid_step"] = grid_step;
    j["ngram"] = ngram;
    j["alpha0"] = alpha0;
    j["min_token_length"] = min_token_length;
    j["top_k"] = top_k;
    if (include_execution) {
        j["jobs"] = jobs;
        j["out"] = out;
    }
    return j;
}

std::string RunConfig::digest() const { return hex64(fnv1a64(to_json(false).dump())); }

PolicyConfig RunConfig::policy_config(int default_tau) const {
    PolicyConfig p;
    p.kind = parse_policy_kind(policy);
    if (T) p.threshold = *T;
    p.m = M;
    p.tau = tau.value_or(default_tau);
    p.p_defer = p_defer;
    p.var_threshold = var_threshold;
    p.seed = sim_seed;
    p.simulate_every_point = simulate_every_point;
    return p;
}

std::optional<Split> split_from_config(const std::string& name) {
    if (name == "all") return std::nullopt;
    if (const auto s = parse_split(name)) return s;
    fail(ErrorKind::config, "unknown split '" + name + "' (train, validation, test or all)");
}

BackendConfig backend_config_for(const RunConfig& cfg, std::uint64_t seed, std::size_t index) {
    BackendConfig b;
    b.cache_dir = cfg.cache_dir;
    const std::string seed_id = std::to_string(seed);
    RetryPolicy retry;
    retry.max_attempts = cfg.retries;
    if (cfg.backend == "synthetic") {
        b.scorer = SyntheticConfig{seed, cfg.synthetic_smoothing, cfg.synthetic_drift};
        b.simulator = SyntheticConfig{seed, cfg.synthetic_smoothing, cfg.synthetic_drift};
    } else if (cfg.backend == "table") {
        if (cfg.trace_file.empty()) fail(ErrorKind::config, "table backend needs --trace-file");
        b.scorer = TableConfig{cfg.trace_file, seed_id};
        if (cfg.sim_file.empty()) {
            b.simulator = SyntheticConfig{seed, cfg.synthetic_smoothing, cfg.synthetic_drift};
        } else {
            std::string path = cfg.sim_file;
            if (const auto at = path.find("{seed}"); at != std::string::npos) path.replace(at, 6, seed_id);
            b.simulator = TableConfig{path, {}};
        }
    } else {
        if (cfg.scorer_url.empty()) fail(ErrorKind::config, "remote backend needs --scorer-url");
        RemoteConfig scorer;
        scorer.endpoint = cfg.scorer_url.at(index);
        scorer.timeout = std::chrono::milliseconds(cfg.timeout_ms);
        scorer.retry = retry;
        scorer.seed_id = seed_id;
        RemoteConfig simulator = scorer;
        if (!cfg.simulator_url.empty()) simulator.endpoint = cfg.simulator_url;
        b.scorer = scorer;
        b.simulator = simulator;
    }
    return b;
}

std::vector<SeedBackend> make_seed_backends(const RunConfig& cfg) {
    std::vector<std::uint64_t> seeds = cfg.seeds;
    if (cfg.backend == "remote") {
        if (cfg.scorer_url.size() == 1) {
            seeds.resize(1);
        } else if (cfg.scorer_url.size() != seeds.size()) {
            fail(ErrorKind::config, "remote backend needs one scorer URL per seed, or a single URL");
        }
    }
    std::vector<SeedBackend> out;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        SeedBackend sb;
        sb.seed = seeds[i];
        sb.seed_id = std::to_string(seeds[i]);
        sb.backends = std::make_unique<Backends>(backend_config_for(cfg, seeds[i], i));
        out.push_back(std::move(sb));
    }
    return out;
}

Corpus load_corpus_from_config(const RunConfig& cfg) {
    if (cfg.corpus.empty()) fail(ErrorKind::config, "--corpus is required");
    // synthetic:<conversations>[:<seed>] generates a corpus instead of reading one.
    if (cfg.corpus.rfind("synthetic:", 0) == 0) {
        const auto parts = [&] {
            std::vector<std::string> p;
            std::stringstream ss(cfg.corpus.substr(10));
            std::string item;
            while (std::getline(ss, item, ':')) p.push_back(item);
            return p;
        }();
        synthetic::CorpusOptions opts;
        if (!parts.empty()) opts.conversations = static_cast<std::size_t>(parse_int(parts[0], "synthetic size"));
        if (parts.size() > 1) opts.seed = static_cast<std::uint64_t>(parse_int(parts[1], "synthetic seed"));
        return synthetic::make_corpus(opts);
    }
    AdapterConfig adapter;
    if (!cfg.adapter.empty()) adapter = AdapterConfig::load(cfg.adapter);
    return load_corpus(cfg.corpus, adapter);
}

OutputDir::OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) fail(ErrorKind::config, "--out is required");
    std::filesystem::create_directories(dir_);
}

void OutputDir::write(const std::string& relative, std::string_view contents) {
    write_file(dir_ / relative, contents);
    files_.insert(relative);
}

void OutputDir::write_manifest(const std::string& command, const RunConfig& cfg, ordered_json extra) {
    ordered_json m;
    m["tool"] = "derail";
    m["tool_version"] = kToolVersion;
    m["command"] = command;
    m["config_digest"] = cfg.digest();
    m["config"] = cfg.to_json(false);
    for (auto& [key, value] : extra.items()) m[key] = value;
    m["outputs"] = std::vector<std::string>(files_.begin(), files_.end());
    write_file(dir_ / "manifest.json", m.dump(2) + "\n");
}

} // namespace derail
