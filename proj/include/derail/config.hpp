#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "derail/backends.hpp"
#include "derail/corpus.hpp"
#include "derail/policy.hpp"

namespace derail {

inline constexpr const char* kToolVersion = "0.3.0";

// Resolved settings for one CLI invocation. Keys in config files and the flag
// layer use the field names below.
struct RunConfig {
    std::string corpus;
    std::string adapter;
    std::string split = "test";
    std::string tune_split = "validation";

    std::string backend = "synthetic"; // synthetic | table | remote
    std::vector<std::string> scorer_url;
    std::string simulator_url;
    std::string trace_file;
    std::string sim_file; // "{seed}" is replaced by the seed id
    std::string cache_dir;
    int timeout_ms = 30000;
    int retries = 3;
    double synthetic_smoothing = 0.6;
    double synthetic_drift = 0.25;

    std::string policy = "threshold";
    std::optional<double> T; // absent: tune per seed on tune_split
    int M = 10;
    std::optional<int> tau; // absent: 7 for run/sweep policies, 5 for analyze
    std::optional<double> p_defer;
    std::optional<double> var_threshold;
    std::uint64_t sim_seed = 0;
    bool simulate_every_point = true;

    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::vector<int> taus = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    bool fpr_match = false;
    double grid_step = 0.0025;

    int ngram = 3;
    double alpha0 = 500.0;
    int min_token_length = 1;
    int top_k = 30;

    // Execution-only settings; they never change outputs and stay out of manifests.
    unsigned jobs = 1;
    std::string out;

    // Layers are JSON objects; later layers override earlier ones. Unknown
    // keys are config errors.
    static RunConfig from_layers(const nlohmann::json& file_layer, const nlohmann::json& flag_layer);
    static RunConfig from_json(const nlohmann::json& j);

    nlohmann::ordered_json to_json(bool include_execution = true) const;
    std::string digest() const; // over to_json(false)

    PolicyConfig policy_config(int default_tau) const;
};

// "5" -> 0..4; "1,7,9" -> explicit list.
std::vector<std::uint64_t> parse_seeds(const std::string& text);
// "1..9", "3", or "1,3,5".
std::vector<int> parse_taus(const std::string& text);

std::optional<Split> split_from_config(const std::string& name); // "all" -> nullopt

struct SeedBackend {
    std::uint64_t seed = 0;
    std::string seed_id;
    std::unique_ptr<Backends> backends;
};

// One scorer per seed. Remote backends take one scorer URL per seed; a single
// URL yields a single seed.
std::vector<SeedBackend> make_seed_backends(const RunConfig& cfg);

BackendConfig backend_config_for(const RunConfig& cfg, std::uint64_t seed, std::size_t index);

Corpus load_corpus_from_config(const RunConfig& cfg);

// Output directory that records every file written, so the manifest can list
// them all.
class OutputDir {
public:
    explicit OutputDir(std::filesystem::path dir);

    const std::filesystem::path& path() const { return dir_; }
    void write(const std::string& relative, std::string_view contents);
    const std::set<std::string>& files() const { return files_; }

    // Writes manifest.json listing every recorded file.
    void write_manifest(const std::string& command, const RunConfig& cfg, nlohmann::ordered_json extra);

private:
    std::filesystem::path dir_;
    std::set<std::string> files_;
};

} // namespace derail
