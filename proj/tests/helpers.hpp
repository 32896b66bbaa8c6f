#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "derail/backends.hpp"
#include "derail/corpus.hpp"
#include "derail/util.hpp"

namespace testing {

using namespace derail;

inline Conversation conv(const std::string& id, bool derails, int n, Split split = Split::test) {
    std::vector<std::pair<std::string, std::string>> turns;
    for (int pos = 1; pos <= n; ++pos)
        turns.emplace_back(pos % 2 ? "alice" : "bob", id + " utterance " + std::to_string(pos));
    return make_conversation(id, derails, split, std::move(turns));
}

inline TensionTrace trace(const std::string& id, std::vector<double> probs, const std::string& seed_id = "0") {
    return TensionTrace{id, seed_id, std::move(probs)};
}

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("derail-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Prefix scores from a table; continuation texts carry their own score as a
// decimal string so simulated probabilities can be scripted exactly.
class FixedScorer final : public ScoreSource {
public:
    explicit FixedScorer(std::map<std::string, std::vector<double>> probs, std::string seed_id = "0")
        : probs_(std::move(probs)), seed_id_(std::move(seed_id)) {}

    std::string fingerprint() const override { return "fixed-scorer:" + seed_id_; }
    std::string seed_id() const override { return seed_id_; }
    double score_prefix(const Conversation& c, int k) override {
        ++calls_;
        return probs_.at(c.id).at(static_cast<std::size_t>(k - 1));
    }
    double score_continuation(const Conversation&, int, const std::string& text) override {
        ++calls_;
        return std::stod(text);
    }
    std::uint64_t calls() const override { return calls_; }

private:
    std::map<std::string, std::vector<double>> probs_;
    std::string seed_id_;
    std::atomic<std::uint64_t> calls_{0};
};

// Simulated probabilities per (conversation, k); missing entries give all-calm sims.
class FixedSimulator final : public SimulationSource {
public:
    explicit FixedSimulator(std::map<std::pair<std::string, int>, std::vector<double>> sims = {})
        : sims_(std::move(sims)) {}

    std::string fingerprint() const override { return "fixed-simulator"; }
    std::vector<RawContinuation> simulate(const Conversation& c, int k, int m, std::uint64_t) override {
        ++calls_;
        std::vector<RawContinuation> out;
        const auto it = sims_.find({c.id, k});
        for (int i = 0; i < m; ++i) {
            const double p = it == sims_.end() ? 0.0 : it->second.at(static_cast<std::size_t>(i));
            out.push_back({format_fixed(p, 6), std::nullopt});
        }
        return out;
    }
    std::uint64_t calls() const override { return calls_; }

private:
    std::map<std::pair<std::string, int>, std::vector<double>> sims_;
    std::atomic<std::uint64_t> calls_{0};
};

inline Backends fixed_backends(std::map<std::string, std::vector<double>> probs,
                               std::map<std::pair<std::string, int>, std::vector<double>> sims = {},
                               std::string seed_id = "0") {
    return Backends(std::make_unique<FixedScorer>(std::move(probs), std::move(seed_id)),
                    std::make_unique<FixedSimulator>(std::move(sims)));
}

inline std::vector<const Conversation*> pointers(const std::vector<Conversation>& convs) {
    std::vector<const Conversation*> out;
    for (const auto& c : convs) out.push_back(&c);
    return out;
}

} // namespace testing
