#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "derail/error.hpp"

namespace derail {

enum class Split { train, validation, test };

std::string_view to_string(Split split);
std::optional<Split> parse_split(std::string_view text);

struct Utterance {
    std::string id;
    std::string speaker;
    int position = 0; // 1-based
    std::string text;
    // Set on the final utterance of a derailing conversation. Display and
    // scoring layers must never expose flagged text.
    bool is_attack = false;

    bool operator==(const Utterance&) const = default;
};

struct Conversation {
    std::string id;
    std::vector<Utterance> utterances;
    bool derails = false;
    Split split = Split::train;

    int n() const { return static_cast<int>(utterances.size()); }
    const Utterance& at(int position) const { return utterances.at(static_cast<std::size_t>(position - 1)); }
    // Last k at which a forecaster may decide: the attack is never an input.
    int last_decision_point() const { return derails ? n() - 1 : n(); }

    bool operator==(const Conversation&) const = default;
};

// Builds a conversation with positions and the attack flag derived from order.
Conversation make_conversation(std::string id, bool derails, Split split,
                               std::vector<std::pair<std::string, std::string>> speaker_text);

struct Violation {
    std::string conversation_id;
    std::string reason;
    std::size_t line = 0; // 0 when not loaded from a file

    bool operator==(const Violation&) const = default;
};

class Corpus {
public:
    Corpus() = default;
    Corpus(std::string name, std::vector<Conversation> conversations);

    const std::string& name() const { return name_; }
    const std::vector<Conversation>& conversations() const { return conversations_; }
    std::size_t size() const { return conversations_.size(); }

    const Conversation* find(const std::string& id) const;
    const Conversation& get(const std::string& id) const;

    std::vector<const Conversation*> in_split(Split split) const;

    // Fraction of derailing conversations in a split; nullopt if the split is empty.
    std::optional<double> balance(Split split) const;
    std::optional<double> overall_balance() const;

    bool operator==(const Corpus& other) const { return conversations_ == other.conversations_; }

private:
    std::string name_;
    std::vector<Conversation> conversations_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Maps foreign field names onto canonical ones. Keys are foreign names,
// values canonical ("id", "derails", "split", "utterances", "speaker", "text").
struct AdapterConfig {
    std::map<std::string, std::string> field_map;

    static AdapterConfig from_json(const nlohmann::json& j);
    static AdapterConfig load(const std::filesystem::path& path);
};

class CorpusLoadError : public Error {
public:
    CorpusLoadError(const std::string& message, std::vector<Violation> diagnostics)
        : Error(ErrorKind::schema, message), diagnostics_(std::move(diagnostics)) {}

    const std::vector<Violation>& diagnostics() const { return diagnostics_; }

private:
    std::vector<Violation> diagnostics_;
};

// Parses and validates a canonical (or adapted) line-delimited corpus. Throws
// CorpusLoadError carrying every record-level diagnostic.
Corpus load_corpus(const std::filesystem::path& path, const AdapterConfig& adapter = {});
Corpus parse_corpus(std::string_view contents, std::string name, const AdapterConfig& adapter = {});

std::string serialize_conversation(const Conversation& conversation);
std::string serialize_corpus(const Corpus& corpus);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);

// Every invariant violation; empty iff valid.
std::vector<Violation> validate(const std::vector<Conversation>& conversations);
inline std::vector<Violation> validate(const Corpus& corpus) { return validate(corpus.conversations()); }

// k/2 derailing + k/2 calm, chosen by seed over sorted ids so the result does
// not depend on storage order.
std::vector<const Conversation*> sample_balanced(const Corpus& corpus, std::size_t k, std::uint64_t seed,
                                                 std::optional<Split> split = std::nullopt);

} // namespace derail
