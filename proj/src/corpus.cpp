#include "derail/corpus.hpp"

#include "derail/util.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace derail {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    }
    return "train";
}

std::optional<Split> parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "validation") return Split::validation;
    if (text == "test") return Split::test;
    return std::nullopt;
}

Conversation make_conversation(std::string id, bool derails, Split split,
                               std::vector<std::pair<std::string, std::string>> speaker_text) {
    Conversation c;
    c.id = std::move(id);
    c.derails = derails;
    c.split = split;
    int pos = 0;
    for (auto& [speaker, text] : speaker_text) {
        ++pos;
        Utterance u;
        u.id = c.id + "." + std::to_string(pos);
        u.speaker = std::move(speaker);
        u.position = pos;
        u.text = std::move(text);
        c.utterances.push_back(std::move(u));
    }
    if (derails && !c.utterances.empty()) c.utterances.back().is_attack = true;
    return c;
}

Corpus::Corpus(std::string name, std::vector<Conversation> conversations)
    : name_(std::move(name)), conversations_(std::move(conversations)) {
    for (std::size_t i = 0; i < conversations_.size(); ++i) index_.emplace(conversations_[i].id, i);
}

const Conversation* Corpus::find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &conversations_[it->second];
}

const Conversation& Corpus::get(const std::string& id) const {
    const auto* c = find(id);
    if (c == nullptr) fail(ErrorKind::not_found, "unknown conversation id '" + id + "'");
    return *c;
}

std::vector<const Conversation*> Corpus::in_split(Split split) const {
    std::vector<const Conversation*> out;
    for (const auto& c : conversations_) {
        if (c.split == split) out.push_back(&c);
    }
    return out;
}

std::optional<double> Corpus::balance(Split split) const {
    std::size_t total = 0, derailing = 0;
    for (const auto& c : conversations_) {
        if (c.split != split) continue;
        ++total;
        derailing += c.derails ? 1 : 0;
    }
    if (total == 0) return std::nullopt;
    return static_cast<double>(derailing) / static_cast<double>(total);
}

std::optional<double> Corpus::overall_balance() const {
    if (conversations_.empty()) return std::nullopt;
    const auto derailing = std::count_if(conversations_.begin(), conversations_.end(),
                                         [](const Conversation& c) { return c.derails; });
    return static_cast<double>(derailing) / static_cast<double>(conversations_.size());
}

AdapterConfig AdapterConfig::from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::config, "adapter config must be a JSON object");
    AdapterConfig cfg;
    for (const auto& [foreign, canonical] : j.items()) {
        if (!canonical.is_string()) fail(ErrorKind::config, "adapter mapping for '" + foreign + "' must be a string");
        cfg.field_map[foreign] = canonical.get<std::string>();
    }
    return cfg;
}

AdapterConfig AdapterConfig::load(const std::filesystem::path& path) {
    try {
        return from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        fail(ErrorKind::config, "adapter config " + path.string() + ": " + e.what());
    }
}

namespace {

std::vector<std::pair<std::size_t, Violation>> validate_indexed(const std::vector<Conversation>& conversations);

void apply_adapter(json& obj, const AdapterConfig& adapter) {
    if (adapter.field_map.empty() || !obj.is_object()) return;
    for (const auto& [foreign, canonical] : adapter.field_map) {
        if (foreign == canonical || !obj.contains(foreign) || obj.contains(canonical)) continue;
        obj[canonical] = std::move(obj[foreign]);
        obj.erase(foreign);
    }
}

struct RecordParser {
    std::size_t line;
    std::vector<Violation>& out;
    std::string conv_id;

    void add(std::string reason) { out.push_back({conv_id, std::move(reason), line}); }
};

std::optional<Conversation> parse_record(json record, std::size_t line, const AdapterConfig& adapter,
                                         std::vector<Violation>& diagnostics) {
    RecordParser p{line, diagnostics, {}};
    if (!record.is_object()) {
        p.add("record is not a JSON object");
        return std::nullopt;
    }
    apply_adapter(record, adapter);

    Conversation c;
    bool ok = true;
    if (!record.contains("id") || !record["id"].is_string()) {
        p.add("missing field 'id'");
        return std::nullopt;
    }
    c.id = record["id"].get<std::string>();
    p.conv_id = c.id;

    if (!record.contains("derails")) {
        p.add("missing field 'derails'");
        ok = false;
    } else if (record["derails"].is_boolean()) {
        c.derails = record["derails"].get<bool>();
    } else if (record["derails"].is_number_integer() &&
               (record["derails"].get<int>() == 0 || record["derails"].get<int>() == 1)) {
        c.derails = record["derails"].get<int>() == 1;
    } else {
        p.add("field 'derails' must be a boolean");
        ok = false;
    }

    if (!record.contains("split")) {
        p.add("exactly one split required (missing 'split')");
        ok = false;
    } else {
        json split = record["split"];
        if (split.is_array()) {
            if (split.size() != 1) {
                p.add("exactly one split required (got " + std::to_string(split.size()) + ")");
                ok = false;
            } else {
                split = split[0];
            }
        }
        if (ok && split.is_string()) {
            auto parsed = parse_split(split.get<std::string>());
            if (!parsed) {
                p.add("unknown split '" + split.get<std::string>() + "'");
                ok = false;
            } else {
                c.split = *parsed;
            }
        } else if (ok) {
            p.add("field 'split' must be a string");
            ok = false;
        }
    }

    if (!record.contains("utterances") || !record["utterances"].is_array()) {
        p.add("missing field 'utterances'");
        return std::nullopt;
    }
    int pos = 0;
    for (auto u : record["utterances"]) {
        ++pos;
        apply_adapter(u, adapter);
        if (!u.is_object()) {
            p.add("utterance " + std::to_string(pos) + " is not an object");
            ok = false;
            continue;
        }
        Utterance utt;
        utt.position = pos;
        for (const char* field : {"id", "speaker", "text"}) {
            if (!u.contains(field) || !u[field].is_string()) {
                p.add(std::string("utterance ") + std::to_string(pos) + ": missing field '" + field + "'");
                ok = false;
            }
        }
        if (!ok) continue;
        utt.id = u["id"].get<std::string>();
        utt.speaker = u["speaker"].get<std::string>();
        utt.text = u["text"].get<std::string>();
        if (u.contains("position")) {
            if (!u["position"].is_number_integer()) {
                p.add("utterance " + std::to_string(pos) + ": 'position' must be an integer");
                ok = false;
                continue;
            }
            utt.position = u["position"].get<int>();
        }
        c.utterances.push_back(std::move(utt));
    }
    if (!ok) return std::nullopt;
    if (c.derails && !c.utterances.empty()) c.utterances.back().is_attack = true;
    return c;
}

} // namespace

Corpus parse_corpus(std::string_view contents, std::string name, const AdapterConfig& adapter) {
    std::vector<Violation> diagnostics;
    std::vector<Conversation> conversations;
    std::vector<std::size_t> lines;
    std::istringstream in{std::string(contents)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            diagnostics.push_back({"", std::string("invalid JSON: ") + e.what(), lineno});
            continue;
        }
        if (auto c = parse_record(std::move(record), lineno, adapter, diagnostics)) {
            conversations.push_back(std::move(*c));
            lines.push_back(lineno);
        }
    }
    for (auto& [index, v] : validate_indexed(conversations)) {
        v.line = lines[index];
        diagnostics.push_back(std::move(v));
    }
    if (!diagnostics.empty()) {
        std::stable_sort(diagnostics.begin(), diagnostics.end(),
                         [](const Violation& a, const Violation& b) { return a.line < b.line; });
        std::ostringstream msg;
        msg << diagnostics.size() << " invalid record(s) in " << name;
        for (const auto& d : diagnostics) {
            msg << "\n  line " << d.line;
            if (!d.conversation_id.empty()) msg << " [" << d.conversation_id << "]";
            msg << ": " << d.reason;
        }
        throw CorpusLoadError(msg.str(), std::move(diagnostics));
    }
    return Corpus(std::move(name), std::move(conversations));
}

Corpus load_corpus(const std::filesystem::path& path, const AdapterConfig& adapter) {
    return parse_corpus(read_file(path), path.stem().string(), adapter);
}

std::string serialize_conversation(const Conversation& c) {
    ordered_json j;
    j["id"] = c.id;
    j["derails"] = c.derails;
    j["split"] = std::string(to_string(c.split));
    j["utterances"] = ordered_json::array();
    for (const auto& u : c.utterances) {
        ordered_json uj;
        uj["id"] = u.id;
        uj["speaker"] = u.speaker;
        uj["text"] = u.text;
        j["utterances"].push_back(std::move(uj));
    }
    return j.dump();
}

std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (const auto& c : corpus.conversations()) {
        out += serialize_conversation(c);
        out += '\n';
    }
    return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    write_file(path, serialize_corpus(corpus));
}

namespace {

std::vector<std::pair<std::size_t, Violation>> validate_indexed(const std::vector<Conversation>& conversations) {
    std::vector<std::pair<std::size_t, Violation>> out;
    std::unordered_map<std::string, Split> seen;
    for (std::size_t index = 0; index < conversations.size(); ++index) {
        const auto& c = conversations[index];
        auto add = [&](std::string reason) { out.push_back({index, Violation{c.id, std::move(reason), 0}}); };
        if (c.id.empty()) add("empty conversation id");
        if (auto [it, inserted] = seen.emplace(c.id, c.split); !inserted) {
            if (it->second != c.split)
                add("exactly one split: conversation assigned to both '" + std::string(to_string(it->second)) +
                    "' and '" + std::string(to_string(c.split)) + "'");
            else
                add("duplicate conversation id");
        }
        if (c.n() < 2) add("n ≥ 2 violated (n=" + std::to_string(c.n()) + ")");
        for (int i = 0; i < c.n(); ++i) {
            const auto& u = c.utterances[static_cast<std::size_t>(i)];
            if (u.position != i + 1) {
                add("non-contiguous positions: expected " + std::to_string(i + 1) + ", found " +
                    std::to_string(u.position));
                break;
            }
        }
        for (const auto& u : c.utterances) {
            if (trim(u.text).empty()) add("empty text at position " + std::to_string(u.position));
        }
        for (int i = 0; i < c.n(); ++i) {
            const auto& u = c.utterances[static_cast<std::size_t>(i)];
            const bool should_flag = c.derails && i == c.n() - 1;
            if (u.is_attack != should_flag) {
                add(should_flag ? "final utterance of derailing conversation not flagged as attack"
                                : "attack flag on position " + std::to_string(u.position));
            }
        }
    }
    return out;
}

} // namespace

std::vector<Violation> validate(const std::vector<Conversation>& conversations) {
    std::vector<Violation> out;
    for (auto& [index, v] : validate_indexed(conversations)) out.push_back(std::move(v));
    return out;
}

std::vector<const Conversation*> sample_balanced(const Corpus& corpus, std::size_t k, std::uint64_t seed,
                                                 std::optional<Split> split) {
    if (k % 2 != 0) fail(ErrorKind::precondition, "sample_balanced: k must be even");
    std::vector<const Conversation*> derailing, calm;
    for (const auto& c : corpus.conversations()) {
        if (split && c.split != *split) continue;
        (c.derails ? derailing : calm).push_back(&c);
    }
    const std::size_t half = k / 2;
    if (derailing.size() < half || calm.size() < half) {
        fail(ErrorKind::infeasible, "sample_balanced: need " + std::to_string(half) + " of each class, have " +
                                        std::to_string(derailing.size()) + " derailing and " +
                                        std::to_string(calm.size()) + " calm");
    }
    const auto by_id = [](const Conversation* a, const Conversation* b) { return a->id < b->id; };
    std::sort(derailing.begin(), derailing.end(), by_id);
    std::sort(calm.begin(), calm.end(), by_id);
    Rng rng(seed);
    rng.shuffle(derailing);
    rng.shuffle(calm);
    std::vector<const Conversation*> out(derailing.begin(), derailing.begin() + static_cast<std::ptrdiff_t>(half));
    out.insert(out.end(), calm.begin(), calm.begin() + static_cast<std::ptrdiff_t>(half));
    rng.shuffle(out);
    return out;
}

} // namespace derail
