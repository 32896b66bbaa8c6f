#include "derail/synthetic.hpp"

#include "derail/util.hpp"

#include <array>
#include <cctype>
#include <cstdio>

namespace derail::synthetic {

namespace {

constexpr std::array<std::string_view, 16> kHostile = {
    "ridiculous", "nonsense", "liar",    "stupid", "pathetic", "clueless", "absurd",  "wrong",
    "ignorant",   "dishonest", "garbage", "lazy",   "troll",    "insulting", "hypocrite", "joke",
};

constexpr std::array<std::string_view, 24> kNeutral = {
    "perhaps", "argue",  "point",    "source",  "evidence", "agree",  "consider", "example",
    "fair",    "thanks", "question", "context", "maybe",    "reason", "view",     "understand",
    "data",    "policy", "history",  "sense",   "clarify",  "think",  "study",    "definition",
};

bool is_hostile(std::string_view word) {
    for (auto h : kHostile) {
        if (h == word) return true;
    }
    return false;
}

} // namespace

double hostile_share(std::string_view text) {
    std::size_t total = 0, hostile = 0;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        ++total;
        hostile += is_hostile(word) ? 1 : 0;
        word.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return total == 0 ? 0.0 : static_cast<double>(hostile) / static_cast<double>(total);
}

std::string reply_text(std::uint64_t h, double tone, int words) {
    std::string out;
    std::uint64_t state = h;
    for (int i = 0; i < words; ++i) {
        state = mix64(state);
        const bool hostile = unit_interval(state) < tone;
        state = mix64(state);
        const std::string_view word = hostile ? kHostile[state % kHostile.size()] : kNeutral[state % kNeutral.size()];
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

Corpus make_corpus(const CorpusOptions& options) {
    if (options.min_len < 2 || options.max_len < options.min_len)
        fail(ErrorKind::precondition, "synthetic corpus: need 2 <= min_len <= max_len");
    std::vector<Conversation> conversations;
    conversations.reserve(options.conversations);
    const std::string seed = std::to_string(options.seed);
    const auto derailing_count = static_cast<std::size_t>(
        static_cast<double>(options.conversations) * options.derail_fraction + 0.5);
    for (std::size_t i = 0; i < options.conversations; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "syn-%05zu", i);
        // Labels are interleaved evenly over ids.
        const bool derails = (i * derailing_count) / options.conversations !=
                             ((i + 1) * derailing_count) / options.conversations;
        const double split_draw = unit_interval(hash_parts({"split", seed, id}));
        const Split split = split_draw < options.train_fraction ? Split::train
                          : split_draw < options.train_fraction + options.validation_fraction ? Split::validation
                                                                                               : Split::test;
        const auto h = hash_parts({"corpus", seed, id});
        const int span = options.max_len - options.min_len + 1;
        const int n = options.min_len + static_cast<int>(h % static_cast<std::uint64_t>(span));
        std::vector<std::pair<std::string, std::string>> turns;
        for (int pos = 1; pos <= n; ++pos) {
            const auto uh = hash_parts({"utt", seed, id, std::to_string(pos)});
            const bool attack = derails && pos == n;
            const double tone = attack ? 0.9 : 0.15 + 0.3 * unit_interval(mix64(uh));
            std::string speaker = "speaker-" + std::to_string(1 + (pos + static_cast<int>(h % 2)) % 3);
            turns.emplace_back(std::move(speaker), reply_text(uh, tone, 6 + static_cast<int>(uh % 6)));
        }
        conversations.push_back(make_conversation(id, derails, split, std::move(turns)));
    }
    return Corpus("synthetic-" + seed, std::move(conversations));
}

} // namespace derail::synthetic
