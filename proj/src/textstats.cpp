#include "derail/textstats.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "derail/util.hpp"

namespace derail {

std::vector<std::string> tokenize(std::string_view text, std::size_t min_length) {
    std::vector<std::string> out;
    std::string token;
    const auto flush = [&] {
        if (!token.empty() && token.size() >= min_length) out.push_back(token);
        token.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c >= 0x80 || std::isalnum(c)) {
            token.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        } else {
            flush();
        }
    }
    flush();
    return out;
}

std::string_view to_string(ReplyLabel label) {
    return label == ReplyLabel::post_deferral ? "post_deferral" : "post_trigger";
}

std::pair<ReplySet, ReplySet> collect_reply_sets(std::span<const RunResult> runs, const Corpus& corpus) {
    ReplySet deferral{ReplyLabel::post_deferral, {}, 0};
    ReplySet trigger{ReplyLabel::post_trigger, {}, 0};
    for (const auto& run : runs) {
        const Conversation& c = corpus.get(run.conversation_id);
        for (const auto& r : run.records) {
            if (r.decision == Decision::wait) continue;
            ReplySet& set = r.decision == Decision::defer ? deferral : trigger;
            if (r.k + 1 >= c.n()) {
                ++set.excluded;
                continue;
            }
            set.replies.push_back({c.id, r.k, c.at(r.k + 1).text});
        }
    }
    if (deferral.replies.empty()) fail(ErrorKind::precondition, "no post-deferral replies after exclusions");
    if (trigger.replies.empty()) fail(ErrorKind::precondition, "no post-trigger replies after exclusions");
    return {std::move(deferral), std::move(trigger)};
}

namespace {

struct NgramCounts {
    std::map<std::string, std::uint64_t> counts;
    std::uint64_t total = 0;
};

NgramCounts count_ngrams(const std::vector<std::string>& texts, const FightinOptions& options) {
    NgramCounts out;
    const auto order = static_cast<std::size_t>(options.order);
    for (const auto& text : texts) {
        const auto tokens = tokenize(text, options.min_token_length);
        if (tokens.size() < order) continue;
        for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
            std::string gram = tokens[i];
            for (std::size_t j = 1; j < order; ++j) gram += ' ' + tokens[i + j];
            ++out.counts[gram];
            ++out.total;
        }
    }
    return out;
}

std::vector<std::string> texts_of(const ReplySet& set) {
    std::vector<std::string> out;
    out.reserve(set.replies.size());
    for (const auto& r : set.replies) out.push_back(r.text);
    return out;
}

} // namespace

std::vector<NgramScore> fightin_words(const std::vector<std::string>& a, const std::vector<std::string>& b,
                                      const FightinOptions& options) {
    if (options.order < 1) fail(ErrorKind::config, "n-gram order must be >= 1");
    if (!(options.alpha0 > 0.0)) fail(ErrorKind::config, "alpha0 must be positive");
    if (a.empty() || b.empty()) fail(ErrorKind::precondition, "fightin' words needs two nonempty reply sets");

    const NgramCounts ca = count_ngrams(a, options);
    const NgramCounts cb = count_ngrams(b, options);
    if (ca.total + cb.total == 0) return {};
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> vocab;
    for (const auto& [g, y] : ca.counts) vocab[g].first = y;
    for (const auto& [g, y] : cb.counts) vocab[g].second = y;

    const double a0 = options.alpha0;
    const double na = static_cast<double>(ca.total);
    const double nb = static_cast<double>(cb.total);
    const double pooled_total = static_cast<double>(ca.total + cb.total);
    std::vector<NgramScore> out;
    out.reserve(vocab.size());
    for (const auto& [gram, counts] : vocab) {
        const double ya = static_cast<double>(counts.first);
        const double yb = static_cast<double>(counts.second);
        const double alpha = a0 * static_cast<double>(counts.first + counts.second) / pooled_total;
        const double delta =
            std::log((ya + alpha) / (na + a0 - ya - alpha)) - std::log((yb + alpha) / (nb + a0 - yb - alpha));
        const double var = 1.0 / (ya + alpha) + 1.0 / (yb + alpha);
        out.push_back({gram, delta / std::sqrt(var), counts.first, counts.second});
    }
    std::sort(out.begin(), out.end(), [](const NgramScore& x, const NgramScore& y) {
        if (x.z != y.z) return x.z > y.z;
        return x.ngram < y.ngram;
    });
    return out;
}

std::vector<NgramScore> fightin_words(const ReplySet& a, const ReplySet& b, const FightinOptions& options) {
    return fightin_words(texts_of(a), texts_of(b), options);
}

TopK top_k(const std::vector<NgramScore>& ranked, int k) {
    if (k <= 0) fail(ErrorKind::config, "top-k needs k >= 1");
    TopK out;
    const auto limit = static_cast<std::size_t>(k);
    for (const auto& s : ranked) {
        if (out.favour_a.size() >= limit) break;
        if (s.z > 0.0) out.favour_a.push_back(s);
    }
    for (auto it = ranked.rbegin(); it != ranked.rend() && out.favour_b.size() < limit; ++it) {
        if (it->z < 0.0) out.favour_b.push_back(*it);
    }
    return out;
}

std::string ngram_csv(const std::vector<NgramScore>& scores) {
    std::ostringstream out;
    out << "ngram,z,count_a,count_b\n";
    for (const auto& s : scores) out << s.ngram << ',' << format_fixed(s.z, 6) << ',' << s.count_a << ',' << s.count_b << '\n';
    return out.str();
}

std::string top_k_table(const TopK& top, const std::string& label_a, const std::string& label_b) {
    const std::size_t rows = std::max(top.favour_a.size(), top.favour_b.size());
    std::size_t wa = label_a.size();
    for (const auto& s : top.favour_a) wa = std::max(wa, s.ngram.size());
    std::ostringstream out;
    const auto cell = [](const std::vector<NgramScore>& side, std::size_t i, std::string& gram, std::string& z) {
        if (i < side.size()) {
            gram = side[i].ngram;
            z = format_fixed(side[i].z, 2);
        } else {
            gram.clear();
            z.clear();
        }
    };
    const auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    out << pad(label_a, wa) << "  " << pad("z", 7) << "  " << label_b << "  z\n";
    for (std::size_t i = 0; i < rows; ++i) {
        std::string ga, za, gb, zb;
        cell(top.favour_a, i, ga, za);
        cell(top.favour_b, i, gb, zb);
        out << pad(ga, wa) << "  " << pad(za, 7) << "  " << gb << (gb.empty() ? "" : "  " + zb) << '\n';
    }
    return out.str();
}

} // namespace derail
