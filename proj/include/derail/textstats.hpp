#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "derail/corpus.hpp"
#include "derail/policy.hpp"

namespace derail {

// Lowercased ASCII letters and digits (plus any non-ASCII byte) form tokens;
// everything else separates, so "Don't" gives "don", "t". Tokens shorter
// than min_length are dropped.
std::vector<std::string> tokenize(std::string_view text, std::size_t min_length = 1);

enum class ReplyLabel { post_deferral, post_trigger };

std::string_view to_string(ReplyLabel label);

struct Reply {
    std::string conversation_id;
    int k = 0; // the decision point; the reply is u_{k+1}
    std::string text;
};

struct ReplySet {
    ReplyLabel label = ReplyLabel::post_deferral;
    std::vector<Reply> replies;
    std::size_t excluded = 0;
};

// Replies at k+1 after each defer and each trigger. A reply is dropped when it
// is the final utterance, which covers the attack.
std::pair<ReplySet, ReplySet> collect_reply_sets(std::span<const RunResult> runs, const Corpus& corpus);

struct NgramScore {
    std::string ngram; // tokens joined by single spaces
    double z = 0.0;
    std::uint64_t count_a = 0;
    std::uint64_t count_b = 0;
};

struct FightinOptions {
    int order = 3;
    double alpha0 = 500.0;
    std::size_t min_token_length = 1;
};

// Informative-Dirichlet log-odds z-scores; positive favours `a`. Sorted by z
// descending, ties by n-gram.
std::vector<NgramScore> fightin_words(const std::vector<std::string>& a, const std::vector<std::string>& b,
                                      const FightinOptions& options = {});
std::vector<NgramScore> fightin_words(const ReplySet& a, const ReplySet& b, const FightinOptions& options = {});

struct TopK {
    std::vector<NgramScore> favour_a; // most positive first
    std::vector<NgramScore> favour_b; // most negative first
};

TopK top_k(const std::vector<NgramScore>& ranked, int k);

std::string ngram_csv(const std::vector<NgramScore>& scores);
std::string top_k_table(const TopK& top, const std::string& label_a, const std::string& label_b);

} // namespace derail
