#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "derail/corpus.hpp"

namespace derail::synthetic {

// Share of tokens drawn from the hostile lexicon, in [0, 1]. The synthetic
// scorer uses it so simulated wording and scores stay coupled.
double hostile_share(std::string_view text);

// Deterministic reply text; `tone` in [0,1] sets the expected hostile share.
std::string reply_text(std::uint64_t h, double tone, int words = 8);

struct CorpusOptions {
    std::size_t conversations = 200;
    std::uint64_t seed = 0;
    int min_len = 3;
    int max_len = 10;
    double derail_fraction = 0.5;
    // Fractions assigned to train and validation; the rest is test.
    double train_fraction = 0.4;
    double validation_fraction = 0.2;
};

// Reproducible corpus for tests and demos. Derailing conversations end with a
// flagged attack utterance.
Corpus make_corpus(const CorpusOptions& options);

} // namespace derail::synthetic
