#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dsp/corpus.hpp"

// Synthetic corpora whose best stimulus can be found by enumeration.
namespace dsp::synthetic {

/// The twelve keywords; the first six are "salient" and mark summary sentences.
const std::vector<std::string>& keywords();
bool is_salient(const std::string& keyword);

/// Articles of five sentences, each built around a distinct keyword. Two
/// sentences carry salient keywords and form the reference summary (in
/// document order). pseudo_stimulus mimics a noisy annotator: the two salient
/// keywords plus one plain keyword from the article, in document order.
corpus::Dataset summarization_corpus(std::size_t articles, std::uint64_t seed);

/// Every set of at most `max_len` distinct keywords rendered as a stimulus
/// ("" for the empty set). The mock summarizer ignores keyword order, so
/// sets cover all sequences.
std::vector<std::string> enumerate_stimuli(std::size_t max_len);

/// Dialogue turns with annotated acts and delexicalized responses.
corpus::Dataset dialogue_corpus(std::size_t dialogues, std::uint64_t seed);

/// Addition word problems with gold answers.
corpus::Dataset reasoning_corpus(std::size_t questions, std::uint64_t seed);

}  // namespace dsp::synthetic
