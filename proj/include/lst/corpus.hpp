#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lst/error.hpp"

namespace lst::corpus {

// Token id space for one modality. Text puts its specials at the top of the
// range so content word ids stay an identity map (word w tokenizes to w).
struct Vocabulary {
    enum class Kind { speech, text };
    Kind kind = Kind::text;
    std::int64_t size = 0;
    std::int64_t pad = -1;
    std::int64_t text_marker = -1;    // <t>
    std::int64_t speech_marker = -1;  // <s>

    static Vocabulary text_sized(std::int64_t size);  // top 3 ids: pad, <t>, <s>
    static Vocabulary text_default();    // 512: words [0,509), pad 509, <t> 510, <s> 511
    static Vocabulary speech_default();  // 501 content ids, no specials

    std::int64_t n_content() const;
    bool is_special(std::int64_t id) const;
    void validate() const;
};

// Inclusive frame range [b, e] owned by text token `unit`.
struct AlignmentSpan {
    std::int64_t unit = 0;
    std::int64_t b = 0;
    std::int64_t e = 0;
};

struct Utterance {
    std::vector<std::int64_t> text_tokens;
    std::vector<std::int64_t> speech_tokens;
    std::vector<AlignmentSpan> alignment;
};

struct SynthConfig {
    std::int64_t n_word_types = 120;
    double mean_word_frames = 5.8;
    double mean_sil_frames = 3.7;
    double sil_prob = 0.3;
    std::int64_t tokens_per_word = 4;  // word-conditioned emission subset size
    double noise_prob = 0.05;
    std::int64_t speech_vocab = 501;
    std::int64_t text_vocab = 512;
    // Fixes the word -> token-subset map and bigram preferences, independent
    // of which utterance seed is drawing. Same language across a corpus.
    std::uint64_t language_seed = 2026;

    void validate() const;
};

// Deterministic synthetic utterance: a bigram word chain where each word
// emits a token run from its own small subset of the speech codebook, with
// optional silence runs between words. Spans cover word runs only; silence
// is exactly the gaps.
Utterance synth_utterance(std::uint64_t seed, std::int64_t n_words, const SynthConfig& cfg);

// Corpus of utterances with word counts drawn uniformly in [min_words, max_words].
std::vector<Utterance> synth_corpus(std::uint64_t seed, std::int64_t n_utterances,
                                    std::int64_t min_words, std::int64_t max_words,
                                    const SynthConfig& cfg);

// Throws AlignmentError if spans are unsorted, overlapping, out of range, or
// not one-per-text-token.
void validate_utterance(const Utterance& u);

// The token subset word w emits from (sorted, deduplicated).
std::vector<std::int64_t> word_token_subset(std::int64_t word, const SynthConfig& cfg);

// Identity map over the closed word vocabulary; throws VocabError outside it.
std::vector<std::int64_t> tokenize_text(const std::vector<std::int64_t>& words,
                                        const Vocabulary& v);
std::vector<std::int64_t> detokenize_text(const std::vector<std::int64_t>& tokens,
                                          const Vocabulary& v);

// Newline-delimited JSON: {"text_tokens":[...],"speech_tokens":[...],"spans":[[u,b,e],...]}
void write_corpus_jsonl(const std::string& path, const std::vector<Utterance>& us);
std::vector<Utterance> read_corpus_jsonl(const std::string& path);

}  // namespace lst::corpus
