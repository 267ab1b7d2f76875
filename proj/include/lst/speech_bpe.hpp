#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lst/error.hpp"

namespace lst::bpe {

// Byte-pair encoding over speech token ids. Merge i creates id base_vocab+i;
// encode applies merges greedily by rank, decode expands recursively, so
// decode(encode(x)) == x always.
struct SpeechBpe {
    std::int64_t base_vocab = 501;
    std::vector<std::pair<std::int64_t, std::int64_t>> merges;

    std::int64_t vocab_size() const {
        return base_vocab + static_cast<std::int64_t>(merges.size());
    }

    std::vector<std::int64_t> encode(const std::vector<std::int64_t>& seq) const;
    std::vector<std::int64_t> decode(const std::vector<std::int64_t>& seq) const;

    // raw token count / encoded token count over a corpus
    double compression_ratio(const std::vector<std::vector<std::int64_t>>& corpus) const;

    void save(const std::string& path) const;
    static SpeechBpe load(const std::string& path);
};

// Greedy frequency merges until vocab_size is reached or no pair repeats.
// Ties break toward the smallest (first, second) pair so training is
// deterministic. Throws ConfigError when vocab_size <= base_vocab.
SpeechBpe train_speech_bpe(const std::vector<std::vector<std::int64_t>>& corpus,
                           std::int64_t base_vocab, std::int64_t vocab_size);

}  // namespace lst::bpe
