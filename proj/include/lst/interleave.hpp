#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "lst/corpus.hpp"
#include "lst/patching.hpp"
#include "lst/rng.hpp"

namespace lst::interleave {

enum class Modality { text, speech };

// One contiguous single-modality run. Markers are implied: every run is
// preceded by its modality marker when rendered to a token stream. Speech
// runs carry their alignment spans re-indexed to run-local frames.
struct Run {
    Modality modality = Modality::text;
    std::vector<std::int64_t> tokens;
    std::vector<corpus::AlignmentSpan> spans;
    std::int64_t word_begin = 0;  // origin word range [begin, end)
    std::int64_t word_end = 0;
};

struct FlatSequence {
    std::vector<std::int64_t> tokens;  // speech ids stay in speech space
    std::vector<std::uint8_t> is_speech;
    std::vector<std::int64_t> marker_positions;
};

struct InterleavedSequence {
    std::vector<Run> runs;

    std::int64_t n_text_content() const;
    std::int64_t n_speech_content() const;
    // total rendered length: one marker per run plus content
    std::int64_t rendered_length() const;
    FlatSequence render(const corpus::Vocabulary& text_vocab) const;
};

struct InterleaveConfig {
    // After the first text/speech pair keep alternating with fresh random
    // spans until the utterance is consumed; otherwise one switch only and
    // the remainder stays speech.
    bool alternate = true;
};

// Appendix-style construction: a random contiguous word span becomes text,
// the following floor(span/2) words (at least one) stay speech, repeat.
// Returns nothing when the utterance has fewer than two words; callers fall
// back to pure_speech.
std::optional<InterleavedSequence> interleave(const corpus::Utterance& u, Rng& rng,
                                              const InterleaveConfig& cfg = {});

InterleavedSequence pure_speech(const corpus::Utterance& u);
InterleavedSequence pure_text(const corpus::Utterance& u);

// Chooses a segmentation for a speech run given its frames and run-local
// spans; the frames themselves matter to content-dependent strategies.
using PatchAssigner = std::function<patching::PatchSegmentation(
    const std::vector<std::int64_t>& frames, const std::vector<corpus::AlignmentSpan>& spans)>;

struct PackedRun {
    std::int64_t begin = 0;  // timeline position of the first frame
    std::int64_t length = 0;
    patching::PatchSegmentation seg;  // over run-local [0, length)
};

struct PackedRow {
    std::vector<std::int64_t> tokens;    // length L; pad fills the tail
    std::vector<std::uint8_t> is_speech;
    std::vector<std::uint8_t> loss_mask;  // 1 on content tokens only
    std::vector<PackedRun> runs;
    std::int64_t used = 0;
};

struct PackedBatch {
    std::vector<PackedRow> rows;
    std::int64_t truncations = 0;
};

// Greedy packing into rows of length L with a single pad separator between
// sequences. Loss lands on content tokens, never on markers or padding.
// Sequences longer than L are truncated (counted in `truncations`).
PackedBatch pack_batch(const std::vector<InterleavedSequence>& seqs, std::int64_t L,
                       const corpus::Vocabulary& text_vocab, const PatchAssigner& assigner);

}  // namespace lst::interleave
