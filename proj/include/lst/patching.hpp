#pragma once

#include <cstdint>
#include <vector>

#include "lst/corpus.hpp"
#include "lst/error.hpp"
#include "lst/rng.hpp"

namespace lst::patching {

enum class SegmentKind { word, silence, static_, merged };

// Contiguous inclusive index range [start, end] over a speech run.
struct Segment {
    std::int64_t start = 0;
    std::int64_t end = 0;
    SegmentKind kind = SegmentKind::static_;

    std::int64_t length() const { return end - start + 1; }
    bool operator==(const Segment& o) const = default;
};

// A bijective re-tiling of [0, T): disjoint, sorted, gap-free, non-empty.
struct PatchSegmentation {
    std::int64_t total = 0;
    std::vector<Segment> segments;

    std::int64_t count() const { return static_cast<std::int64_t>(segments.size()); }
    void validate() const;  // throws ContractError on any tiling violation
};

struct CurriculumSchedule {
    std::int64_t tau1 = 0;
    std::int64_t tau2 = 1;
    void validate() const;  // tau1 < tau2, both >= 0
};

enum class SilenceMode { separate, merged };
enum class PatchMode { static_, aligned, mixed, curriculum, bpe };
// Concrete per-sequence choice after any random draw.
enum class Strategy { static_, aligned, bpe };

PatchSegmentation static_patch(std::int64_t T, std::int64_t p);

PatchSegmentation aligned_patch(std::int64_t T,
                                const std::vector<corpus::AlignmentSpan>& spans,
                                SilenceMode mode);

// Splits each word span into subwords_per_span[k] contiguous pieces, lengths
// as equal as possible with the remainder on the left; silence separate.
PatchSegmentation bpe_aligned_patch(std::int64_t T,
                                    const std::vector<corpus::AlignmentSpan>& spans,
                                    const std::vector<std::int64_t>& subwords_per_span);

// 1 before tau1, 0 from tau2 on, linear in between.
double curriculum_prob(std::int64_t u, const CurriculumSchedule& sched);

// One draw per sequence. mixed: aligned with probability 0.5; curriculum:
// aligned with probability curriculum_prob(u). Throws AlignmentError when a
// drawn or requested aligned strategy has no spans to work with.
Strategy select_patching(std::int64_t u, Rng& rng, PatchMode mode,
                         const CurriculumSchedule& sched, bool has_spans);

}  // namespace lst::patching
