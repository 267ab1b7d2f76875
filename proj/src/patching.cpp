#include "lst/patching.hpp"

#include <string>

namespace lst::patching {

namespace {

void check_spans(std::int64_t T, const std::vector<corpus::AlignmentSpan>& spans) {
    std::int64_t prev_e = -1;
    for (const auto& s : spans) {
        if (s.b > s.e || s.b < 0 || s.e >= T)
            throw AlignmentError("span [" + std::to_string(s.b) + "," + std::to_string(s.e) +
                                 "] does not fit a run of length " + std::to_string(T));
        if (s.b <= prev_e) throw AlignmentError("spans overlap or are unsorted");
        prev_e = s.e;
    }
}

}  // namespace

void PatchSegmentation::validate() const {
    std::int64_t expect = 0;
    for (const auto& s : segments) {
        if (s.start != expect || s.end < s.start)
            throw ContractError("segments must tile [0," + std::to_string(total) +
                                ") without gaps; saw [" + std::to_string(s.start) + "," +
                                std::to_string(s.end) + "] where " + std::to_string(expect) +
                                " was due");
        expect = s.end + 1;
    }
    if (expect != total)
        throw ContractError("segments cover " + std::to_string(expect) + " of " +
                            std::to_string(total) + " positions");
}

void CurriculumSchedule::validate() const {
    if (tau1 < 0 || tau2 <= tau1)
        throw ConfigError("need 0 <= tau1 < tau2", "curriculum.tau");
}

PatchSegmentation static_patch(std::int64_t T, std::int64_t p) {
    if (p < 1) throw ConfigError("patch size must be >= 1", "patching.p");
    if (T < 0) throw ContractError("negative run length");
    PatchSegmentation seg;
    seg.total = T;
    for (std::int64_t b = 0; b < T; b += p)
        seg.segments.push_back({b, std::min(b + p - 1, T - 1), SegmentKind::static_});
    return seg;
}

PatchSegmentation aligned_patch(std::int64_t T,
                                const std::vector<corpus::AlignmentSpan>& spans,
                                SilenceMode mode) {
    check_spans(T, spans);
    PatchSegmentation seg;
    seg.total = T;
    std::int64_t cursor = 0;
    for (const auto& s : spans) {
        if (s.b > cursor) {
            if (mode == SilenceMode::separate)
                seg.segments.push_back({cursor, s.b - 1, SegmentKind::silence});
            // merged: the gap rides along with this word
        }
        const bool absorbed = mode == SilenceMode::merged && s.b > cursor;
        seg.segments.push_back({mode == SilenceMode::merged ? cursor : s.b, s.e,
                                absorbed ? SegmentKind::merged : SegmentKind::word});
        cursor = s.e + 1;
    }
    if (cursor < T)  // trailing silence stands alone in both modes
        seg.segments.push_back({cursor, T - 1, SegmentKind::silence});
    return seg;
}

PatchSegmentation bpe_aligned_patch(std::int64_t T,
                                    const std::vector<corpus::AlignmentSpan>& spans,
                                    const std::vector<std::int64_t>& subwords_per_span) {
    check_spans(T, spans);
    if (subwords_per_span.size() != spans.size())
        throw ContractError("need one subword count per span");
    PatchSegmentation seg;
    seg.total = T;
    std::int64_t cursor = 0;
    for (std::size_t k = 0; k < spans.size(); ++k) {
        const auto& s = spans[k];
        if (s.b > cursor) seg.segments.push_back({cursor, s.b - 1, SegmentKind::silence});
        const std::int64_t len = s.e - s.b + 1;
        const std::int64_t n = subwords_per_span[k];
        if (n < 1 || n > len)
            throw SplitError("cannot split " + std::to_string(len) + " frames into " +
                             std::to_string(n) + " subword pieces");
        const std::int64_t base = len / n, rem = len % n;
        std::int64_t b = s.b;
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t piece = base + (i < rem ? 1 : 0);
            seg.segments.push_back({b, b + piece - 1, SegmentKind::word});
            b += piece;
        }
        cursor = s.e + 1;
    }
    if (cursor < T) seg.segments.push_back({cursor, T - 1, SegmentKind::silence});
    return seg;
}

double curriculum_prob(std::int64_t u, const CurriculumSchedule& sched) {
    sched.validate();
    if (u < sched.tau1) return 1.0;
    if (u >= sched.tau2) return 0.0;
    return 1.0 - static_cast<double>(u - sched.tau1) /
                     static_cast<double>(sched.tau2 - sched.tau1);
}

Strategy select_patching(std::int64_t u, Rng& rng, PatchMode mode,
                         const CurriculumSchedule& sched, bool has_spans) {
    Strategy choice = Strategy::static_;
    switch (mode) {
        case PatchMode::static_:
            return Strategy::static_;
        case PatchMode::aligned:
            choice = Strategy::aligned;
            break;
        case PatchMode::bpe:
            choice = Strategy::bpe;
            break;
        case PatchMode::mixed:
            choice = rng.bernoulli(0.5) ? Strategy::aligned : Strategy::static_;
            break;
        case PatchMode::curriculum:
            choice = rng.bernoulli(curriculum_prob(u, sched)) ? Strategy::aligned
                                                              : Strategy::static_;
            break;
    }
    if (choice != Strategy::static_ && !has_spans)
        throw AlignmentError("aligned patching requested but the sequence carries no spans");
    return choice;
}

}  // namespace lst::patching
