#include "lst/interleave.hpp"

#include <algorithm>

namespace lst::interleave {

std::int64_t InterleavedSequence::n_text_content() const {
    std::int64_t n = 0;
    for (const auto& r : runs)
        if (r.modality == Modality::text) n += static_cast<std::int64_t>(r.tokens.size());
    return n;
}

std::int64_t InterleavedSequence::n_speech_content() const {
    std::int64_t n = 0;
    for (const auto& r : runs)
        if (r.modality == Modality::speech) n += static_cast<std::int64_t>(r.tokens.size());
    return n;
}

std::int64_t InterleavedSequence::rendered_length() const {
    return static_cast<std::int64_t>(runs.size()) + n_text_content() + n_speech_content();
}

FlatSequence InterleavedSequence::render(const corpus::Vocabulary& text_vocab) const {
    FlatSequence flat;
    for (const auto& r : runs) {
        flat.marker_positions.push_back(static_cast<std::int64_t>(flat.tokens.size()));
        flat.tokens.push_back(r.modality == Modality::text ? text_vocab.text_marker
                                                           : text_vocab.speech_marker);
        flat.is_speech.push_back(0);
        for (auto t : r.tokens) {
            flat.tokens.push_back(t);
            flat.is_speech.push_back(r.modality == Modality::speech ? 1 : 0);
        }
    }
    return flat;
}

namespace {

Run speech_run_for_words(const corpus::Utterance& u, std::int64_t wb, std::int64_t we) {
    Run r;
    r.modality = Modality::speech;
    r.word_begin = wb;
    r.word_end = we;
    const std::int64_t fb = u.alignment[wb].b;
    const std::int64_t fe = u.alignment[we - 1].e;
    r.tokens.assign(u.speech_tokens.begin() + fb, u.speech_tokens.begin() + fe + 1);
    for (std::int64_t k = wb; k < we; ++k)
        r.spans.push_back({k - wb, u.alignment[k].b - fb, u.alignment[k].e - fb});
    return r;
}

Run text_run_for_words(const corpus::Utterance& u, std::int64_t wb, std::int64_t we) {
    Run r;
    r.modality = Modality::text;
    r.word_begin = wb;
    r.word_end = we;
    r.tokens.assign(u.text_tokens.begin() + wb, u.text_tokens.begin() + we);
    return r;
}

}  // namespace

std::optional<InterleavedSequence> interleave(const corpus::Utterance& u, Rng& rng,
                                              const InterleaveConfig& cfg) {
    const auto n = static_cast<std::int64_t>(u.text_tokens.size());
    if (n < 2) return std::nullopt;
    corpus::validate_utterance(u);

    InterleavedSequence seq;
    std::int64_t cursor = 0;
    while (cursor < n) {
        const std::int64_t remaining = n - cursor;
        const std::int64_t text_len =
            1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(remaining)));
        seq.runs.push_back(text_run_for_words(u, cursor, cursor + text_len));
        cursor += text_len;
        if (cursor >= n) break;
        std::int64_t speech_len = std::max<std::int64_t>(1, text_len / 2);
        if (!cfg.alternate) speech_len = n - cursor;  // single switch keeps the rest speech
        speech_len = std::min(speech_len, n - cursor);
        seq.runs.push_back(speech_run_for_words(u, cursor, cursor + speech_len));
        cursor += speech_len;
        if (!cfg.alternate) break;
    }
    return seq;
}

InterleavedSequence pure_speech(const corpus::Utterance& u) {
    InterleavedSequence seq;
    Run r;
    r.modality = Modality::speech;
    r.word_begin = 0;
    r.word_end = static_cast<std::int64_t>(u.text_tokens.size());
    r.tokens = u.speech_tokens;
    r.spans = u.alignment;
    seq.runs.push_back(std::move(r));
    return seq;
}

InterleavedSequence pure_text(const corpus::Utterance& u) {
    InterleavedSequence seq;
    seq.runs.push_back(
        text_run_for_words(u, 0, static_cast<std::int64_t>(u.text_tokens.size())));
    return seq;
}

PackedBatch pack_batch(const std::vector<InterleavedSequence>& seqs, std::int64_t L,
                       const corpus::Vocabulary& text_vocab, const PatchAssigner& assigner) {
    if (L < 8) throw ContractError("context length must be at least 8");
    PackedBatch batch;

    auto new_row = [&]() -> PackedRow& {
        batch.rows.emplace_back();
        auto& row = batch.rows.back();
        row.tokens.assign(L, text_vocab.pad);
        row.is_speech.assign(L, 0);
        row.loss_mask.assign(L, 0);
        return row;
    };

    PackedRow* row = nullptr;
    for (const auto& seq : seqs) {
        const std::int64_t need = seq.rendered_length();
        if (row) {
            const std::int64_t with_sep = row->used + 1 + std::min(need, L);
            if (with_sep > L)
                row = nullptr;  // close this row
            else
                row->used += 1;  // pad separator, already pad-filled
        }
        if (!row) row = &new_row();

        bool truncated = false;
        for (const auto& run : seq.runs) {
            std::int64_t budget = L - row->used;
            if (budget < 2) {  // no room for marker + any content
                truncated = true;
                break;
            }
            // marker
            row->tokens[row->used] = run.modality == Modality::text
                                         ? text_vocab.text_marker
                                         : text_vocab.speech_marker;
            row->is_speech[row->used] = 0;
            ++row->used;
            --budget;
            const auto keep =
                std::min<std::int64_t>(budget, static_cast<std::int64_t>(run.tokens.size()));
            if (keep < static_cast<std::int64_t>(run.tokens.size())) truncated = true;
            const std::int64_t content_begin = row->used;
            for (std::int64_t i = 0; i < keep; ++i) {
                row->tokens[row->used] = run.tokens[i];
                row->is_speech[row->used] = run.modality == Modality::speech ? 1 : 0;
                row->loss_mask[row->used] = 1;
                ++row->used;
            }
            if (run.modality == Modality::speech && keep > 0) {
                PackedRun pr;
                pr.begin = content_begin;
                pr.length = keep;
                std::vector<corpus::AlignmentSpan> clipped;
                for (const auto& s : run.spans) {
                    if (s.b >= keep) break;
                    clipped.push_back({s.unit, s.b, std::min(s.e, keep - 1)});
                }
                pr.seg = assigner({run.tokens.begin(), run.tokens.begin() + keep}, clipped);
                pr.seg.validate();
                row->runs.push_back(std::move(pr));
            }
            if (truncated) break;
        }
        if (truncated) ++batch.truncations;
    }
    return batch;
}

}  // namespace lst::interleave
