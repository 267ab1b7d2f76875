#pragma once

#include <optional>

#include "lst/model.hpp"

namespace lst::model {

// Decoder-only transformer over the merged text+speech vocabulary. kind
// "base" consumes raw speech tokens next to text tokens; kind "bpe" first
// re-encodes every speech run with a learned speech BPE.
class BaselineModel : public LanguageModel {
public:
    BaselineModel(BaselineConfig cfg, std::uint64_t init_seed);

    const BaselineConfig& config() const { return cfg_; }
    void set_speech_bpe(bpe::SpeechBpe b) { bpe_ = std::move(b); }
    const std::optional<bpe::SpeechBpe>& speech_bpe() const { return bpe_; }

    std::map<std::string, ad::Tensor>& parameters() override { return params_; }
    const std::map<std::string, ad::Tensor>& parameters() const override { return params_; }
    std::int64_t context_len() const override { return cfg_.context_len; }

    LossStats loss_and_grad(const std::vector<interleave::InterleavedSequence>& seqs,
                            const TrainContext& ctx,
                            std::map<std::string, ad::Tensor>& grads) override;
    LossStats loss_only(const std::vector<interleave::InterleavedSequence>& seqs,
                        const TrainContext& ctx) override;
    double candidate_nll(const interleave::InterleavedSequence& prompt,
                         const interleave::InterleavedSequence& cand,
                         std::int64_t* n_scored = nullptr, std::int64_t* units = nullptr) override;

    // speech ids live above the text range in the merged space
    std::int64_t merged_vocab() const;
    std::int64_t merged_id(std::int64_t token, bool is_speech) const;

    // kind "bpe": speech runs re-encoded (spans dropped); otherwise identity
    interleave::InterleavedSequence transform(const interleave::InterleavedSequence& s) const;

    // --- exposed for probing and the equivalence harness ---
    ParamVars bind(ad::Tape& t) const;
    ad::Var hidden_from_embeds(ad::Tape& t, const ParamVars& pv, ad::Var embeds,
                               const std::vector<std::int64_t>& positions) const;
    ad::Var hidden(ad::Tape& t, const ParamVars& pv,
                   const std::vector<std::int64_t>& merged_ids) const;

    struct RowOutput {
        ad::Var logits;  // [n_targets x merged_vocab]
        std::vector<std::int64_t> targets;    // merged ids
        std::vector<std::int64_t> positions;  // timeline position of each target
        std::vector<std::uint8_t> target_is_speech;
        ad::Var hidden_all;
    };
    RowOutput forward_row(ad::Tape& t, const ParamVars& pv,
                          const interleave::PackedRow& row) const;

private:
    BaselineConfig cfg_;
    std::map<std::string, ad::Tensor> params_;
    std::optional<bpe::SpeechBpe> bpe_;

    std::int64_t speech_dim() const;  // rows reserved for speech in the merged space
    LossStats batch_loss(const std::vector<interleave::InterleavedSequence>& seqs,
                         const TrainContext& ctx,
                         std::map<std::string, ad::Tensor>* grads);
};

}  // namespace lst::model
