#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <optional>

#include "lst/interleave.hpp"
#include "lst/model_config.hpp"
#include "lst/patching.hpp"
#include "lst/rng.hpp"
#include "lst/speech_bpe.hpp"
#include "lst/tensor.hpp"

namespace lst::model {

// Timeline -> global-unit map for one packed row. Text tokens, markers and
// separators are singleton units; each speech patch is one unit.
struct PlanUnit {
    std::int64_t start = 0;  // inclusive timeline range
    std::int64_t end = 0;
    bool is_patch = false;
    std::int64_t run_index = -1;  // packed-run index for patches
    std::int64_t seg_index = -1;

    bool operator==(const PlanUnit&) const = default;
};

struct PatchPlan {
    std::int64_t T = 0;
    std::vector<PlanUnit> units;
    std::vector<std::int64_t> unit_of;  // per timeline position

    static PatchPlan from_row(const interleave::PackedRow& row);
    void validate() const;  // every position assigned, indices non-decreasing
};

struct LossStats {
    double loss = 0.0;  // (text_sum + speech_sum) / (n_text + n_speech)
    double text_loss = 0.0;
    double speech_loss = 0.0;
    std::int64_t n_text = 0;
    std::int64_t n_speech = 0;
    std::int64_t global_units = 0;   // units the global model processed
    std::int64_t speech_units = 0;   // patches (LST), frames (base), bpe units (bpe)
    std::int64_t text_units = 0;     // text + marker + separator units
    std::int64_t speech_frames = 0;  // raw speech tokens covered
    std::int64_t raw_tokens = 0;     // raw content tokens consumed
    std::int64_t truncations = 0;
};

struct TrainContext {
    std::int64_t step = 0;
    Rng* rng = nullptr;  // per-sequence patching draws
};

class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    virtual std::map<std::string, ad::Tensor>& parameters() = 0;
    virtual const std::map<std::string, ad::Tensor>& parameters() const = 0;
    virtual std::int64_t context_len() const = 0;

    // Fresh tape per call; gradients accumulate into `grads` (created zeroed
    // on first use). Throws DivergenceError on a non-finite loss.
    virtual LossStats loss_and_grad(const std::vector<interleave::InterleavedSequence>& seqs,
                                    const TrainContext& ctx,
                                    std::map<std::string, ad::Tensor>& grads) = 0;
    virtual LossStats loss_only(const std::vector<interleave::InterleavedSequence>& seqs,
                                const TrainContext& ctx) = 0;

    // Sum of -log p over the candidate's content tokens given the prompt.
    // Throws ContractError when prompt+candidate exceed the context.
    virtual double candidate_nll(const interleave::InterleavedSequence& prompt,
                                 const interleave::InterleavedSequence& cand,
                                 std::int64_t* n_scored = nullptr,
                                 std::int64_t* units = nullptr) = 0;

    std::int64_t param_count() const;
};

using ParamVars = std::map<std::string, ad::Var>;

struct GenConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

struct GenerationResult {
    std::vector<std::int64_t> tokens;
    std::int64_t global_advances = 0;  // completed patches handed to the global model
};

class LstModel : public LanguageModel {
public:
    LstModel(ModelConfig cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    // Required before training with patch_mode "bpe": patch boundaries come
    // from the number of subword units each word span encodes to.
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

    GenerationResult generate_speech(const interleave::InterleavedSequence& prompt,
                                     std::int64_t steps, const GenConfig& gen = {});

    // Mean patch embedding (local-encoder output) for the given frame range
    // of an utterance under aligned patching; used by cluster statistics.
    ad::Tensor word_patch_embedding(const std::vector<std::int64_t>& frames);

    // --- building blocks, exposed for probing ---
    ParamVars bind(ad::Tape& t) const;
    // local encoder on explicit embeddings [T x d_local] -> [patches x d_global]
    ad::Var encode_run_embeds(ad::Tape& t, const ParamVars& pv, ad::Var embeds,
                              const patching::PatchSegmentation& seg) const;
    ad::Var encode_run(ad::Tape& t, const ParamVars& pv,
                       const std::vector<std::int64_t>& frames,
                       const patching::PatchSegmentation& seg) const;
    // global transformer over unit embeddings with explicit positions
    ad::Var global_hidden(ad::Tape& t, const ParamVars& pv, ad::Var units,
                          const std::vector<std::int64_t>& positions) const;
    // local decoder logits [T_run x V_s]; global_h rows correspond to `units`
    ad::Var decode_run_logits(ad::Tape& t, const ParamVars& pv,
                              const std::vector<std::int64_t>& frames, ad::Var global_h,
                              const std::vector<PlanUnit>& units,
                              std::int64_t run_begin) const;

    // Segmentation callback honoring cfg.patch_mode at training time.
    interleave::PatchAssigner train_assigner(const TrainContext& ctx) const;
    // Inference-time segmentation: static p unless spans are supplied and
    // use_spans is set.
    interleave::PatchAssigner infer_assigner(bool use_spans = false) const;

    struct RowOutput {
        ad::Var text_logits;  // [n_text_targets x V_t], rows follow target order
        std::vector<std::int64_t> text_targets;
        std::vector<std::int64_t> text_positions;
        std::vector<ad::Var> run_logits;  // per packed run, [len x V_s]
        ad::Var global_h;
        PatchPlan plan;
        std::int64_t patch_units = 0;
    };
    RowOutput forward_row(ad::Tape& t, const ParamVars& pv,
                          const interleave::PackedRow& row) const;

private:
    ModelConfig cfg_;
    std::map<std::string, ad::Tensor> params_;
    std::optional<bpe::SpeechBpe> bpe_;

    LossStats batch_loss(const std::vector<interleave::InterleavedSequence>& seqs,
                         const TrainContext& ctx,
                         std::map<std::string, ad::Tensor>* grads);
};

// Merge a candidate continuation onto a prompt for likelihood scoring.
// Adjacent same-modality runs at the seam fuse so no marker interrupts a
// continued stream.
struct ScoredConcat {
    interleave::InterleavedSequence seq;
    std::size_t cand_first_run = 0;
    std::int64_t cand_token_offset = 0;  // content offset within that run
};
ScoredConcat concat_for_scoring(const interleave::InterleavedSequence& prompt,
                                const interleave::InterleavedSequence& cand);

}  // namespace lst::model
