#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lst/corpus.hpp"
#include "lst/model.hpp"

namespace lst::train {

struct TrainConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double adam_eps = 1e-8;
    std::int64_t warmup = 2000;  // scaled down alongside total_steps
    double min_lr_ratio = 0.01;
    double grad_clip = 1.0;
    std::int64_t total_steps = 2000;
    std::int64_t run_steps = 0;  // cap per invocation (0 = to completion); the
                                 // schedule still spans total_steps
    std::int64_t batch_size = 8;  // sequences per step
    // Source mix at batch granularity, interleaved:text (1:2 keeps speech
    // near a third of the raw tokens).
    std::int64_t mix_interleaved = 1;
    std::int64_t mix_text = 2;
    std::string stream = "mixed";  // mixed|interleaved|speech|text
    std::string budget = "compute";  // compute|data
    std::int64_t max_units = 0;      // stop once global units reach this (0 = off)
    std::int64_t max_raw_tokens = 0;  // data budget in raw content tokens (0 = off)
    std::int64_t checkpoint_every = 0;
    std::int64_t eval_every = 0;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json_text(const std::string& text);
};

// Linear warmup to lr (exact at step == warmup), cosine decay to
// lr * min_lr_ratio (exact at step >= total_steps).
double lr_at(std::int64_t step, const TrainConfig& cfg);

struct AdamState {
    std::map<std::string, ad::Tensor> m, v;
    std::int64_t t = 0;
};

// Global-norm clip first, then decoupled weight decay with bias correction.
// Throws DivergenceError on any non-finite gradient.
void adamw_step(std::map<std::string, ad::Tensor>& params,
                const std::map<std::string, ad::Tensor>& grads, AdamState& state,
                const TrainConfig& cfg, double lr);

struct BudgetLedger {
    std::int64_t steps = 0;
    std::int64_t global_units = 0;
    std::int64_t speech_units = 0;
    std::int64_t text_units = 0;
    std::int64_t raw_tokens = 0;
    std::int64_t speech_frames = 0;
    std::int64_t tokens_from_interleaved = 0;
    std::int64_t tokens_from_text = 0;
    std::int64_t truncations = 0;

    void add(const model::LossStats& st, bool from_interleaved);
    double interleaved_fraction() const;
    std::string to_json() const;
    static BudgetLedger from_json_text(const std::string& text);
};

// 1 - units_lst / units_baseline
double unit_savings(std::int64_t units_lst, std::int64_t units_baseline);

// Greedy deterministic source choice: interleaved while its realized
// raw-token share sits at or below mix_interleaved/(mix_interleaved+mix_text).
bool pick_interleaved(const BudgetLedger& led, std::int64_t mix_interleaved,
                      std::int64_t mix_text);

struct TrainResult {
    BudgetLedger ledger;
    std::int64_t steps_done = 0;
    double final_loss = 0.0;
    std::string stop_reason;  // total_steps|run_limit|unit_budget|token_budget|diverged
    std::string checkpoint_dir;   // last good checkpoint, empty if none written
};

using EvalHook = std::function<void(std::int64_t step, model::LanguageModel& m)>;

// Runs the loop; writes metrics.csv, ledger.json and checkpoints under
// out_dir (no file output when out_dir is empty). Deterministic given
// (cfg.seed, corpus): batches, interleaving and patching all derive from
// labeled substreams keyed by the absolute step.
TrainResult train(model::LanguageModel& m, const TrainConfig& cfg,
                  const std::vector<corpus::Utterance>& utts, const std::string& out_dir,
                  const EvalHook& hook = {}, const std::string& resume_from = "");

}  // namespace lst::train
