#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lst/corpus.hpp"
#include "lst/model.hpp"

namespace lst::eval {

struct EvalCandidate {
    std::vector<std::int64_t> tokens;
    std::vector<corpus::AlignmentSpan> spans;  // speech only, used for aligned scoring
};

struct EvalRecord {
    EvalCandidate prompt;
    std::vector<EvalCandidate> candidates;  // 2 or 4, all the record's modality
    std::int64_t gold = 0;
    std::string modality = "speech";  // speech|text

    void validate() const;
};

// Newline-delimited JSON, one record per line.
std::string records_to_jsonl(const std::vector<EvalRecord>& records);
std::vector<EvalRecord> records_from_jsonl(const std::string& text);
void write_records(const std::string& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_records(const std::string& path);

struct CandidateScore {
    double sum_nll = 0.0;
    double per_token = 0.0;
    std::int64_t n = 0;
    std::int64_t units = 0;  // global units consumed by the scoring pass
};

// -log p of candidate `idx` given the record's prompt; prompt tokens are
// never part of the score. Throws ContractError when the concatenation
// overflows the context and EmptyLossError on an empty candidate.
CandidateScore score_candidate(model::LanguageModel& m, const EvalRecord& rec, std::int64_t idx);

enum class Normalization { sum, per_token };
Normalization parse_normalization(const std::string& name);

struct EvalReport {
    double accuracy = 0.0;
    double mean_nll_diff = 0.0;  // gold NLL minus distractor mean; negative is better
    std::int64_t n_scored = 0;
    std::int64_t n_skipped = 0;  // context overflow
    std::int64_t units = 0;
};

// Argmin-NLL prediction per record under the chosen normalization.
// Overflowing records are skipped; all skipped -> EmptyLossError.
EvalReport evaluate(model::LanguageModel& m, const std::vector<EvalRecord>& records,
                    Normalization norm = Normalization::sum);

struct ClusterStats {
    double within = 0.0;      // mean pairwise cosine similarity, same word
    double between = 0.0;     // mean pairwise cosine similarity, across words
    double silhouette = 0.0;  // cosine distance
    std::int64_t n_words = 0;
    std::int64_t n_embeddings = 0;
    std::int64_t excluded_words = 0;  // fewer than two occurrences
};

// Geometry core: cosine within/between similarity and silhouette over
// labeled embeddings. Labels must index at least two clusters of size >= 2.
ClusterStats cluster_geometry(const std::vector<ad::Tensor>& embeds,
                              const std::vector<std::int64_t>& labels);

// Per-word patch embeddings from the local encoder under aligned patching.
// max_per_word caps occurrences per word (0 = take all); a non-empty word_set
// restricts the measurement to those word ids.
ClusterStats cluster_stats(model::LstModel& m, const std::vector<corpus::Utterance>& utts,
                           std::int64_t max_per_word = 0,
                           const std::vector<std::int64_t>& word_set = {});

// The n most frequent aligned word ids in the corpus (ties to the smaller id).
std::vector<std::int64_t> top_words(const std::vector<corpus::Utterance>& utts,
                                    std::int64_t n);

struct MetricRow {
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    std::int64_t n_seeds = 0;
};

struct StabilityReport {
    std::vector<MetricRow> rows;
    bool partial = false;  // at least one seed aborted
    std::int64_t failures = 0;
};

using RunFn = std::function<std::map<std::string, double>(std::uint64_t seed)>;

// Repeats fn per seed and tabulates mean/std per metric; a throwing run
// flags the report partial instead of aborting the sweep.
StabilityReport stability_report(const RunFn& fn, const std::vector<std::uint64_t>& seeds);

// CSV with columns metric,mean,std,n_seeds
std::string report_to_csv(const StabilityReport& rep);
void write_report(const std::string& path, const StabilityReport& rep);

struct EvalGenConfig {
    std::string modality = "speech";  // speech|text
    std::int64_t n_choices = 2;       // 2 or 4
    bool match_length = true;         // trim candidates to a common length
    std::uint64_t seed = 0;
};

// One record per usable utterance: the first half becomes the prompt, the
// second half the gold continuation, distractors are continuation halves of
// other utterances. Length matching keeps sum and per-token scoring aligned.
std::vector<EvalRecord> make_eval_records(const std::vector<corpus::Utterance>& utts,
                                          const EvalGenConfig& cfg);

}  // namespace lst::eval
