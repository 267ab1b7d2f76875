#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "lst/corpus.hpp"
#include "lst/error.hpp"
#include "lst/evaluator.hpp"
#include "lst/interleave.hpp"
#include "lst/model.hpp"
#include "lst/rng.hpp"
#include "lst/trainer.hpp"

using lst::Rng;
using lst::ad::Tensor;
using namespace lst::eval;

namespace {

lst::corpus::SynthConfig micro_synth() {
    lst::corpus::SynthConfig sc;
    sc.n_word_types = 8;
    sc.speech_vocab = 32;
    sc.text_vocab = 32;
    return sc;
}

lst::model::ModelConfig micro_cfg() {
    lst::model::ModelConfig c;
    c.d_local = 8;
    c.d_global = 8;
    c.n_layers_enc = 1;
    c.n_layers_global = 1;
    c.n_layers_dec = 1;
    c.n_heads = 2;
    c.window = 4;
    c.speech_vocab = 32;
    c.text_vocab = 32;
    c.context_len = 64;
    c.patch_mode = "static";
    c.patch_size = 3;
    return c;
}

EvalRecord speech_record(std::vector<std::int64_t> prompt,
                         std::vector<std::vector<std::int64_t>> cands, std::int64_t gold) {
    EvalRecord rec;
    rec.modality = "speech";
    rec.prompt.tokens = std::move(prompt);
    for (auto& c : cands) rec.candidates.push_back({std::move(c), {}});
    rec.gold = gold;
    return rec;
}

}  // namespace

TEST_CASE("untrained model scores a thousand 1-in-2 records at chance") {
    auto utts = lst::corpus::synth_corpus(101, 250, 3, 5, micro_synth());
    EvalGenConfig gc;
    gc.modality = "speech";
    gc.n_choices = 2;
    gc.seed = 9;
    auto records = make_eval_records(utts, gc);
    REQUIRE(records.size() >= 200);
    // four passes over distinct record seeds to reach ~1k scored records
    std::vector<EvalRecord> all = records;
    for (std::uint64_t s = 10; s <= 12; ++s) {
        gc.seed = s;
        auto more = make_eval_records(utts, gc);
        all.insert(all.end(), more.begin(), more.end());
    }
    REQUIRE(all.size() >= 1000);

    lst::model::LstModel m(micro_cfg(), 4242);
    EvalReport rep = evaluate(m, all, Normalization::sum);
    CHECK(rep.n_scored == static_cast<std::int64_t>(all.size()));
    CHECK(rep.accuracy == doctest::Approx(0.5).epsilon(0.1));  // 0.5 +- 0.05 absolute
    CHECK(std::abs(rep.accuracy - 0.5) < 0.05);
    CHECK(rep.units > 0);
}

TEST_CASE("zero-weight model is uniform: candidate of length 3 scores 3 ln V") {
    auto cfg = micro_cfg();
    cfg.text_vocab = 4;  // one content word + pad + two markers
    cfg.speech_vocab = 4;
    lst::model::LstModel m(cfg, 1);
    for (auto& [name, p] : m.parameters())
        for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = 0.0;

    EvalRecord rec;
    rec.modality = "text";
    rec.prompt.tokens = {0};
    rec.candidates.push_back({{0, 0, 0}, {}});
    rec.candidates.push_back({{0, 0, 0}, {}});
    rec.gold = 0;
    CandidateScore sc = score_candidate(m, rec, 0);
    CHECK(sc.n == 3);
    CHECK(sc.sum_nll == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));
    CHECK(sc.per_token == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // speech candidates see the speech head's vocabulary
    EvalRecord sp = speech_record({1, 2}, {{3, 1, 2}, {2, 2, 2}}, 0);
    CandidateScore ss = score_candidate(m, sp, 0);
    CHECK(ss.sum_nll == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("identical candidates tie: nll difference is exactly zero") {
    lst::model::LstModel m(micro_cfg(), 7);
    auto rec = speech_record({4, 5, 6, 7}, {{8, 9, 10}, {8, 9, 10}}, 1);
    EvalReport rep = evaluate(m, {rec}, Normalization::sum);
    CHECK(rep.mean_nll_diff == 0.0);
    CHECK(rep.accuracy == 0.0);  // argmin ties break to the first candidate
}

TEST_CASE("sum and per-token normalization agree on length-matched records") {
    auto utts = lst::corpus::synth_corpus(77, 60, 3, 5, micro_synth());
    EvalGenConfig gc;
    gc.modality = "speech";
    gc.n_choices = 2;
    gc.seed = 3;
    gc.match_length = true;
    auto records = make_eval_records(utts, gc);
    REQUIRE(records.size() >= 40);
    for (const auto& r : records) {
        REQUIRE(r.candidates.size() == 2);
        CHECK(r.candidates[0].tokens.size() == r.candidates[1].tokens.size());
    }
    lst::model::LstModel m(micro_cfg(), 5);
    EvalReport sum = evaluate(m, records, Normalization::sum);
    EvalReport per = evaluate(m, records, Normalization::per_token);
    CHECK(sum.accuracy == per.accuracy);
    // per-token diff is the sum diff scaled by the record's common length;
    // spot-check one record
    const auto len = static_cast<double>(records[0].candidates[0].tokens.size());
    CandidateScore a = score_candidate(m, records[0], 0);
    CHECK(a.per_token * len == doctest::Approx(a.sum_nll).epsilon(1e-12));
}

TEST_CASE("context overflow skips the record; all skipped is an error") {
    lst::model::LstModel m(micro_cfg(), 2);  // context_len 64
    std::vector<std::int64_t> long_prompt(50, 3), long_cand(30, 4), short_cand(4, 4);
    auto too_big = speech_record(long_prompt, {long_cand, long_cand}, 0);
    auto fits = speech_record({1, 2, 3, 4}, {short_cand, short_cand}, 0);

    EvalReport rep = evaluate(m, {too_big, fits}, Normalization::sum);
    CHECK(rep.n_skipped == 1);
    CHECK(rep.n_scored == 1);

    CHECK_THROWS_AS(evaluate(m, {too_big}, Normalization::sum), lst::EmptyLossError);
    CHECK_THROWS_AS(evaluate(m, {}, Normalization::sum), lst::ConfigError);
    CHECK_THROWS_AS(score_candidate(m, too_big, 0), lst::ContractError);
}

TEST_CASE("record validation rejects malformed inputs") {
    auto ok = speech_record({1, 2}, {{3, 4}, {5, 6}}, 0);
    CHECK_NOTHROW(ok.validate());

    auto bad_gold = ok;
    bad_gold.gold = 2;
    CHECK_THROWS_AS(bad_gold.validate(), lst::ConfigError);

    auto bad_count = ok;
    bad_count.candidates.push_back({{7}, {}});
    CHECK_THROWS_AS(bad_count.validate(), lst::ConfigError);  // 3 candidates

    auto bad_modality = ok;
    bad_modality.modality = "audio";
    CHECK_THROWS_AS(bad_modality.validate(), lst::ConfigError);

    auto empty_cand = ok;
    empty_cand.candidates[1].tokens.clear();
    CHECK_THROWS_AS(empty_cand.validate(), lst::ConfigError);

    auto bad_span = ok;
    bad_span.candidates[0].spans.push_back({0, 1, 5});  // past the tokens
    CHECK_THROWS_AS(bad_span.validate(), lst::ConfigError);
}

TEST_CASE("records round-trip through jsonl") {
    std::vector<EvalRecord> records;
    auto r1 = speech_record({1, 2, 3}, {{4, 5}, {6, 7}}, 1);
    r1.candidates[0].spans.push_back({0, 0, 1});
    records.push_back(r1);
    EvalRecord r2;
    r2.modality = "text";
    r2.prompt.tokens = {9};
    r2.candidates = {{{1, 2}, {}}, {{3, 4}, {}}, {{5, 6}, {}}, {{7, 8}, {}}};
    r2.gold = 3;
    records.push_back(r2);

    const std::string text = records_to_jsonl(records);
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);
    auto back = records_from_jsonl(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].modality == "speech");
    CHECK(back[0].gold == 1);
    CHECK(back[0].prompt.tokens == r1.prompt.tokens);
    CHECK(back[0].candidates[0].tokens == r1.candidates[0].tokens);
    REQUIRE(back[0].candidates[0].spans.size() == 1);
    CHECK(back[0].candidates[0].spans[0].e == 1);
    CHECK(back[1].candidates.size() == 4);
    CHECK(back[1].gold == 3);

    CHECK_THROWS_AS(records_from_jsonl("{broken"), lst::IoError);

    const auto path = (std::filesystem::temp_directory_path() / "lst_eval_records.jsonl").string();
    write_records(path, records);
    auto from_file = read_records(path);
    CHECK(from_file.size() == 2);
    std::filesystem::remove(path);
}

TEST_CASE("generated records put the true continuation at the gold index") {
    auto utts = lst::corpus::synth_corpus(55, 40, 3, 5, micro_synth());
    EvalGenConfig gc;
    gc.modality = "speech";
    gc.n_choices = 4;
    gc.seed = 21;
    auto records = make_eval_records(utts, gc);
    REQUIRE(!records.empty());

    std::set<std::int64_t> gold_positions;
    std::size_t checked = 0;
    for (std::size_t i = 0, r = 0; i < utts.size() && r < records.size(); ++i) {
        const auto& toks = utts[i].speech_tokens;
        if (toks.size() < 4) continue;
        const auto& rec = records[r++];
        REQUIRE(rec.candidates.size() == 4);
        gold_positions.insert(rec.gold);
        // prompt is the first half of the source utterance
        const std::vector<std::int64_t> want_prompt(toks.begin(),
                                                    toks.begin() + static_cast<std::int64_t>(toks.size()) / 2);
        CHECK(rec.prompt.tokens == want_prompt);
        // the gold candidate is a prefix of the true continuation
        const std::vector<std::int64_t> cont(toks.begin() + static_cast<std::int64_t>(toks.size()) / 2,
                                             toks.end());
        const auto& gold = rec.candidates[rec.gold].tokens;
        REQUIRE(gold.size() <= cont.size());
        CHECK(std::equal(gold.begin(), gold.end(), cont.begin()));
        ++checked;
    }
    CHECK(checked == records.size());
    CHECK(gold_positions.size() > 1);  // the gold index moves around

    CHECK_THROWS_AS(make_eval_records(utts, EvalGenConfig{"speech", 3, true, 0}),
                    lst::ConfigError);
}

TEST_CASE("an overfit continuation wins the multiple choice") {
    auto utts = lst::corpus::synth_corpus(61, 1, 4, 4, micro_synth());
    auto cfg = micro_cfg();
    cfg.d_local = 16;
    cfg.d_global = 32;
    lst::train::TrainConfig tc;
    tc.total_steps = 150;
    tc.warmup = 10;
    tc.lr = 3e-3;
    tc.batch_size = 1;
    tc.stream = "speech";
    tc.seed = 13;
    lst::model::LstModel m(cfg, tc.seed);
    lst::train::train(m, tc, utts, "");

    const auto& frames = utts[0].speech_tokens;
    REQUIRE(frames.size() >= 8);
    const auto half = static_cast<std::int64_t>(frames.size()) / 2;
    std::vector<std::int64_t> prompt(frames.begin(), frames.begin() + half);
    std::vector<std::int64_t> gold(frames.begin() + half, frames.end());
    Rng rng(5);
    std::vector<std::int64_t> noise;
    for (std::size_t i = 0; i < gold.size(); ++i)
        noise.push_back(static_cast<std::int64_t>(rng.below(32)));

    auto rec = speech_record(prompt, {noise, gold}, 1);
    EvalReport rep = evaluate(m, {rec}, Normalization::sum);
    CHECK(rep.accuracy == 1.0);
    CHECK(rep.mean_nll_diff < 0.0);
}

TEST_CASE("ideal geometry: tight identical clusters, orthogonal across words") {
    std::vector<Tensor> embeds;
    std::vector<std::int64_t> labels;
    for (int w = 0; w < 3; ++w) {
        for (int k = 0; k < 4; ++k) {
            Tensor e = Tensor::zeros({1, 8});
            e[w] = 2.5;  // identical direction within a word, orthogonal across
            embeds.push_back(e);
            labels.push_back(w);
        }
    }
    ClusterStats st = cluster_geometry(embeds, labels);
    CHECK(st.within == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(st.between == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(st.silhouette == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(st.n_words == 3);
    CHECK(st.n_embeddings == 12);

    CHECK_THROWS_AS(cluster_geometry(embeds, std::vector<std::int64_t>(12, 0)),
                    lst::ContractError);  // one cluster is not enough
}

TEST_CASE("random model on signature-free words sits near silhouette zero") {
    // full noise replaces every frame with a uniform token, so word identity
    // leaves no trace and no model can separate the clusters; two clusters
    // keep the silhouette estimator unbiased (the min over other clusters
    // drags it negative on structureless data once there are many clusters)
    auto sc = micro_synth();
    sc.n_word_types = 2;
    sc.noise_prob = 1.0;
    auto utts = lst::corpus::synth_corpus(71, 40, 3, 5, sc);
    lst::model::LstModel m(micro_cfg(), 31);
    ClusterStats st = cluster_stats(m, utts, 40);
    CHECK(st.n_words == 2);
    CHECK(std::abs(st.silhouette) < 0.15);
}

TEST_CASE("words with fewer than two occurrences are excluded") {
    // handmade corpus: words 0 and 1 repeat, word 2 appears once
    auto make = [](std::int64_t word, std::vector<std::int64_t> frames) {
        lst::corpus::Utterance u;
        u.text_tokens = {word};
        u.alignment = {{0, 0, static_cast<std::int64_t>(frames.size()) - 1}};
        u.speech_tokens = std::move(frames);
        return u;
    };
    std::vector<lst::corpus::Utterance> utts = {
        make(0, {1, 2, 3}), make(0, {1, 2, 4}), make(1, {9, 9}),
        make(1, {9, 8}),    make(2, {5, 6, 7}),
    };
    lst::model::LstModel m(micro_cfg(), 3);
    ClusterStats st = cluster_stats(m, utts);
    CHECK(st.n_words == 2);
    CHECK(st.excluded_words == 1);
    CHECK(st.n_embeddings == 4);

    // dropping a repeat of word 1 leaves a single usable cluster
    utts.pop_back();
    utts.pop_back();
    CHECK_THROWS_AS(cluster_stats(m, utts), lst::ContractError);
}

TEST_CASE("top words rank by frequency and a word set narrows the stats") {
    auto make = [](std::vector<std::int64_t> words) {
        lst::corpus::Utterance u;
        std::int64_t pos = 0;
        for (auto w : words) {
            u.text_tokens.push_back(w);
            u.alignment.push_back({static_cast<std::int64_t>(u.text_tokens.size()) - 1, pos,
                                   pos + 1});
            u.speech_tokens.push_back(static_cast<std::int64_t>(w % 7));
            u.speech_tokens.push_back(static_cast<std::int64_t>((w + 3) % 7));
            pos += 2;
        }
        return u;
    };
    // word 5 four times, word 2 three times, words 9 and 1 twice (tie), word 0 once
    std::vector<lst::corpus::Utterance> utts = {make({5, 2, 9}), make({5, 2, 1}),
                                                make({5, 2, 9}), make({5, 1, 0})};
    CHECK(top_words(utts, 2) == std::vector<std::int64_t>{5, 2});
    CHECK(top_words(utts, 3) == std::vector<std::int64_t>{5, 2, 1});  // tie -> smaller id
    CHECK(top_words(utts, 100).size() == 5);
    CHECK_THROWS_AS(top_words(utts, 0), lst::ConfigError);

    lst::model::LstModel m(micro_cfg(), 3);
    ClusterStats narrowed = cluster_stats(m, utts, 0, {5, 2});
    CHECK(narrowed.n_words == 2);
    CHECK(narrowed.n_embeddings == 7);
    CHECK(narrowed.excluded_words == 0);  // words outside the set are not "excluded"
}

TEST_CASE("stability report tabulates mean and std per metric") {
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    auto fn = [](std::uint64_t seed) {
        std::map<std::string, double> m;
        m["accuracy"] = 0.5 + 0.1 * static_cast<double>(seed);
        m["loss"] = 2.0;
        return m;
    };
    StabilityReport rep = stability_report(fn, seeds);
    REQUIRE(rep.rows.size() == 2);
    CHECK_FALSE(rep.partial);
    const auto& acc = rep.rows[0].metric == "accuracy" ? rep.rows[0] : rep.rows[1];
    const auto& loss = rep.rows[0].metric == "loss" ? rep.rows[0] : rep.rows[1];
    CHECK(acc.mean == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(acc.stddev == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(acc.n_seeds == 3);
    CHECK(loss.stddev == 0.0);

    // identical seeds -> identical metrics -> zero std
    StabilityReport same = stability_report(fn, {7, 7, 7});
    for (const auto& row : same.rows) CHECK(row.stddev == 0.0);

    // a failing seed flags the report partial but keeps the others
    auto flaky = [&](std::uint64_t seed) {
        if (seed == 2) throw lst::DivergenceError("boom");
        return fn(seed);
    };
    StabilityReport part = stability_report(flaky, seeds);
    CHECK(part.partial);
    CHECK(part.failures == 1);
    for (const auto& row : part.rows) CHECK(row.n_seeds == 2);

    CHECK_THROWS_AS(stability_report(fn, {1}), lst::ConfigError);

    const std::string csv = report_to_csv(rep);
    CHECK(csv.rfind("metric,mean,std,n_seeds\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
