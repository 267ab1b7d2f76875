#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "lst/baseline.hpp"
#include "lst/corpus.hpp"
#include "lst/error.hpp"
#include "lst/interleave.hpp"
#include "lst/model.hpp"
#include "lst/rng.hpp"
#include "lst/trainer.hpp"

using lst::Rng;
using lst::ad::Tensor;
using namespace lst::train;

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

std::string temp_dir(const char* tag) {
    auto p = std::filesystem::temp_directory_path() /
             (std::string("lst_trainer_") + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(bool(f));
    std::string s, line;
    while (std::getline(f, line)) {
        s += line;
        s += '\n';
    }
    return s;
}

}  // namespace

TEST_CASE("single adamw step matches the closed form") {
    TrainConfig cfg;
    cfg.grad_clip = 0.0;  // no clipping here
    cfg.weight_decay = 0.1;
    std::map<std::string, Tensor> params;
    params["w"] = Tensor::row({0.5, -1.25});
    std::map<std::string, Tensor> grads;
    grads["w"] = Tensor::row({0.2, -0.7});
    AdamState st;
    const double lr = 3e-3;
    adamw_step(params, grads, st, cfg, lr);

    for (int i = 0; i < 2; ++i) {
        const double p0 = i == 0 ? 0.5 : -1.25;
        const double g = i == 0 ? 0.2 : -0.7;
        const double m = (1.0 - cfg.beta1) * g;
        const double v = (1.0 - cfg.beta2) * g * g;
        const double mh = m / (1.0 - cfg.beta1);
        const double vh = v / (1.0 - cfg.beta2);
        const double want = p0 - lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * p0);
        CHECK(params["w"][i] == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(st.t == 1);

    // second step exercises bias correction with t = 2
    adamw_step(params, grads, st, cfg, lr);
    const double g = 0.2;
    const double m2 = cfg.beta1 * (1.0 - cfg.beta1) * g + (1.0 - cfg.beta1) * g;
    const double v2 = cfg.beta2 * (1.0 - cfg.beta2) * g * g + (1.0 - cfg.beta2) * g * g;
    const double mh2 = m2 / (1.0 - cfg.beta1 * cfg.beta1);
    const double vh2 = v2 / (1.0 - cfg.beta2 * cfg.beta2);
    const double p1 = 0.5 - 3e-3 * ((1.0 - cfg.beta1) * g / (1.0 - cfg.beta1) /
                                        (std::sqrt((1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2)) +
                                         cfg.adam_eps) +
                                    cfg.weight_decay * 0.5);
    const double want2 = p1 - 3e-3 * (mh2 / (std::sqrt(vh2) + cfg.adam_eps) + cfg.weight_decay * p1);
    CHECK(params["w"][0] == doctest::Approx(want2).epsilon(1e-12));
}

TEST_CASE("zero gradients with zero weight decay change nothing") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    std::map<std::string, Tensor> params;
    params["a"] = Tensor::row({1.5, -2.5, 0.25});
    std::map<std::string, Tensor> grads;
    grads["a"] = Tensor::zeros({1, 3});
    AdamState st;
    adamw_step(params, grads, st, cfg, 1e-2);
    CHECK(params["a"][0] == 1.5);
    CHECK(params["a"][1] == -2.5);
    CHECK(params["a"][2] == 0.25);
}

TEST_CASE("clipping scales the whole gradient by clip/norm") {
    // gradient of global norm 10 with clip 1.0 behaves exactly like the
    // pre-scaled gradient with clipping off
    std::map<std::string, Tensor> grads;
    grads["a"] = Tensor::row({6.0});
    grads["b"] = Tensor::row({8.0});  // norm 10

    TrainConfig clip_cfg;
    clip_cfg.grad_clip = 1.0;
    std::map<std::string, Tensor> p1;
    p1["a"] = Tensor::row({0.3});
    p1["b"] = Tensor::row({-0.9});
    AdamState s1;
    adamw_step(p1, grads, s1, clip_cfg, 1e-3);

    TrainConfig off_cfg;
    off_cfg.grad_clip = 0.0;
    std::map<std::string, Tensor> scaled;
    scaled["a"] = Tensor::row({0.6});
    scaled["b"] = Tensor::row({0.8});
    std::map<std::string, Tensor> p2;
    p2["a"] = Tensor::row({0.3});
    p2["b"] = Tensor::row({-0.9});
    AdamState s2;
    adamw_step(p2, scaled, s2, off_cfg, 1e-3);

    CHECK(p1["a"][0] == p2["a"][0]);
    CHECK(p1["b"][0] == p2["b"][0]);

    // a gradient under the threshold is left alone
    std::map<std::string, Tensor> small;
    small["a"] = Tensor::row({0.01});
    small["b"] = Tensor::row({0.02});
    std::map<std::string, Tensor> p3{{"a", Tensor::row({0.3})}, {"b", Tensor::row({-0.9})}};
    std::map<std::string, Tensor> p4{{"a", Tensor::row({0.3})}, {"b", Tensor::row({-0.9})}};
    AdamState s3, s4;
    adamw_step(p3, small, s3, clip_cfg, 1e-3);
    adamw_step(p4, small, s4, off_cfg, 1e-3);
    CHECK(p3["a"][0] == p4["a"][0]);
    CHECK(p3["b"][0] == p4["b"][0]);
}

TEST_CASE("non-finite gradients abort the step") {
    std::map<std::string, Tensor> params{{"a", Tensor::row({1.0})}};
    std::map<std::string, Tensor> grads{{"a", Tensor::row({std::nan("")})}};
    AdamState st;
    CHECK_THROWS_AS(adamw_step(params, grads, st, TrainConfig{}, 1e-3), lst::DivergenceError);
    CHECK(params["a"][0] == 1.0);  // untouched

    grads["a"][0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adamw_step(params, grads, st, TrainConfig{}, 1e-3), lst::DivergenceError);
}

TEST_CASE("learning-rate schedule anchors both knees exactly") {
    TrainConfig cfg;
    cfg.lr = 4e-4;
    cfg.warmup = 2000;
    cfg.total_steps = 20000;
    cfg.min_lr_ratio = 0.01;

    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(1, cfg) == 4e-4 / 2000.0);
    CHECK(lr_at(2000, cfg) == 4e-4);                  // warmup knee, bitwise
    CHECK(lr_at(20000, cfg) == 4e-4 * 0.01);          // floor, bitwise
    CHECK(lr_at(25000, cfg) == 4e-4 * 0.01);          // stays at the floor
    CHECK(lr_at(20000, cfg) == doctest::Approx(4e-6).epsilon(1e-14));

    // continuity at the warmup knee and monotone decay after it
    CHECK(lr_at(2001, cfg) == doctest::Approx(4e-4).epsilon(1e-6));
    double prev = lr_at(2000, cfg);
    for (std::int64_t s = 2001; s <= 20000; s += 257) {
        const double cur = lr_at(s, cfg);
        CHECK(cur < prev);
        prev = cur;
    }
    // halfway through decay sits halfway between peak and floor
    const double mid = lr_at(2000 + 9000, cfg);
    CHECK(mid == doctest::Approx((4e-4 + 4e-6) / 2.0).epsilon(1e-9));

    CHECK_THROWS_AS(lr_at(-1, cfg), lst::ContractError);
}

TEST_CASE("greedy mix controller converges to the token-fraction target") {
    Rng rng(123);
    BudgetLedger led;
    for (int i = 0; i < 3000; ++i) {
        const bool inter = pick_interleaved(led, 1, 2);
        lst::model::LossStats st;
        st.raw_tokens = 20 + static_cast<std::int64_t>(rng.below(41));
        led.add(st, inter);
    }
    CHECK(led.interleaved_fraction() == doctest::Approx(1.0 / 3.0).epsilon(0.01));

    BudgetLedger pure;
    for (int i = 0; i < 50; ++i) {
        CHECK(pick_interleaved(pure, 1, 0));
        lst::model::LossStats st;
        st.raw_tokens = 30;
        pure.add(st, true);
    }
    CHECK(pure.interleaved_fraction() == 1.0);

    BudgetLedger none;
    CHECK_FALSE(pick_interleaved(none, 0, 1));
}

TEST_CASE("training writes artifacts, stops at total steps, and is deterministic") {
    auto utts = lst::corpus::synth_corpus(11, 12, 3, 5, micro_synth());
    TrainConfig tc;
    tc.total_steps = 6;
    tc.warmup = 2;
    tc.batch_size = 2;
    tc.seed = 99;
    tc.checkpoint_every = 3;

    const std::string dir1 = temp_dir("artifacts1");
    lst::model::LstModel m1(micro_cfg(), tc.seed);
    TrainResult r1 = train(m1, tc, utts, dir1);
    CHECK(r1.steps_done == 6);
    CHECK(r1.stop_reason == "total_steps");
    CHECK(std::isfinite(r1.final_loss));
    CHECK(r1.ledger.steps == 6);
    CHECK(r1.ledger.global_units > 0);
    CHECK(r1.ledger.raw_tokens > 0);
    CHECK(r1.checkpoint_dir == dir1 + "/checkpoint");
    CHECK(std::filesystem::exists(dir1 + "/metrics.csv"));
    CHECK(std::filesystem::exists(dir1 + "/ledger.json"));
    CHECK(std::filesystem::exists(dir1 + "/checkpoint/weights.bin"));

    const std::string metrics = slurp(dir1 + "/metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 7);  // header + 6 steps

    const std::string dir2 = temp_dir("artifacts2");
    lst::model::LstModel m2(micro_cfg(), tc.seed);
    TrainResult r2 = train(m2, tc, utts, dir2);
    CHECK(slurp(dir2 + "/metrics.csv") == metrics);
    for (const auto& [name, p] : m1.parameters()) {
        const auto& q = m2.parameters().at(name);
        for (std::int64_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == q[i]);
    }

    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("compute budget stops at the first crossing, data budget likewise") {
    auto utts = lst::corpus::synth_corpus(21, 10, 3, 5, micro_synth());

    TrainConfig tc;
    tc.total_steps = 200;
    tc.warmup = 10;
    tc.batch_size = 2;
    tc.seed = 5;
    tc.budget = "compute";
    tc.max_units = 150;
    lst::model::LstModel m(micro_cfg(), tc.seed);
    TrainResult r = train(m, tc, utts, "");
    CHECK(r.stop_reason == "unit_budget");
    CHECK(r.ledger.global_units >= tc.max_units);
    CHECK(r.steps_done < tc.total_steps);
    // overshoot is bounded by a single step: the ledger before the last add
    // was still under budget
    const std::int64_t biggest_step = r.ledger.global_units / r.ledger.steps + 64;
    CHECK(r.ledger.global_units - tc.max_units < biggest_step);

    TrainConfig td = tc;
    td.budget = "data";
    td.max_units = 0;
    td.max_raw_tokens = 140;
    lst::model::LstModel m2(micro_cfg(), td.seed);
    TrainResult rd = train(m2, td, utts, "");
    CHECK(rd.stop_reason == "token_budget");
    CHECK(rd.ledger.raw_tokens >= td.max_raw_tokens);
    CHECK(rd.steps_done < td.total_steps);
}

TEST_CASE("unit savings identity and the pure-speech static-4 rate") {
    // frame counts all divisible by 4 so ceil(T/4)/T is exactly 1/4
    std::vector<lst::corpus::Utterance> utts;
    Rng rng(7);
    for (int i = 0; i < 6; ++i) {
        lst::corpus::Utterance u;
        const std::int64_t T = 4 * (2 + static_cast<std::int64_t>(rng.below(9)));
        for (std::int64_t t = 0; t < T; ++t)
            u.speech_tokens.push_back(static_cast<std::int64_t>(rng.below(32)));
        u.text_tokens.push_back(0);
        u.alignment.push_back({0, 0, T - 1});
        utts.push_back(std::move(u));
    }
    std::vector<lst::interleave::InterleavedSequence> seqs;
    for (const auto& u : utts) seqs.push_back(lst::interleave::pure_speech(u));

    auto cfg = micro_cfg();
    cfg.patch_size = 4;
    lst::model::LstModel lst_m(cfg, 3);
    lst::model::BaselineConfig bc;
    bc.kind = "base";
    bc.d_model = 8;
    bc.n_layers = 1;
    bc.n_heads = 2;
    bc.speech_vocab = 32;
    bc.text_vocab = 32;
    bc.context_len = 64;
    lst::model::BaselineModel base_m(bc, 3);

    lst::model::TrainContext ctx;
    auto ls = lst_m.loss_only(seqs, ctx);
    auto bs = base_m.loss_only(seqs, ctx);

    CHECK(bs.speech_units == bs.speech_frames);  // baseline consumes raw frames
    CHECK(ls.speech_frames == bs.speech_frames);
    const double speech_savings = unit_savings(ls.speech_units, bs.speech_units);
    CHECK(speech_savings == 0.75);  // exact: every run length is a multiple of 4

    // identity holds for any pair of ledgers
    const double total = unit_savings(ls.global_units, bs.global_units);
    CHECK(total == 1.0 - static_cast<double>(ls.global_units) / bs.global_units);
    CHECK(unit_savings(5, 5) == 0.0);
    CHECK_THROWS_AS(unit_savings(1, 0), lst::ContractError);
}

TEST_CASE("checkpointed training resumes bit-exactly") {
    auto utts = lst::corpus::synth_corpus(31, 10, 3, 5, micro_synth());
    TrainConfig tc;
    tc.total_steps = 5;
    tc.warmup = 2;
    tc.batch_size = 2;
    tc.seed = 17;
    tc.checkpoint_every = 3;

    // continuous run: checkpoint lands after step 3, training continues to 5
    const std::string dir_a = temp_dir("resume_a");
    lst::model::LstModel ma(micro_cfg(), tc.seed);
    TrainResult ra = train(ma, tc, utts, dir_a);
    CHECK(ra.steps_done == 5);

    // interrupted run: identical schedule, capped at 3 steps this invocation
    const std::string dir_b = temp_dir("resume_b");
    TrainConfig t3 = tc;
    t3.run_steps = 3;
    lst::model::LstModel mb(micro_cfg(), tc.seed);
    TrainResult rb = train(mb, t3, utts, dir_b);
    CHECK(rb.stop_reason == "run_limit");

    const std::string dir_c = temp_dir("resume_c");
    lst::model::LstModel mc(micro_cfg(), 777);  // init seed is irrelevant after load
    TrainResult rc = train(mc, tc, utts, dir_c, {}, dir_b + "/checkpoint");
    CHECK(rc.steps_done == 2);
    CHECK(rc.ledger.steps == 5);

    for (const auto& [name, p] : ma.parameters()) {
        const auto& q = mc.parameters().at(name);
        REQUIRE(p.same_shape(q));
        for (std::int64_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == q[i]);
    }
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
    std::filesystem::remove_all(dir_c);
}

TEST_CASE("train config validation and serialization") {
    TrainConfig c;
    c.warmup = c.total_steps;  // warmup must stay below total
    CHECK_THROWS_AS(c.validate(), lst::ConfigError);
    c = TrainConfig{};
    c.mix_interleaved = 0;
    c.mix_text = 0;
    CHECK_THROWS_AS(c.validate(), lst::ConfigError);
    c = TrainConfig{};
    c.budget = "steps";
    CHECK_THROWS_AS(c.validate(), lst::ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), lst::ConfigError);
    c = TrainConfig{};
    c.stream = "speechy";
    CHECK_THROWS_AS(c.validate(), lst::ConfigError);

    TrainConfig d;
    d.lr = 1e-3;
    d.warmup = 7;
    d.total_steps = 50;
    d.stream = "speech";
    d.seed = 12345;
    TrainConfig e = TrainConfig::from_json_text(d.to_json());
    CHECK(e.lr == d.lr);
    CHECK(e.warmup == d.warmup);
    CHECK(e.total_steps == d.total_steps);
    CHECK(e.stream == d.stream);
    CHECK(e.seed == d.seed);
    CHECK_THROWS_AS(TrainConfig::from_json_text("{\"lr\": 1e-3, \"nope\": 2}"), lst::ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json_text("not json"), lst::ConfigError);
}

TEST_CASE("budget ledger serialization round-trips") {
    BudgetLedger led;
    lst::model::LossStats st;
    st.global_units = 40;
    st.speech_units = 25;
    st.text_units = 15;
    st.raw_tokens = 90;
    st.speech_frames = 80;
    st.truncations = 1;
    led.add(st, true);
    led.add(st, false);
    led.steps = 2;
    BudgetLedger back = BudgetLedger::from_json_text(led.to_json());
    CHECK(back.steps == 2);
    CHECK(back.global_units == 80);
    CHECK(back.speech_units == 50);
    CHECK(back.text_units == 30);
    CHECK(back.raw_tokens == 180);
    CHECK(back.speech_frames == 160);
    CHECK(back.tokens_from_interleaved == 90);
    CHECK(back.tokens_from_text == 90);
    CHECK(back.truncations == 2);
    CHECK_THROWS_AS(BudgetLedger::from_json_text("{}"), lst::IoError);
}

TEST_CASE("speech stream attributes every token to the interleaved side") {
    auto utts = lst::corpus::synth_corpus(41, 8, 3, 4, micro_synth());
    TrainConfig tc;
    tc.total_steps = 3;
    tc.warmup = 1;
    tc.batch_size = 2;
    tc.stream = "speech";
    tc.seed = 1;
    lst::model::LstModel m(micro_cfg(), tc.seed);
    TrainResult r = train(m, tc, utts, "");
    CHECK(r.ledger.tokens_from_text == 0);
    CHECK(r.ledger.tokens_from_interleaved == r.ledger.raw_tokens);
    CHECK(r.ledger.speech_frames == r.ledger.raw_tokens);  // no text content at all
}

TEST_CASE("two hundred steps overfit one utterance") {
    // lr and warmup scaled for the micro setting; the desk-default schedule
    // (4e-4, warmup 2000) is built for full runs
    auto utts = lst::corpus::synth_corpus(51, 1, 4, 4, micro_synth());
    auto cfg = micro_cfg();
    cfg.d_local = 16;
    cfg.d_global = 32;
    TrainConfig tc;
    tc.total_steps = 200;
    tc.warmup = 10;
    tc.lr = 3e-3;
    tc.batch_size = 1;
    tc.stream = "speech";
    tc.seed = 13;
    lst::model::LstModel m(cfg, tc.seed);

    lst::model::TrainContext ctx;
    auto init = m.loss_only({lst::interleave::pure_speech(utts[0])}, ctx);
    CHECK(init.speech_loss == doctest::Approx(std::log(32.0)).epsilon(0.12));

    TrainResult r = train(m, tc, utts, "");
    CHECK(r.stop_reason == "total_steps");
    auto fin = m.loss_only({lst::interleave::pure_speech(utts[0])}, ctx);
    CHECK(fin.speech_loss < 1.0);
}
