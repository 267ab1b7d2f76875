#include <algorithm>
#include <cstdio>
#include <set>
#include <vector>

#include "doctest.h"
#include "lst/corpus.hpp"
#include "lst/rng.hpp"
#include "lst/speech_bpe.hpp"

using namespace lst::corpus;

namespace {

bool same_utterance(const Utterance& a, const Utterance& b) {
    if (a.text_tokens != b.text_tokens || a.speech_tokens != b.speech_tokens) return false;
    if (a.alignment.size() != b.alignment.size()) return false;
    for (std::size_t i = 0; i < a.alignment.size(); ++i)
        if (a.alignment[i].unit != b.alignment[i].unit || a.alignment[i].b != b.alignment[i].b ||
            a.alignment[i].e != b.alignment[i].e)
            return false;
    return true;
}

}  // namespace

TEST_CASE("synth_utterance is deterministic in the seed") {
    SynthConfig cfg;
    auto a = synth_utterance(7, 6, cfg);
    auto b = synth_utterance(7, 6, cfg);
    CHECK(same_utterance(a, b));
    auto c = synth_utterance(8, 6, cfg);
    CHECK_FALSE(same_utterance(a, c));
}

TEST_CASE("zero silence probability tiles the speech run") {
    SynthConfig cfg;
    cfg.sil_prob = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto u = synth_utterance(seed, 5, cfg);
        validate_utterance(u);
        REQUIRE(u.alignment.size() == 5);
        CHECK(u.alignment.front().b == 0);
        CHECK(u.alignment.back().e == static_cast<std::int64_t>(u.speech_tokens.size()) - 1);
        for (std::size_t k = 1; k < u.alignment.size(); ++k)
            CHECK(u.alignment[k].b == u.alignment[k - 1].e + 1);
    }
}

TEST_CASE("span lengths match the configured means") {
    SynthConfig cfg;
    auto us = synth_corpus(123, 10000, 3, 3, cfg);
    double word_frames = 0;
    std::int64_t word_spans = 0;
    double sil_frames = 0;
    std::int64_t sil_runs = 0;
    for (const auto& u : us) {
        std::int64_t prev_e = -1;
        for (const auto& s : u.alignment) {
            word_frames += static_cast<double>(s.e - s.b + 1);
            ++word_spans;
            if (s.b > prev_e + 1) {
                sil_frames += static_cast<double>(s.b - prev_e - 1);
                ++sil_runs;
            }
            prev_e = s.e;
        }
        const auto T = static_cast<std::int64_t>(u.speech_tokens.size());
        if (T - 1 > prev_e) {
            sil_frames += static_cast<double>(T - 1 - prev_e);
            ++sil_runs;
        }
    }
    CHECK(word_frames / static_cast<double>(word_spans) == doctest::Approx(5.8).epsilon(0.1 / 5.8));
    CHECK(sil_frames / static_cast<double>(sil_runs) == doctest::Approx(3.7).epsilon(0.15 / 3.7));
}

TEST_CASE("alignment spans partition words with silence as the complement") {
    SynthConfig cfg;
    auto us = synth_corpus(9, 200, 1, 12, cfg);
    for (const auto& u : us) {
        validate_utterance(u);
        CHECK(u.text_tokens.size() == u.alignment.size());
        for (auto t : u.speech_tokens) {
            CHECK(t >= 0);
            CHECK(t < cfg.speech_vocab);
        }
    }
}

TEST_CASE("degenerate config throws") {
    SynthConfig cfg;
    cfg.mean_word_frames = 0.5;
    CHECK_THROWS_AS((void)synth_utterance(1, 3, cfg), lst::ConfigError);
    SynthConfig cfg2;
    cfg2.mean_sil_frames = 0.0;
    CHECK_THROWS_AS((void)synth_utterance(1, 3, cfg2), lst::ConfigError);
}

TEST_CASE("same-word spans overlap more than cross-word spans") {
    SynthConfig cfg;
    cfg.n_word_types = 40;
    auto us = synth_corpus(31, 400, 4, 10, cfg);
    std::vector<std::vector<std::set<std::int64_t>>> by_word(cfg.n_word_types);
    for (const auto& u : us)
        for (const auto& s : u.alignment) {
            std::set<std::int64_t> toks(u.speech_tokens.begin() + s.b,
                                        u.speech_tokens.begin() + s.e + 1);
            by_word[u.text_tokens[s.unit]].push_back(std::move(toks));
        }

    auto jaccard = [](const std::set<std::int64_t>& a, const std::set<std::int64_t>& b) {
        std::size_t inter = 0;
        for (auto t : a) inter += b.count(t);
        return static_cast<double>(inter) /
               static_cast<double>(a.size() + b.size() - inter);
    };

    lst::Rng rng(5);
    double same_sum = 0, diff_sum = 0;
    const int n_pairs = 2000;
    for (int i = 0; i < n_pairs; ++i) {
        std::int64_t w;
        do {
            w = static_cast<std::int64_t>(rng.below(cfg.n_word_types));
        } while (by_word[w].size() < 2);
        auto a = rng.below(by_word[w].size());
        auto b = rng.below(by_word[w].size());
        while (b == a) b = rng.below(by_word[w].size());
        same_sum += jaccard(by_word[w][a], by_word[w][b]);

        std::int64_t w2;
        do {
            w2 = static_cast<std::int64_t>(rng.below(cfg.n_word_types));
        } while (w2 == w || by_word[w2].empty());
        diff_sum += jaccard(by_word[w][a], by_word[w2][rng.below(by_word[w2].size())]);
    }
    CHECK(same_sum / n_pairs > diff_sum / n_pairs + 0.2);
}

TEST_CASE("text tokenization is the identity over the closed vocabulary") {
    auto v = Vocabulary::text_default();
    v.validate();
    CHECK(tokenize_text({}, v).empty());
    CHECK(tokenize_text({3, 1, 4}, v) == std::vector<std::int64_t>{3, 1, 4});
    CHECK(detokenize_text(tokenize_text({3, 1, 4}, v), v) ==
          std::vector<std::int64_t>{3, 1, 4});
    CHECK_THROWS_AS((void)tokenize_text({v.pad}, v), lst::VocabError);
    CHECK_THROWS_AS((void)tokenize_text({-1}, v), lst::VocabError);
}

TEST_CASE("vocabulary defaults are well-formed") {
    auto t = Vocabulary::text_default();
    t.validate();
    CHECK(t.size == 512);
    CHECK(t.n_content() == 509);
    CHECK(t.is_special(t.pad));
    CHECK_FALSE(t.is_special(0));
    auto s = Vocabulary::speech_default();
    s.validate();
    CHECK(s.size == 501);
    CHECK(s.n_content() == 501);
}

TEST_CASE("corpus jsonl round-trips") {
    SynthConfig cfg;
    auto us = synth_corpus(77, 20, 2, 8, cfg);
    const std::string path = "corpus_test.jsonl";
    write_corpus_jsonl(path, us);
    auto back = read_corpus_jsonl(path);
    REQUIRE(back.size() == us.size());
    for (std::size_t i = 0; i < us.size(); ++i) CHECK(same_utterance(us[i], back[i]));
    std::remove(path.c_str());
    CHECK_THROWS_AS((void)read_corpus_jsonl("no_such_file.jsonl"), lst::IoError);
}

TEST_CASE("bpe learns the repeated pair first") {
    std::vector<std::vector<std::int64_t>> corpus{{1, 2, 1, 2, 1, 2, 3}, {1, 2, 1, 2}};
    auto table = lst::bpe::train_speech_bpe(corpus, 10, 12);
    REQUIRE(!table.merges.empty());
    CHECK(table.merges[0] == std::pair<std::int64_t, std::int64_t>{1, 2});
    auto enc = table.encode({1, 2, 3, 1, 2});
    CHECK(enc.size() < 5);
    CHECK(table.decode(enc) == std::vector<std::int64_t>{1, 2, 3, 1, 2});
}

TEST_CASE("bpe rejects vocab not above base") {
    std::vector<std::vector<std::int64_t>> corpus{{1, 2, 3}};
    CHECK_THROWS_AS((void)lst::bpe::train_speech_bpe(corpus, 10, 10), lst::ConfigError);
    CHECK_THROWS_AS((void)lst::bpe::train_speech_bpe(corpus, 10, 5), lst::ConfigError);
}

TEST_CASE("bpe round-trips random sequences") {
    SynthConfig cfg;
    auto us = synth_corpus(55, 300, 2, 8, cfg);
    std::vector<std::vector<std::int64_t>> corpus;
    for (const auto& u : us) corpus.push_back(u.speech_tokens);
    auto table = lst::bpe::train_speech_bpe(corpus, cfg.speech_vocab, cfg.speech_vocab + 120);

    lst::Rng rng(6);
    for (int i = 0; i < 1000; ++i) {
        std::vector<std::int64_t> seq(rng.below(80) + 1);
        for (auto& t : seq) t = static_cast<std::int64_t>(rng.below(501));
        CHECK(table.decode(table.encode(seq)) == seq);
    }
    // corpus sequences too: these actually exercise the merges
    for (const auto& seq : corpus) CHECK(table.decode(table.encode(seq)) == seq);
    CHECK(table.compression_ratio(corpus) > 1.2);

    const std::string path = "bpe_test.json";
    table.save(path);
    auto back = lst::bpe::SpeechBpe::load(path);
    CHECK(back.base_vocab == table.base_vocab);
    CHECK(back.merges == table.merges);
    std::remove(path.c_str());
}
