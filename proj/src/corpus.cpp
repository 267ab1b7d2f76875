#include "lst/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "lst/rng.hpp"

namespace lst::corpus {

Vocabulary Vocabulary::text_sized(std::int64_t size) {
    if (size < 4) throw ConfigError("text vocabulary needs >= 4 ids", "vocabulary.size");
    Vocabulary v;
    v.kind = Kind::text;
    v.size = size;
    v.pad = size - 3;
    v.text_marker = size - 2;
    v.speech_marker = size - 1;
    return v;
}

Vocabulary Vocabulary::text_default() { return text_sized(512); }

Vocabulary Vocabulary::speech_default() {
    Vocabulary v;
    v.kind = Kind::speech;
    v.size = 501;
    return v;
}

std::int64_t Vocabulary::n_content() const {
    std::int64_t n = size;
    for (auto id : {pad, text_marker, speech_marker})
        if (id >= 0) --n;
    return n;
}

bool Vocabulary::is_special(std::int64_t id) const {
    return id == pad || id == text_marker || id == speech_marker;
}

void Vocabulary::validate() const {
    if (size <= 0) throw ConfigError("vocabulary size must be positive", "vocabulary.size");
    std::vector<std::int64_t> specials;
    for (auto id : {pad, text_marker, speech_marker}) {
        if (id < 0) continue;
        if (id >= size)
            throw ConfigError("special id outside vocabulary", "vocabulary.special");
        specials.push_back(id);
    }
    std::sort(specials.begin(), specials.end());
    if (std::adjacent_find(specials.begin(), specials.end()) != specials.end())
        throw ConfigError("special ids must be distinct", "vocabulary.special");
}

void SynthConfig::validate() const {
    if (mean_word_frames < 1.0)
        throw ConfigError("mean word frames must be >= 1", "synth.mean_word_frames");
    if (mean_sil_frames < 1.0)
        throw ConfigError("mean silence frames must be >= 1", "synth.mean_sil_frames");
    if (sil_prob < 0.0 || sil_prob > 1.0)
        throw ConfigError("silence probability outside [0,1]", "synth.sil_prob");
    if (n_word_types < 1) throw ConfigError("need at least one word type", "synth.n_word_types");
    if (n_word_types > text_vocab - 3)
        throw ConfigError("word types exceed text content ids", "synth.n_word_types");
    if (tokens_per_word < 1 || tokens_per_word > speech_vocab)
        throw ConfigError("tokens per word outside [1, speech_vocab]", "synth.tokens_per_word");
    if (noise_prob < 0.0 || noise_prob > 1.0)
        throw ConfigError("noise probability outside [0,1]", "synth.noise_prob");
    if (speech_vocab < 1) throw ConfigError("empty speech vocabulary", "synth.speech_vocab");
}

namespace {

std::vector<std::int64_t> token_subset(Rng lang, std::int64_t k, std::int64_t vocab) {
    std::vector<std::int64_t> toks;
    toks.reserve(k);
    while (static_cast<std::int64_t>(toks.size()) < k) {
        auto t = static_cast<std::int64_t>(lang.below(static_cast<std::uint64_t>(vocab)));
        if (std::find(toks.begin(), toks.end(), t) == toks.end()) toks.push_back(t);
    }
    return toks;
}

std::vector<std::int64_t> silence_token_subset(const SynthConfig& cfg) {
    Rng lang = Rng(cfg.language_seed).substream("silence_tokens");
    return token_subset(lang, cfg.tokens_per_word, cfg.speech_vocab);
}

// Preferred successors of a word in the bigram chain.
std::vector<std::int64_t> successor_set(std::int64_t word, const SynthConfig& cfg) {
    Rng lang = Rng(cfg.language_seed)
                   .substream("bigram")
                   .substream(static_cast<std::uint64_t>(word));
    const std::int64_t k = std::min<std::int64_t>(8, cfg.n_word_types);
    std::vector<std::int64_t> succ;
    succ.reserve(k);
    while (static_cast<std::int64_t>(succ.size()) < k)
        succ.push_back(
            static_cast<std::int64_t>(lang.below(static_cast<std::uint64_t>(cfg.n_word_types))));
    return succ;
}

// Emit a run of `len` tokens for the given subset: cyclic walk with noise.
void emit_run(Rng& rng, const std::vector<std::int64_t>& subset, std::int64_t len,
              const SynthConfig& cfg, std::vector<std::int64_t>& out) {
    for (std::int64_t i = 0; i < len; ++i) {
        if (cfg.noise_prob > 0.0 && rng.bernoulli(cfg.noise_prob))
            out.push_back(
                static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.speech_vocab))));
        else
            out.push_back(subset[i % subset.size()]);
    }
}

}  // namespace

std::vector<std::int64_t> word_token_subset(std::int64_t word, const SynthConfig& cfg) {
    Rng lang = Rng(cfg.language_seed)
                   .substream("word_tokens")
                   .substream(static_cast<std::uint64_t>(word));
    return token_subset(lang, cfg.tokens_per_word, cfg.speech_vocab);
}

Utterance synth_utterance(std::uint64_t seed, std::int64_t n_words, const SynthConfig& cfg) {
    cfg.validate();
    if (n_words < 1) throw ConfigError("utterance needs at least one word", "synth.n_words");

    Rng rng(seed);
    Rng word_rng = rng.substream("words");
    Rng len_rng = rng.substream("lengths");
    Rng tok_rng = rng.substream("tokens");

    Utterance u;
    std::int64_t word =
        static_cast<std::int64_t>(word_rng.below(static_cast<std::uint64_t>(cfg.n_word_types)));
    const auto sil_subset = silence_token_subset(cfg);

    auto maybe_silence = [&] {
        if (len_rng.bernoulli(cfg.sil_prob)) {
            std::int64_t len = len_rng.shifted_geometric(cfg.mean_sil_frames);
            emit_run(tok_rng, sil_subset, len, cfg, u.speech_tokens);
        }
    };

    maybe_silence();  // optional leading silence
    for (std::int64_t k = 0; k < n_words; ++k) {
        if (k > 0) {
            // bigram step: mostly a preferred successor, sometimes anything
            if (word_rng.bernoulli(0.7)) {
                auto succ = successor_set(word, cfg);
                word = succ[word_rng.below(succ.size())];
            } else {
                word = static_cast<std::int64_t>(
                    word_rng.below(static_cast<std::uint64_t>(cfg.n_word_types)));
            }
            maybe_silence();
        }
        u.text_tokens.push_back(word);
        std::int64_t len = len_rng.shifted_geometric(cfg.mean_word_frames);
        std::int64_t b = static_cast<std::int64_t>(u.speech_tokens.size());
        emit_run(tok_rng, word_token_subset(word, cfg), len, cfg, u.speech_tokens);
        u.alignment.push_back({k, b, b + len - 1});
    }
    maybe_silence();  // optional trailing silence

    return u;
}

std::vector<Utterance> synth_corpus(std::uint64_t seed, std::int64_t n_utterances,
                                    std::int64_t min_words, std::int64_t max_words,
                                    const SynthConfig& cfg) {
    if (min_words < 1 || max_words < min_words)
        throw ConfigError("bad word count range", "synth.words_per_utterance");
    Rng root = Rng(seed).substream("corpus");
    std::vector<Utterance> us;
    us.reserve(n_utterances);
    for (std::int64_t i = 0; i < n_utterances; ++i) {
        Rng item = root.substream(static_cast<std::uint64_t>(i));
        std::int64_t n_words =
            min_words + static_cast<std::int64_t>(
                            item.below(static_cast<std::uint64_t>(max_words - min_words + 1)));
        us.push_back(synth_utterance(item.next(), n_words, cfg));
    }
    return us;
}

void validate_utterance(const Utterance& u) {
    const auto T = static_cast<std::int64_t>(u.speech_tokens.size());
    if (u.alignment.size() != u.text_tokens.size())
        throw AlignmentError("spans and text tokens disagree: " +
                             std::to_string(u.alignment.size()) + " spans for " +
                             std::to_string(u.text_tokens.size()) + " tokens");
    std::int64_t prev_e = -1;
    for (std::size_t k = 0; k < u.alignment.size(); ++k) {
        const auto& s = u.alignment[k];
        if (s.unit != static_cast<std::int64_t>(k))
            throw AlignmentError("span unit indices must be 0..n-1 in order");
        if (s.b > s.e || s.b < 0 || s.e >= T)
            throw AlignmentError("span [" + std::to_string(s.b) + "," + std::to_string(s.e) +
                                 "] outside speech run of length " + std::to_string(T));
        if (s.b <= prev_e) throw AlignmentError("spans overlap or are unsorted");
        prev_e = s.e;
    }
}

std::vector<std::int64_t> tokenize_text(const std::vector<std::int64_t>& words,
                                        const Vocabulary& v) {
    const std::int64_t limit = v.n_content();
    for (auto w : words)
        if (w < 0 || w >= limit)
            throw VocabError("word id " + std::to_string(w) + " outside closed vocabulary of " +
                             std::to_string(limit) + " words");
    return words;
}

std::vector<std::int64_t> detokenize_text(const std::vector<std::int64_t>& tokens,
                                          const Vocabulary& v) {
    return tokenize_text(tokens, v);
}

void write_corpus_jsonl(const std::string& path, const std::vector<Utterance>& us) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& u : us) {
        nlohmann::json rec;
        rec["text_tokens"] = u.text_tokens;
        rec["speech_tokens"] = u.speech_tokens;
        auto spans = nlohmann::json::array();
        for (const auto& s : u.alignment) spans.push_back({s.unit, s.b, s.e});
        rec["spans"] = std::move(spans);
        out << rec.dump() << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

std::vector<Utterance> read_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<Utterance> us;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Utterance u;
        u.text_tokens = rec.at("text_tokens").get<std::vector<std::int64_t>>();
        u.speech_tokens = rec.at("speech_tokens").get<std::vector<std::int64_t>>();
        for (const auto& s : rec.at("spans"))
            u.alignment.push_back({s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>(),
                                   s.at(2).get<std::int64_t>()});
        validate_utterance(u);
        us.push_back(std::move(u));
    }
    return us;
}

}  // namespace lst::corpus
