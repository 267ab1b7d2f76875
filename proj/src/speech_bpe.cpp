#include "lst/speech_bpe.hpp"

#include <fstream>
#include <map>
#include <unordered_map>

#include "json.hpp"

namespace lst::bpe {

namespace {

using Pair = std::pair<std::int64_t, std::int64_t>;

// Replace occurrences of `p` with `id`, left to right without overlap.
std::vector<std::int64_t> apply_merge(const std::vector<std::int64_t>& seq, Pair p,
                                      std::int64_t id) {
    std::vector<std::int64_t> out;
    out.reserve(seq.size());
    std::size_t i = 0;
    while (i < seq.size()) {
        if (i + 1 < seq.size() && seq[i] == p.first && seq[i + 1] == p.second) {
            out.push_back(id);
            i += 2;
        } else {
            out.push_back(seq[i]);
            ++i;
        }
    }
    return out;
}

struct PairHash {
    std::size_t operator()(const Pair& p) const {
        return std::hash<std::int64_t>()(p.first * 1000003 + p.second);
    }
};

}  // namespace

SpeechBpe train_speech_bpe(const std::vector<std::vector<std::int64_t>>& corpus,
                           std::int64_t base_vocab, std::int64_t vocab_size) {
    if (vocab_size <= base_vocab)
        throw ConfigError("target vocabulary must exceed the base vocabulary of " +
                              std::to_string(base_vocab),
                          "bpe.vocab_size");
    for (const auto& seq : corpus)
        for (auto t : seq)
            if (t < 0 || t >= base_vocab)
                throw IndexError("token " + std::to_string(t) + " outside base vocabulary");

    SpeechBpe table;
    table.base_vocab = base_vocab;
    std::vector<std::vector<std::int64_t>> work = corpus;

    while (table.vocab_size() < vocab_size) {
        // ordered map: ties resolve toward the smallest pair
        std::map<Pair, std::int64_t> counts;
        for (const auto& seq : work)
            for (std::size_t i = 0; i + 1 < seq.size(); ++i)
                ++counts[{seq[i], seq[i + 1]}];
        Pair best{-1, -1};
        std::int64_t best_count = 1;  // a pair must repeat to be worth a merge
        for (const auto& [p, c] : counts)
            if (c > best_count) {
                best = p;
                best_count = c;
            }
        if (best.first < 0) break;
        const std::int64_t id = table.vocab_size();
        table.merges.push_back(best);
        for (auto& seq : work) seq = apply_merge(seq, best, id);
    }
    return table;
}

std::vector<std::int64_t> SpeechBpe::encode(const std::vector<std::int64_t>& seq) const {
    std::unordered_map<Pair, std::size_t, PairHash> rank;
    rank.reserve(merges.size());
    for (std::size_t r = 0; r < merges.size(); ++r) rank.emplace(merges[r], r);

    std::vector<std::int64_t> out = seq;
    while (out.size() >= 2) {
        std::size_t best_rank = merges.size();
        for (std::size_t i = 0; i + 1 < out.size(); ++i) {
            auto it = rank.find({out[i], out[i + 1]});
            if (it != rank.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == merges.size()) break;
        out = apply_merge(out, merges[best_rank],
                          base_vocab + static_cast<std::int64_t>(best_rank));
    }
    return out;
}

std::vector<std::int64_t> SpeechBpe::decode(const std::vector<std::int64_t>& seq) const {
    std::vector<std::int64_t> out;
    out.reserve(seq.size() * 2);
    // iterative expansion via an explicit stack keeps long merges safe
    std::vector<std::int64_t> stack;
    for (auto t : seq) {
        stack.push_back(t);
        while (!stack.empty()) {
            std::int64_t id = stack.back();
            stack.pop_back();
            if (id < base_vocab) {
                out.push_back(id);
            } else {
                const auto& m = merges.at(static_cast<std::size_t>(id - base_vocab));
                stack.push_back(m.second);
                stack.push_back(m.first);
            }
        }
    }
    return out;
}

double SpeechBpe::compression_ratio(
    const std::vector<std::vector<std::int64_t>>& corpus) const {
    std::int64_t raw = 0, enc = 0;
    for (const auto& seq : corpus) {
        raw += static_cast<std::int64_t>(seq.size());
        enc += static_cast<std::int64_t>(encode(seq).size());
    }
    return enc == 0 ? 1.0 : static_cast<double>(raw) / static_cast<double>(enc);
}

void SpeechBpe::save(const std::string& path) const {
    nlohmann::json j;
    j["base_vocab"] = base_vocab;
    auto arr = nlohmann::json::array();
    for (const auto& m : merges) arr.push_back({m.first, m.second});
    j["merges"] = std::move(arr);
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

SpeechBpe SpeechBpe::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
    SpeechBpe table;
    table.base_vocab = j.at("base_vocab").get<std::int64_t>();
    for (const auto& m : j.at("merges"))
        table.merges.emplace_back(m.at(0).get<std::int64_t>(), m.at(1).get<std::int64_t>());
    return table;
}

}  // namespace lst::bpe
