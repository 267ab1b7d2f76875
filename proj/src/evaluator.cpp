#include "lst/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lst/error.hpp"
#include "lst/interleave.hpp"
#include "lst/rng.hpp"

namespace lst::eval {

namespace {

using json = nlohmann::json;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

interleave::InterleavedSequence to_sequence(const EvalCandidate& c, bool speech) {
    interleave::Run run;
    run.modality = speech ? interleave::Modality::speech : interleave::Modality::text;
    run.tokens = c.tokens;
    if (speech) run.spans = c.spans;
    run.word_begin = 0;
    run.word_end = speech ? static_cast<std::int64_t>(c.spans.size())
                          : static_cast<std::int64_t>(c.tokens.size());
    interleave::InterleavedSequence s;
    s.runs.push_back(std::move(run));
    return s;
}

json candidate_to_json(const EvalCandidate& c) {
    json j;
    j["tokens"] = c.tokens;
    if (!c.spans.empty()) {
        json spans = json::array();
        for (const auto& sp : c.spans) spans.push_back({sp.unit, sp.b, sp.e});
        j["spans"] = std::move(spans);
    }
    return j;
}

EvalCandidate candidate_from_json(const json& j) {
    EvalCandidate c;
    c.tokens = j.at("tokens").get<std::vector<std::int64_t>>();
    if (j.contains("spans")) {
        for (const auto& sp : j.at("spans")) {
            if (!sp.is_array() || sp.size() != 3) throw IoError("span must be a [unit, b, e] triple");
            c.spans.push_back({sp.at(0).get<std::int64_t>(), sp.at(1).get<std::int64_t>(),
                               sp.at(2).get<std::int64_t>()});
        }
    }
    return c;
}

}  // namespace

void EvalRecord::validate() const {
    if (candidates.size() != 2 && candidates.size() != 4)
        throw ConfigError("record needs 2 or 4 candidates", "eval.candidates");
    if (gold < 0 || gold >= static_cast<std::int64_t>(candidates.size()))
        throw ConfigError("gold index out of range", "eval.gold");
    if (modality != "speech" && modality != "text")
        throw ConfigError("unknown modality '" + modality + "'", "eval.modality");
    for (const auto& c : candidates) {
        if (c.tokens.empty()) throw ConfigError("empty candidate", "eval.candidates");
        for (const auto& sp : c.spans)
            if (sp.b > sp.e || sp.b < 0 || sp.e >= static_cast<std::int64_t>(c.tokens.size()))
                throw ConfigError("candidate span outside its tokens", "eval.candidates");
    }
}

std::string records_to_jsonl(const std::vector<EvalRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json j;
        j["modality"] = r.modality;
        j["gold"] = r.gold;
        j["prompt"] = candidate_to_json(r.prompt);
        json cands = json::array();
        for (const auto& c : r.candidates) cands.push_back(candidate_to_json(c));
        j["candidates"] = std::move(cands);
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<EvalRecord> records_from_jsonl(const std::string& text) {
    std::vector<EvalRecord> records;
    std::istringstream in(text);
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            EvalRecord r;
            r.modality = j.at("modality").get<std::string>();
            r.gold = j.at("gold").get<std::int64_t>();
            r.prompt = candidate_from_json(j.at("prompt"));
            for (const auto& c : j.at("candidates")) r.candidates.push_back(candidate_from_json(c));
            r.validate();
            records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw IoError("eval record line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

void write_records(const std::string& path, const std::vector<EvalRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path);
    f << records_to_jsonl(records);
    if (!f) throw IoError("failed writing " + path);
}

std::vector<EvalRecord> read_records(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return records_from_jsonl(ss.str());
}

CandidateScore score_candidate(model::LanguageModel& m, const EvalRecord& rec, std::int64_t idx) {
    if (idx < 0 || idx >= static_cast<std::int64_t>(rec.candidates.size()))
        throw ContractError("candidate index out of range");
    const EvalCandidate& cand = rec.candidates[idx];
    if (cand.tokens.empty()) throw EmptyLossError("empty candidate");
    const bool speech = rec.modality == "speech";
    CandidateScore sc;
    sc.sum_nll = m.candidate_nll(to_sequence(rec.prompt, speech), to_sequence(cand, speech),
                                 &sc.n, &sc.units);
    sc.per_token = sc.sum_nll / static_cast<double>(sc.n);
    return sc;
}

Normalization parse_normalization(const std::string& name) {
    if (name == "sum") return Normalization::sum;
    if (name == "per_token") return Normalization::per_token;
    throw ConfigError("unknown normalization '" + name + "'", "eval.normalization");
}

EvalReport evaluate(model::LanguageModel& m, const std::vector<EvalRecord>& records,
                    Normalization norm) {
    if (records.empty()) throw ConfigError("no eval records", "eval.records");
    EvalReport rep;
    std::int64_t correct = 0;
    double diff_sum = 0.0;
    for (const auto& rec : records) {
        rec.validate();
        std::vector<double> nll(rec.candidates.size());
        bool skipped = false;
        std::int64_t rec_units = 0;
        for (std::size_t c = 0; c < rec.candidates.size(); ++c) {
            try {
                CandidateScore sc = score_candidate(m, rec, static_cast<std::int64_t>(c));
                nll[c] = norm == Normalization::sum ? sc.sum_nll : sc.per_token;
                rec_units += sc.units;
            } catch (const ContractError&) {  // does not fit the context
                skipped = true;
                break;
            }
        }
        if (skipped) {
            rep.n_skipped += 1;
            continue;
        }
        const auto pred = static_cast<std::int64_t>(
            std::min_element(nll.begin(), nll.end()) - nll.begin());
        correct += pred == rec.gold ? 1 : 0;
        double distractors = 0.0;
        for (std::size_t c = 0; c < nll.size(); ++c)
            if (static_cast<std::int64_t>(c) != rec.gold) distractors += nll[c];
        diff_sum += nll[rec.gold] - distractors / static_cast<double>(nll.size() - 1);
        rep.units += rec_units;
        rep.n_scored += 1;
    }
    if (rep.n_scored == 0) throw EmptyLossError("every eval record was skipped");
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.n_scored);
    rep.mean_nll_diff = diff_sum / static_cast<double>(rep.n_scored);
    return rep;
}

ClusterStats cluster_geometry(const std::vector<ad::Tensor>& embeds,
                              const std::vector<std::int64_t>& labels) {
    if (embeds.size() != labels.size())
        throw ContractError("embedding and label counts differ");
    std::int64_t next_label = 0;
    for (auto l : labels) next_label = std::max(next_label, l + 1);
    std::vector<std::int64_t> cluster_size(next_label, 0);
    for (auto l : labels) {
        if (l < 0) throw ContractError("negative cluster label");
        cluster_size[l] += 1;
    }
    for (auto c : cluster_size)
        if (c < 2) throw ContractError("every cluster needs at least two members");

    ClusterStats st;
    st.n_words = next_label;
    st.n_embeddings = static_cast<std::int64_t>(embeds.size());
    if (st.n_words < 2) throw ContractError("cluster stats need two or more clusters");

    std::vector<std::vector<double>> points;  // unit-normalized
    points.reserve(embeds.size());
    for (const auto& e : embeds) {
        double sq = 0.0;
        for (std::int64_t i = 0; i < e.numel(); ++i) sq += e[i] * e[i];
        const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
        std::vector<double> p(e.numel());
        for (std::int64_t i = 0; i < e.numel(); ++i) p[i] = e[i] * inv;
        points.push_back(std::move(p));
    }
    const std::vector<std::int64_t>& label = labels;

    const auto n = static_cast<std::int64_t>(points.size());
    double within_sum = 0.0, between_sum = 0.0, sil_sum = 0.0;
    std::int64_t within_n = 0, between_n = 0;
    std::vector<double> dot_by_cluster(next_label);
    for (std::int64_t i = 0; i < n; ++i) {
        std::fill(dot_by_cluster.begin(), dot_by_cluster.end(), 0.0);
        for (std::int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double dot = 0.0;
            const auto& a = points[i];
            const auto& b = points[j];
            for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
            dot_by_cluster[label[j]] += dot;
            if (j > i) {
                if (label[j] == label[i]) {
                    within_sum += dot;
                    within_n += 1;
                } else {
                    between_sum += dot;
                    between_n += 1;
                }
            }
        }
        const double a_dist =
            1.0 - dot_by_cluster[label[i]] / static_cast<double>(cluster_size[label[i]] - 1);
        double b_dist = 0.0;
        bool first = true;
        for (std::int64_t c = 0; c < next_label; ++c) {
            if (c == label[i]) continue;
            const double d = 1.0 - dot_by_cluster[c] / static_cast<double>(cluster_size[c]);
            if (first || d < b_dist) b_dist = d;
            first = false;
        }
        const double denom = std::max(a_dist, b_dist);
        sil_sum += denom > 0.0 ? (b_dist - a_dist) / denom : 0.0;
    }
    st.within = within_n > 0 ? within_sum / within_n : 0.0;
    st.between = between_n > 0 ? between_sum / between_n : 0.0;
    st.silhouette = sil_sum / static_cast<double>(n);
    return st;
}

ClusterStats cluster_stats(model::LstModel& m, const std::vector<corpus::Utterance>& utts,
                           std::int64_t max_per_word,
                           const std::vector<std::int64_t>& word_set) {
    std::map<std::int64_t, std::vector<ad::Tensor>> groups;
    for (const auto& u : utts) {
        for (const auto& sp : u.alignment) {
            if (sp.unit < 0 || sp.unit >= static_cast<std::int64_t>(u.text_tokens.size()))
                throw AlignmentError("span references a missing text token");
            const std::int64_t wid = u.text_tokens[sp.unit];
            if (!word_set.empty() &&
                std::find(word_set.begin(), word_set.end(), wid) == word_set.end())
                continue;
            auto& g = groups[wid];
            if (max_per_word > 0 && static_cast<std::int64_t>(g.size()) >= max_per_word) continue;
            std::vector<std::int64_t> frames(u.speech_tokens.begin() + sp.b,
                                             u.speech_tokens.begin() + sp.e + 1);
            g.push_back(m.word_patch_embedding(frames));
        }
    }
    std::vector<ad::Tensor> embeds;
    std::vector<std::int64_t> labels;
    std::int64_t excluded = 0, next = 0;
    for (auto& [wid, g] : groups) {
        if (g.size() < 2) {  // a lone occurrence supports no within-word pair
            ++excluded;
            continue;
        }
        for (auto& e : g) {
            embeds.push_back(std::move(e));
            labels.push_back(next);
        }
        ++next;
    }
    if (next < 2)
        throw ContractError("cluster stats need two or more words with repeated occurrences");
    ClusterStats st = cluster_geometry(embeds, labels);
    st.excluded_words = excluded;
    return st;
}

std::vector<std::int64_t> top_words(const std::vector<corpus::Utterance>& utts,
                                    std::int64_t n) {
    if (n < 1) throw ConfigError("need a positive word count", "eval.top_words");
    std::map<std::int64_t, std::int64_t> counts;
    for (const auto& u : utts)
        for (const auto& sp : u.alignment) {
            if (sp.unit < 0 || sp.unit >= static_cast<std::int64_t>(u.text_tokens.size()))
                throw AlignmentError("span references a missing text token");
            ++counts[u.text_tokens[sp.unit]];
        }
    std::vector<std::pair<std::int64_t, std::int64_t>> order(counts.begin(), counts.end());
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (static_cast<std::int64_t>(order.size()) > n) order.resize(static_cast<std::size_t>(n));
    std::vector<std::int64_t> ids;
    ids.reserve(order.size());
    for (const auto& [wid, cnt] : order) ids.push_back(wid);
    return ids;
}

StabilityReport stability_report(const RunFn& fn, const std::vector<std::uint64_t>& seeds) {
    if (seeds.size() < 2) throw ConfigError("need at least two seeds", "eval.seeds");
    StabilityReport rep;
    std::map<std::string, std::vector<double>> cols;
    for (auto seed : seeds) {
        try {
            for (const auto& [k, v] : fn(seed)) cols[k].push_back(v);
        } catch (const Error&) {
            rep.partial = true;
            rep.failures += 1;
        }
    }
    for (const auto& [k, vals] : cols) {
        const auto n = static_cast<double>(vals.size());
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double stddev = vals.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
        rep.rows.push_back({k, mean, stddev, static_cast<std::int64_t>(vals.size())});
    }
    return rep;
}

std::string report_to_csv(const StabilityReport& rep) {
    std::string out = "metric,mean,std,n_seeds\n";
    for (const auto& r : rep.rows) {
        out += r.metric;
        out += ',';
        out += fmt(r.mean);
        out += ',';
        out += fmt(r.stddev);
        out += ',';
        out += std::to_string(r.n_seeds);
        out += '\n';
    }
    return out;
}

void write_report(const std::string& path, const StabilityReport& rep) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path);
    f << report_to_csv(rep);
    if (!f) throw IoError("failed writing " + path);
}

std::vector<EvalRecord> make_eval_records(const std::vector<corpus::Utterance>& utts,
                                          const EvalGenConfig& cfg) {
    if (cfg.n_choices != 2 && cfg.n_choices != 4)
        throw ConfigError("n_choices must be 2 or 4", "eval.n_choices");
    if (cfg.modality != "speech" && cfg.modality != "text")
        throw ConfigError("unknown modality '" + cfg.modality + "'", "eval.modality");
    if (static_cast<std::int64_t>(utts.size()) < cfg.n_choices)
        throw ConfigError("need at least n_choices utterances", "eval.corpus");

    const bool speech = cfg.modality == "speech";
    auto tokens_of = [&](const corpus::Utterance& u) -> const std::vector<std::int64_t>& {
        return speech ? u.speech_tokens : u.text_tokens;
    };
    auto continuation = [&](const corpus::Utterance& u) {
        const auto& t = tokens_of(u);
        return std::vector<std::int64_t>(t.begin() + static_cast<std::int64_t>(t.size()) / 2,
                                         t.end());
    };

    Rng rng = Rng(cfg.seed).substream("evalgen");
    std::vector<EvalRecord> records;
    for (std::size_t i = 0; i < utts.size(); ++i) {
        const auto& toks = tokens_of(utts[i]);
        if (toks.size() < 4) continue;
        std::vector<std::vector<std::int64_t>> cands;
        cands.push_back(continuation(utts[i]));  // gold first, shuffled below
        std::int64_t tries = 0;
        while (static_cast<std::int64_t>(cands.size()) < cfg.n_choices && tries < 1000) {
            ++tries;
            const auto j = static_cast<std::size_t>(rng.below(utts.size()));
            if (j == i || tokens_of(utts[j]).size() < 4) continue;
            cands.push_back(continuation(utts[j]));
        }
        if (static_cast<std::int64_t>(cands.size()) < cfg.n_choices) continue;

        std::size_t min_len = cands[0].size();
        for (const auto& c : cands) min_len = std::min(min_len, c.size());
        if (cfg.match_length)
            for (auto& c : cands) c.resize(min_len);

        EvalRecord rec;
        rec.modality = cfg.modality;
        rec.prompt.tokens.assign(toks.begin(), toks.begin() + static_cast<std::int64_t>(toks.size()) / 2);
        rec.gold = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.n_choices)));
        rec.candidates.resize(cfg.n_choices);
        rec.candidates[rec.gold].tokens = std::move(cands[0]);
        std::size_t src = 1;
        for (std::int64_t c = 0; c < cfg.n_choices; ++c)
            if (c != rec.gold) rec.candidates[c].tokens = std::move(cands[src++]);
        rec.validate();
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace lst::eval
