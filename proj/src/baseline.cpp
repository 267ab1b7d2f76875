#include "lst/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "transformer_common.hpp"

namespace lst::model {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using detail::attention;
using detail::causal_mask;
using detail::ffn;
using detail::gaussian;
using interleave::InterleavedSequence;
using interleave::Modality;

namespace {

const Var& P(const ParamVars& pv, const std::string& name) {
    auto it = pv.find(name);
    if (it == pv.end()) throw ContractError("unbound parameter: " + name);
    return it->second;
}

detail::AttnParams attn_params(const ParamVars& pv, const std::string& prefix) {
    return {P(pv, prefix + ".wq"), P(pv, prefix + ".wk"), P(pv, prefix + ".wv"),
            P(pv, prefix + ".wo")};
}

double nll_from_logits_row(const Tensor& logits, std::int64_t row, std::int64_t target) {
    const std::int64_t V = logits.cols();
    if (target < 0 || target >= V) throw IndexError("score target outside vocabulary");
    const double* p = logits.data() + row * V;
    double mx = p[0];
    for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, p[j]);
    double se = 0.0;
    for (std::int64_t j = 0; j < V; ++j) se += std::exp(p[j] - mx);
    return std::log(se) + mx - p[target];
}

}  // namespace

BaselineModel::BaselineModel(BaselineConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng init = Rng(init_seed).substream("init");
    const std::int64_t d = cfg_.d_model;
    auto weight = [&](const std::string& name, std::vector<std::int64_t> shape) {
        Rng sub = init.substream(name);
        params_[name] = gaussian(sub, std::move(shape), cfg_.init_scale);
    };
    auto gain = [&](const std::string& name, std::int64_t dim) {
        params_[name] = Tensor::full({1, dim}, 1.0);
    };
    weight("embed", {merged_vocab(), d});
    for (std::int64_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "glob." + std::to_string(l) + ".";
        gain(p + "attn.norm", d);
        weight(p + "attn.wq", {d, d});
        weight(p + "attn.wk", {d, d});
        weight(p + "attn.wv", {d, d});
        weight(p + "attn.wo", {d, d});
        gain(p + "ffn.norm", d);
        weight(p + "ffn.w1", {d, 2 * d});
        weight(p + "ffn.w3", {d, 2 * d});
        weight(p + "ffn.w2", {2 * d, d});
    }
    gain("glob.final_norm", d);
    weight("head", {d, merged_vocab()});
}

std::int64_t BaselineModel::speech_dim() const {
    if (cfg_.kind == "bpe") return cfg_.bpe_vocab;
    return cfg_.speech_vocab;
}

std::int64_t BaselineModel::merged_vocab() const { return cfg_.text_vocab + speech_dim(); }

std::int64_t BaselineModel::merged_id(std::int64_t token, bool is_speech) const {
    if (!is_speech) {
        if (token < 0 || token >= cfg_.text_vocab) throw VocabError("text id outside vocabulary");
        return token;
    }
    if (token < 0 || token >= speech_dim()) throw VocabError("speech id outside merged range");
    return cfg_.text_vocab + token;
}

InterleavedSequence BaselineModel::transform(const InterleavedSequence& s) const {
    if (cfg_.kind != "bpe") return s;
    if (!bpe_) throw ConfigError("bpe baseline needs a speech bpe attached first", "kind");
    InterleavedSequence out;
    out.runs.reserve(s.runs.size());
    for (const auto& run : s.runs) {
        if (run.modality == Modality::text) {
            out.runs.push_back(run);
            continue;
        }
        interleave::Run r;
        r.modality = Modality::speech;
        r.tokens = bpe_->encode(run.tokens);
        r.word_begin = run.word_begin;
        r.word_end = run.word_end;
        out.runs.push_back(std::move(r));  // frame-space spans no longer apply
    }
    return out;
}

ParamVars BaselineModel::bind(Tape& t) const {
    ParamVars pv;
    for (const auto& [name, tensor] : params_) pv.emplace(name, t.leaf(tensor, true));
    return pv;
}

Var BaselineModel::hidden_from_embeds(Tape& t, const ParamVars& pv, Var embeds,
                                      const std::vector<std::int64_t>& positions) const {
    const std::int64_t M = embeds.value().rows();
    if (static_cast<std::int64_t>(positions.size()) != M)
        throw ContractError("positions do not match embed rows");
    auto mask = causal_mask(M);
    Var x = embeds;
    for (std::int64_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "glob." + std::to_string(l) + ".";
        Var xn = t.rms_norm(x, P(pv, p + "attn.norm"));
        x = t.add(x, attention(t, xn, xn, attn_params(pv, p + "attn"), cfg_.n_heads, mask,
                               &positions, &positions, cfg_.rope_theta));
        Var fn = t.rms_norm(x, P(pv, p + "ffn.norm"));
        x = t.add(x, ffn(t, fn, P(pv, p + "ffn.w1"), P(pv, p + "ffn.w3"), P(pv, p + "ffn.w2")));
    }
    return t.rms_norm(x, P(pv, "glob.final_norm"));
}

Var BaselineModel::hidden(Tape& t, const ParamVars& pv,
                          const std::vector<std::int64_t>& merged_ids) const {
    Var emb = t.embedding_lookup(P(pv, "embed"), merged_ids);
    std::vector<std::int64_t> pos(merged_ids.size());
    std::iota(pos.begin(), pos.end(), 0);
    return hidden_from_embeds(t, pv, emb, pos);
}

BaselineModel::RowOutput BaselineModel::forward_row(Tape& t, const ParamVars& pv,
                                                    const interleave::PackedRow& row) const {
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    std::vector<std::int64_t> ids(row.used);
    for (std::int64_t i = 0; i < row.used; ++i)
        ids[i] = merged_id(row.tokens[i], row.is_speech[i] != 0);

    RowOutput out;
    out.hidden_all = hidden(t, pv, ids);

    std::vector<Var> hrows;
    for (std::int64_t pos = 1; pos < row.used; ++pos) {
        const std::int64_t tok = row.tokens[pos];
        const bool content = row.loss_mask[pos] != 0;
        const bool marker = row.is_speech[pos] == 0 &&
                            (tok == vocab.text_marker || tok == vocab.speech_marker);
        if (!(content || marker)) continue;
        hrows.push_back(t.slice_rows(out.hidden_all, pos - 1, pos));
        out.targets.push_back(ids[pos]);
        out.positions.push_back(pos);
        out.target_is_speech.push_back(row.is_speech[pos]);
    }
    if (!hrows.empty())
        out.logits = t.matmul(t.concat_rows(hrows), P(pv, "head"));
    return out;
}

LossStats BaselineModel::batch_loss(const std::vector<InterleavedSequence>& seqs,
                                    const TrainContext& ctx,
                                    std::map<std::string, Tensor>* grads) {
    (void)ctx;
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    std::vector<InterleavedSequence> xs;
    xs.reserve(seqs.size());
    for (const auto& s : seqs) xs.push_back(transform(s));
    auto singleton = [](const std::vector<std::int64_t>& frames,
                        const std::vector<corpus::AlignmentSpan>&) {
        return patching::static_patch(static_cast<std::int64_t>(frames.size()), 1);
    };
    auto batch = interleave::pack_batch(xs, cfg_.context_len, vocab, singleton);

    Tape t;
    ParamVars pv = bind(t);
    LossStats st;
    st.truncations = batch.truncations;
    std::vector<Var> parts;
    double text_sum = 0.0, speech_sum = 0.0;
    for (const auto& row : batch.rows) {
        RowOutput ro = forward_row(t, pv, row);
        if (ro.targets.empty()) continue;
        // One CE over the text slots, one over the speech slots, same rows.
        std::vector<std::int64_t> text_t(ro.targets.size(), -1), speech_t(ro.targets.size(), -1);
        for (std::size_t i = 0; i < ro.targets.size(); ++i)
            (ro.target_is_speech[i] ? speech_t : text_t)[i] = ro.targets[i];
        std::int64_t cnt = 0;
        Var ce_text = t.softmax_cross_entropy_sum(ro.logits, text_t, -1, &cnt);
        st.n_text += cnt;
        text_sum += ce_text.value()[0];
        parts.push_back(ce_text);
        Var ce_speech = t.softmax_cross_entropy_sum(ro.logits, speech_t, -1, &cnt);
        st.n_speech += cnt;
        speech_sum += ce_speech.value()[0];
        parts.push_back(ce_speech);

        st.global_units += row.used;
        for (std::int64_t i = 0; i < row.used; ++i) {
            if (!row.loss_mask[i]) continue;
            ++st.raw_tokens;
            if (row.is_speech[i]) {
                ++st.speech_units;
                if (cfg_.kind == "bpe")
                    st.speech_frames +=
                        static_cast<std::int64_t>(bpe_->decode({row.tokens[i]}).size());
                else
                    ++st.speech_frames;
            }
        }
    }
    st.text_units = st.global_units - st.speech_units;
    if (cfg_.kind == "bpe")  // raw data consumed counts decoded frames
        st.raw_tokens += st.speech_frames - st.speech_units;
    if (st.n_text + st.n_speech == 0) throw EmptyLossError("batch has no scorable positions");

    Var total = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) total = t.add(total, parts[i]);
    Var loss = t.scale(total, 1.0 / static_cast<double>(st.n_text + st.n_speech));
    st.loss = loss.value()[0];
    st.text_loss = st.n_text ? text_sum / static_cast<double>(st.n_text) : 0.0;
    st.speech_loss = st.n_speech ? speech_sum / static_cast<double>(st.n_speech) : 0.0;
    if (!std::isfinite(st.loss)) throw DivergenceError("non-finite loss");

    if (grads) {
        t.backward(loss);
        for (auto& [name, var] : pv) {
            auto it = grads->find(name);
            if (it == grads->end())
                it = grads->emplace(name, Tensor::zeros(params_.at(name).shape())).first;
            const Tensor& g = var.grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
        }
    }
    return st;
}

LossStats BaselineModel::loss_and_grad(const std::vector<InterleavedSequence>& seqs,
                                       const TrainContext& ctx,
                                       std::map<std::string, Tensor>& grads) {
    return batch_loss(seqs, ctx, &grads);
}

LossStats BaselineModel::loss_only(const std::vector<InterleavedSequence>& seqs,
                                   const TrainContext& ctx) {
    return batch_loss(seqs, ctx, nullptr);
}

double BaselineModel::candidate_nll(const InterleavedSequence& prompt,
                                    const InterleavedSequence& cand, std::int64_t* n_scored,
                                    std::int64_t* units) {
    // Prompt and candidate are transformed independently so no bpe merge can
    // straddle the scoring boundary.
    ScoredConcat sc = concat_for_scoring(transform(prompt), transform(cand));
    if (sc.seq.rendered_length() > cfg_.context_len)
        throw ContractError("prompt plus candidate exceed the context window");
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    auto singleton = [](const std::vector<std::int64_t>& frames,
                        const std::vector<corpus::AlignmentSpan>&) {
        return patching::static_patch(static_cast<std::int64_t>(frames.size()), 1);
    };
    auto batch = interleave::pack_batch({sc.seq}, cfg_.context_len, vocab, singleton);
    const auto& row = batch.rows.at(0);

    Tape t;
    ParamVars pv = bind(t);
    RowOutput ro = forward_row(t, pv, row);

    double nll = 0.0;
    std::int64_t scored = 0;
    std::int64_t pos = 0;
    for (std::size_t r = 0; r < sc.seq.runs.size(); ++r) {
        const auto& run = sc.seq.runs[r];
        pos += 1;  // marker
        const auto len = static_cast<std::int64_t>(run.tokens.size());
        std::int64_t first = len;
        if (r > sc.cand_first_run) first = 0;
        else if (r == sc.cand_first_run) first = sc.cand_token_offset;
        for (std::int64_t i = first; i < len; ++i) {
            const std::int64_t tl = pos + i;
            auto it = std::lower_bound(ro.positions.begin(), ro.positions.end(), tl);
            if (it == ro.positions.end() || *it != tl)
                throw ContractError("candidate position was not scored");
            const auto idx = static_cast<std::int64_t>(it - ro.positions.begin());
            nll += nll_from_logits_row(ro.logits.value(), idx,
                                       merged_id(run.tokens[i], run.modality == Modality::speech));
            ++scored;
        }
        pos += len;
    }
    if (scored == 0) throw EmptyLossError("candidate has no scorable content");
    if (n_scored) *n_scored = scored;
    if (units) *units = row.used;
    return nll;
}

}  // namespace lst::model
