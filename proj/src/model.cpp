#include "lst/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "transformer_common.hpp"

namespace lst::model {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using detail::AttnParams;
using detail::attention;
using detail::causal_mask;
using detail::ffn;
using detail::gaussian;
using detail::window_causal_mask;
using interleave::InterleavedSequence;
using interleave::Modality;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& msg, const std::string& field) {
    if (!ok) throw ConfigError(msg, field);
}

template <typename T>
void read_field(const json& v, const std::string& key, T& out) {
    try {
        out = v.get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value: ") + e.what(), key);
    }
}

json parse_object(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("not valid JSON", "<root>");
    if (!j.is_object()) throw ConfigError("config must be a JSON object", "<root>");
    return j;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const Var& P(const ParamVars& pv, const std::string& name) {
    auto it = pv.find(name);
    if (it == pv.end()) throw ContractError("unbound parameter: " + name);
    return it->second;
}

AttnParams attn_params(const ParamVars& pv, const std::string& prefix) {
    return {P(pv, prefix + ".wq"), P(pv, prefix + ".wk"), P(pv, prefix + ".wv"),
            P(pv, prefix + ".wo")};
}

// -log p(target) read numerically off one logits row; no tape involvement.
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

std::vector<std::int64_t> iota_positions(std::int64_t n) {
    std::vector<std::int64_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    return pos;
}

}  // namespace

// ----------------------------------------------------------------- configs

void ModelConfig::validate() const {
    require(d_local > 0, "must be positive", "d_local");
    require(d_global > 0, "must be positive", "d_global");
    require(n_heads > 0, "must be positive", "n_heads");
    require(d_local % n_heads == 0, "must be divisible by n_heads", "d_local");
    require(d_global % n_heads == 0, "must be divisible by n_heads", "d_global");
    require((d_local / n_heads) % 2 == 0, "head dim must be even for rotary pairs", "d_local");
    require((d_global / n_heads) % 2 == 0, "head dim must be even for rotary pairs", "d_global");
    require(n_layers_enc >= 1, "must be >= 1", "n_layers_enc");
    require(n_layers_global >= 1, "must be >= 1", "n_layers_global");
    require(n_layers_dec >= 1, "must be >= 1", "n_layers_dec");
    require(window >= 0, "must be >= 0", "window");
    require(rope_theta > 0, "must be positive", "rope_theta");
    require(speech_vocab >= 2, "needs at least 2 ids", "speech_vocab");
    require(text_vocab >= 4, "needs content plus pad and markers", "text_vocab");
    require(context_len >= 8, "must be >= 8", "context_len");
    require(patch_size >= 1, "must be >= 1", "patch_size");
    (void)parsed_patch_mode();
    if (patch_mode == "curriculum") patching::CurriculumSchedule{tau1, tau2}.validate();
    require(init_scale > 0, "must be positive", "init_scale");
    require(!local_decoder_predicts_text,
            "text prediction goes through the global head; this variant is not supported",
            "local_decoder_predicts_text");
}

patching::PatchMode ModelConfig::parsed_patch_mode() const {
    if (patch_mode == "static") return patching::PatchMode::static_;
    if (patch_mode == "aligned" || patch_mode == "aligned_merged")
        return patching::PatchMode::aligned;
    if (patch_mode == "mixed") return patching::PatchMode::mixed;
    if (patch_mode == "curriculum") return patching::PatchMode::curriculum;
    if (patch_mode == "bpe") return patching::PatchMode::bpe;
    throw ConfigError("unknown patch mode '" + patch_mode + "'", "patch_mode");
}

patching::SilenceMode ModelConfig::silence_mode() const {
    return patch_mode == "aligned_merged" ? patching::SilenceMode::merged
                                          : patching::SilenceMode::separate;
}

std::string ModelConfig::to_json() const {
    json j;
    j["d_local"] = d_local;
    j["d_global"] = d_global;
    j["n_layers_enc"] = n_layers_enc;
    j["n_layers_global"] = n_layers_global;
    j["n_layers_dec"] = n_layers_dec;
    j["n_heads"] = n_heads;
    j["window"] = window;
    j["rope_theta"] = rope_theta;
    j["speech_vocab"] = speech_vocab;
    j["text_vocab"] = text_vocab;
    j["context_len"] = context_len;
    j["patch_mode"] = patch_mode;
    j["patch_size"] = patch_size;
    j["tau1"] = tau1;
    j["tau2"] = tau2;
    j["predict_markers"] = predict_markers;
    j["local_decoder_predicts_text"] = local_decoder_predicts_text;
    j["init_scale"] = init_scale;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    json j = parse_object(text);
    ModelConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "d_local") read_field(v, key, c.d_local);
        else if (key == "d_global") read_field(v, key, c.d_global);
        else if (key == "n_layers_enc") read_field(v, key, c.n_layers_enc);
        else if (key == "n_layers_global") read_field(v, key, c.n_layers_global);
        else if (key == "n_layers_dec") read_field(v, key, c.n_layers_dec);
        else if (key == "n_heads") read_field(v, key, c.n_heads);
        else if (key == "window") read_field(v, key, c.window);
        else if (key == "rope_theta") read_field(v, key, c.rope_theta);
        else if (key == "speech_vocab") read_field(v, key, c.speech_vocab);
        else if (key == "text_vocab") read_field(v, key, c.text_vocab);
        else if (key == "context_len") read_field(v, key, c.context_len);
        else if (key == "patch_mode") read_field(v, key, c.patch_mode);
        else if (key == "patch_size") read_field(v, key, c.patch_size);
        else if (key == "tau1") read_field(v, key, c.tau1);
        else if (key == "tau2") read_field(v, key, c.tau2);
        else if (key == "predict_markers") read_field(v, key, c.predict_markers);
        else if (key == "local_decoder_predicts_text")
            read_field(v, key, c.local_decoder_predicts_text);
        else if (key == "init_scale") read_field(v, key, c.init_scale);
        else throw ConfigError("unknown config field", key);
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
    return from_json_text(slurp(path));
}

void BaselineConfig::validate() const {
    require(kind == "base" || kind == "bpe", "must be 'base' or 'bpe'", "kind");
    require(d_model > 0, "must be positive", "d_model");
    require(n_heads > 0, "must be positive", "n_heads");
    require(d_model % n_heads == 0, "must be divisible by n_heads", "d_model");
    require((d_model / n_heads) % 2 == 0, "head dim must be even for rotary pairs", "d_model");
    require(n_layers >= 1, "must be >= 1", "n_layers");
    require(rope_theta > 0, "must be positive", "rope_theta");
    require(speech_vocab >= 0, "must be >= 0 (0 = text-only)", "speech_vocab");
    require(text_vocab >= 4, "needs content plus pad and markers", "text_vocab");
    require(context_len >= 8, "must be >= 8", "context_len");
    if (kind == "bpe") {
        require(speech_vocab >= 1, "bpe baseline needs a speech vocabulary", "speech_vocab");
        require(bpe_vocab > speech_vocab, "must exceed speech_vocab", "bpe_vocab");
    }
    require(init_scale > 0, "must be positive", "init_scale");
}

std::string BaselineConfig::to_json() const {
    json j;
    j["kind"] = kind;
    j["d_model"] = d_model;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["rope_theta"] = rope_theta;
    j["speech_vocab"] = speech_vocab;
    j["text_vocab"] = text_vocab;
    j["context_len"] = context_len;
    j["bpe_vocab"] = bpe_vocab;
    j["init_scale"] = init_scale;
    return j.dump(2);
}

BaselineConfig BaselineConfig::from_json_text(const std::string& text) {
    json j = parse_object(text);
    BaselineConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "kind") read_field(v, key, c.kind);
        else if (key == "d_model") read_field(v, key, c.d_model);
        else if (key == "n_layers") read_field(v, key, c.n_layers);
        else if (key == "n_heads") read_field(v, key, c.n_heads);
        else if (key == "rope_theta") read_field(v, key, c.rope_theta);
        else if (key == "speech_vocab") read_field(v, key, c.speech_vocab);
        else if (key == "text_vocab") read_field(v, key, c.text_vocab);
        else if (key == "context_len") read_field(v, key, c.context_len);
        else if (key == "bpe_vocab") read_field(v, key, c.bpe_vocab);
        else if (key == "init_scale") read_field(v, key, c.init_scale);
        else throw ConfigError("unknown config field", key);
    }
    c.validate();
    return c;
}

BaselineConfig BaselineConfig::from_json_file(const std::string& path) {
    return from_json_text(slurp(path));
}

// --------------------------------------------------------------- PatchPlan

PatchPlan PatchPlan::from_row(const interleave::PackedRow& row) {
    PatchPlan plan;
    plan.T = row.used;
    plan.unit_of.assign(static_cast<std::size_t>(row.used), -1);
    std::size_t next_run = 0;
    std::int64_t t = 0;
    while (t < plan.T) {
        if (next_run < row.runs.size() && row.runs[next_run].begin == t) {
            const auto& pr = row.runs[next_run];
            for (std::int64_t si = 0; si < pr.seg.count(); ++si) {
                const auto& s = pr.seg.segments[si];
                PlanUnit u{pr.begin + s.start, pr.begin + s.end, true,
                           static_cast<std::int64_t>(next_run), si};
                for (std::int64_t k = u.start; k <= u.end; ++k)
                    plan.unit_of[k] = static_cast<std::int64_t>(plan.units.size());
                plan.units.push_back(u);
            }
            t = pr.begin + pr.length;
            ++next_run;
        } else {
            plan.unit_of[t] = static_cast<std::int64_t>(plan.units.size());
            plan.units.push_back({t, t, false, -1, -1});
            ++t;
        }
    }
    return plan;
}

void PatchPlan::validate() const {
    if (static_cast<std::int64_t>(unit_of.size()) != T)
        throw ContractError("patch plan: unit map length mismatch");
    std::int64_t expect_start = 0;
    for (std::size_t u = 0; u < units.size(); ++u) {
        const auto& pu = units[u];
        if (pu.start != expect_start || pu.end < pu.start || pu.end >= T)
            throw ContractError("patch plan: units must tile the timeline in order");
        if (pu.is_patch && (pu.run_index < 0 || pu.seg_index < 0))
            throw ContractError("patch plan: patch unit missing run metadata");
        if (!pu.is_patch && pu.end != pu.start)
            throw ContractError("patch plan: non-patch unit must be a singleton");
        for (std::int64_t k = pu.start; k <= pu.end; ++k)
            if (unit_of[k] != static_cast<std::int64_t>(u))
                throw ContractError("patch plan: position maps to the wrong unit");
        expect_start = pu.end + 1;
    }
    if (expect_start != T) throw ContractError("patch plan: timeline not fully covered");
}

// ----------------------------------------------------------------- LstModel

std::int64_t LanguageModel::param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

LstModel::LstModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng init = Rng(init_seed).substream("init");
    const std::int64_t dl = cfg_.d_local, dg = cfg_.d_global;
    auto weight = [&](const std::string& name, std::vector<std::int64_t> shape) {
        Rng sub = init.substream(name);
        params_[name] = gaussian(sub, std::move(shape), cfg_.init_scale);
    };
    auto gain = [&](const std::string& name, std::int64_t d) {
        params_[name] = Tensor::full({1, d}, 1.0);
    };
    weight("text_embed", {cfg_.text_vocab, dg});
    weight("speech_embed", {cfg_.speech_vocab, dl});
    weight("dec_bos", {1, dl});
    for (std::int64_t l = 0; l < cfg_.n_layers_enc; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        gain(p + "attn.norm", dl);
        weight(p + "attn.wq", {dl, dl});
        weight(p + "attn.wk", {dl, dl});
        weight(p + "attn.wv", {dl, dl});
        weight(p + "attn.wo", {dl, dl});
        gain(p + "ffn.norm", dl);
        weight(p + "ffn.w1", {dl, 2 * dl});
        weight(p + "ffn.w3", {dl, 2 * dl});
        weight(p + "ffn.w2", {2 * dl, dl});
    }
    gain("enc.pool.norm", dl);
    weight("enc.pool.query", {1, dl});
    weight("enc.pool.wk", {dl, dl});
    weight("enc.pool.wv", {dl, dl});
    weight("enc.pool.proj", {dl, dg});
    for (std::int64_t l = 0; l < cfg_.n_layers_global; ++l) {
        const std::string p = "glob." + std::to_string(l) + ".";
        gain(p + "attn.norm", dg);
        weight(p + "attn.wq", {dg, dg});
        weight(p + "attn.wk", {dg, dg});
        weight(p + "attn.wv", {dg, dg});
        weight(p + "attn.wo", {dg, dg});
        gain(p + "ffn.norm", dg);
        weight(p + "ffn.w1", {dg, 2 * dg});
        weight(p + "ffn.w3", {dg, 2 * dg});
        weight(p + "ffn.w2", {2 * dg, dg});
    }
    gain("glob.final_norm", dg);
    weight("text_head", {dg, cfg_.text_vocab});
    for (std::int64_t l = 0; l < cfg_.n_layers_dec; ++l) {
        const std::string p = "dec." + std::to_string(l) + ".";
        gain(p + "self.norm", dl);
        weight(p + "self.wq", {dl, dl});
        weight(p + "self.wk", {dl, dl});
        weight(p + "self.wv", {dl, dl});
        weight(p + "self.wo", {dl, dl});
        gain(p + "cross.norm", dl);
        weight(p + "cross.wq", {dl, dl});
        weight(p + "cross.wk", {dg, dl});
        weight(p + "cross.wv", {dg, dl});
        weight(p + "cross.wo", {dl, dl});
        gain(p + "ffn.norm", dl);
        weight(p + "ffn.w1", {dl, 2 * dl});
        weight(p + "ffn.w3", {dl, 2 * dl});
        weight(p + "ffn.w2", {2 * dl, dl});
    }
    gain("dec.final_norm", dl);
    weight("speech_head", {dl, cfg_.speech_vocab});
}

ParamVars LstModel::bind(Tape& t) const {
    ParamVars pv;
    for (const auto& [name, tensor] : params_) pv.emplace(name, t.leaf(tensor, true));
    return pv;
}

Var LstModel::encode_run_embeds(Tape& t, const ParamVars& pv, Var embeds,
                                const patching::PatchSegmentation& seg) const {
    const std::int64_t T = embeds.value().rows();
    if (seg.total != T) throw ContractError("segmentation does not match run length");
    seg.validate();
    const auto pos = iota_positions(T);
    auto mask = window_causal_mask(T, cfg_.window);
    Var x = embeds;
    for (std::int64_t l = 0; l < cfg_.n_layers_enc; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        Var xn = t.rms_norm(x, P(pv, p + "attn.norm"));
        x = t.add(x, attention(t, xn, xn, attn_params(pv, p + "attn"), cfg_.n_heads, mask,
                               &pos, &pos, cfg_.rope_theta));
        Var fn = t.rms_norm(x, P(pv, p + "ffn.norm"));
        x = t.add(x, ffn(t, fn, P(pv, p + "ffn.w1"), P(pv, p + "ffn.w3"), P(pv, p + "ffn.w2")));
    }
    // One learned query per patch attends over exactly that patch's positions.
    const std::int64_t n_patches = seg.count();
    Var xn = t.rms_norm(x, P(pv, "enc.pool.norm"));
    Var k = t.matmul(xn, P(pv, "enc.pool.wk"));
    Var v = t.matmul(xn, P(pv, "enc.pool.wv"));
    Var ones = t.leaf(Tensor::full({n_patches, 1}, 1.0), false);
    Var q = t.matmul(ones, P(pv, "enc.pool.query"));
    auto pmask = std::make_shared<ad::MaskMatrix>(ad::MaskMatrix::all(n_patches, T, false));
    for (std::int64_t j = 0; j < n_patches; ++j)
        for (std::int64_t i = seg.segments[j].start; i <= seg.segments[j].end; ++i)
            pmask->at(j, i) = 1;
    Var scores =
        t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg_.d_local)));
    Var pooled = t.matmul(t.masked_softmax(scores, pmask), v);
    return t.matmul(pooled, P(pv, "enc.pool.proj"));
}

Var LstModel::encode_run(Tape& t, const ParamVars& pv, const std::vector<std::int64_t>& frames,
                         const patching::PatchSegmentation& seg) const {
    Var emb = t.embedding_lookup(P(pv, "speech_embed"), frames);
    return encode_run_embeds(t, pv, emb, seg);
}

Var LstModel::global_hidden(Tape& t, const ParamVars& pv, Var units,
                            const std::vector<std::int64_t>& positions) const {
    const std::int64_t M = units.value().rows();
    if (static_cast<std::int64_t>(positions.size()) != M)
        throw ContractError("positions do not match unit rows");
    auto mask = causal_mask(M);
    Var x = units;
    for (std::int64_t l = 0; l < cfg_.n_layers_global; ++l) {
        const std::string p = "glob." + std::to_string(l) + ".";
        Var xn = t.rms_norm(x, P(pv, p + "attn.norm"));
        x = t.add(x, attention(t, xn, xn, attn_params(pv, p + "attn"), cfg_.n_heads, mask,
                               &positions, &positions, cfg_.rope_theta));
        Var fn = t.rms_norm(x, P(pv, p + "ffn.norm"));
        x = t.add(x, ffn(t, fn, P(pv, p + "ffn.w1"), P(pv, p + "ffn.w3"), P(pv, p + "ffn.w2")));
    }
    return t.rms_norm(x, P(pv, "glob.final_norm"));
}

Var LstModel::decode_run_logits(Tape& t, const ParamVars& pv,
                                const std::vector<std::int64_t>& frames, Var global_h,
                                const std::vector<PlanUnit>& units,
                                std::int64_t run_begin) const {
    const auto T = static_cast<std::int64_t>(frames.size());
    if (T < 1) throw ContractError("cannot decode an empty run");
    const std::int64_t M = global_h.value().rows();
    if (static_cast<std::int64_t>(units.size()) != M)
        throw ContractError("unit metadata does not match global rows");
    // Input row j is the embedding of frames[j-1] (dec_bos for j=0); output
    // row j predicts frames[j].
    Var x;
    if (T == 1) {
        x = P(pv, "dec_bos");
    } else {
        std::vector<std::int64_t> prev(frames.begin(), frames.end() - 1);
        x = t.concat_rows({P(pv, "dec_bos"), t.embedding_lookup(P(pv, "speech_embed"), prev)});
    }
    const auto pos = iota_positions(T);
    auto smask = window_causal_mask(T, cfg_.window);
    // Cross-attention sees only units completed strictly before the position
    // being produced, so a patch never feeds its own reconstruction.
    auto cmask = std::make_shared<ad::MaskMatrix>(ad::MaskMatrix::all(T, M, false));
    for (std::int64_t j = 0; j < T; ++j)
        for (std::int64_t u = 0; u < M; ++u)
            if (units[u].end < run_begin + j) cmask->at(j, u) = 1;
    for (std::int64_t l = 0; l < cfg_.n_layers_dec; ++l) {
        const std::string p = "dec." + std::to_string(l) + ".";
        Var sn = t.rms_norm(x, P(pv, p + "self.norm"));
        x = t.add(x, attention(t, sn, sn, attn_params(pv, p + "self"), cfg_.n_heads, smask,
                               &pos, &pos, cfg_.rope_theta));
        Var cn = t.rms_norm(x, P(pv, p + "cross.norm"));
        x = t.add(x, attention(t, cn, global_h, attn_params(pv, p + "cross"), cfg_.n_heads,
                               cmask, nullptr, nullptr, cfg_.rope_theta));
        Var fn = t.rms_norm(x, P(pv, p + "ffn.norm"));
        x = t.add(x, ffn(t, fn, P(pv, p + "ffn.w1"), P(pv, p + "ffn.w3"), P(pv, p + "ffn.w2")));
    }
    return t.matmul(t.rms_norm(x, P(pv, "dec.final_norm")), P(pv, "speech_head"));
}

interleave::PatchAssigner LstModel::train_assigner(const TrainContext& ctx) const {
    const auto mode = cfg_.parsed_patch_mode();
    const auto smode = cfg_.silence_mode();
    const patching::CurriculumSchedule sched{cfg_.tau1, cfg_.tau2};
    const std::int64_t p = cfg_.patch_size;
    const std::int64_t step = ctx.step;
    Rng* rng = ctx.rng;
    if (mode == patching::PatchMode::static_) {
        return [p](const std::vector<std::int64_t>& frames,
                   const std::vector<corpus::AlignmentSpan>&) {
            return patching::static_patch(static_cast<std::int64_t>(frames.size()), p);
        };
    }
    if (!rng) throw ContractError("non-static patching needs an rng in the train context");
    if (mode == patching::PatchMode::bpe && !bpe_.has_value())
        throw ConfigError("patch_mode bpe needs a speech bpe attached first", "patch_mode");
    const bpe::SpeechBpe* bp = bpe_ ? &*bpe_ : nullptr;
    return [=](const std::vector<std::int64_t>& frames,
               const std::vector<corpus::AlignmentSpan>& spans) {
        const auto T = static_cast<std::int64_t>(frames.size());
        switch (patching::select_patching(step, *rng, mode, sched, !spans.empty())) {
            case patching::Strategy::aligned:
                return patching::aligned_patch(T, spans, smode);
            case patching::Strategy::bpe: {
                std::vector<std::int64_t> counts;
                counts.reserve(spans.size());
                for (const auto& s : spans) {
                    std::vector<std::int64_t> word(frames.begin() + s.b, frames.begin() + s.e + 1);
                    const auto n = static_cast<std::int64_t>(bp->encode(word).size());
                    counts.push_back(std::clamp<std::int64_t>(n, 1, s.e - s.b + 1));
                }
                return patching::bpe_aligned_patch(T, spans, counts);
            }
            case patching::Strategy::static_:
            default:
                return patching::static_patch(T, p);
        }
    };
}

interleave::PatchAssigner LstModel::infer_assigner(bool use_spans) const {
    const std::int64_t p = cfg_.patch_size;
    const auto smode = cfg_.silence_mode();
    return [p, smode, use_spans](const std::vector<std::int64_t>& frames,
                                 const std::vector<corpus::AlignmentSpan>& spans) {
        const auto T = static_cast<std::int64_t>(frames.size());
        if (use_spans && !spans.empty()) return patching::aligned_patch(T, spans, smode);
        return patching::static_patch(T, p);
    };
}

LstModel::RowOutput LstModel::forward_row(Tape& t, const ParamVars& pv,
                                          const interleave::PackedRow& row) const {
    RowOutput out;
    out.plan = PatchPlan::from_row(row);
    out.plan.validate();
    const auto& plan = out.plan;

    std::vector<Var> run_reps(row.runs.size());
    for (std::size_t r = 0; r < row.runs.size(); ++r) {
        const auto& pr = row.runs[r];
        std::vector<std::int64_t> frames(row.tokens.begin() + pr.begin,
                                         row.tokens.begin() + pr.begin + pr.length);
        run_reps[r] = encode_run(t, pv, frames, pr.seg);
    }

    // Unit embeddings in timeline order; contiguous text stretches share one
    // lookup.
    std::vector<Var> parts;
    std::vector<std::int64_t> text_ids;
    auto flush = [&] {
        if (!text_ids.empty()) {
            parts.push_back(t.embedding_lookup(P(pv, "text_embed"), text_ids));
            text_ids.clear();
        }
    };
    for (const auto& u : plan.units) {
        if (u.is_patch) {
            flush();
            parts.push_back(t.slice_rows(run_reps[u.run_index], u.seg_index, u.seg_index + 1));
            ++out.patch_units;
        } else {
            text_ids.push_back(row.tokens[u.start]);
        }
    }
    flush();
    Var units_mat = parts.size() == 1 ? parts[0] : t.concat_rows(parts);
    out.global_h =
        global_hidden(t, pv, units_mat, iota_positions(static_cast<std::int64_t>(plan.units.size())));

    // Text targets: content tokens, plus markers when they are predicted.
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    std::vector<Var> hrows;
    for (std::int64_t pos = 0; pos < row.used; ++pos) {
        if (row.is_speech[pos]) continue;
        const std::int64_t tok = row.tokens[pos];
        const bool content = row.loss_mask[pos] != 0;
        const bool marker = tok == vocab.text_marker || tok == vocab.speech_marker;
        if (!(content || (cfg_.predict_markers && marker))) continue;
        const std::int64_t u = plan.unit_of[pos];
        if (u < 1) continue;  // nothing precedes the first unit
        hrows.push_back(t.slice_rows(out.global_h, u - 1, u));
        out.text_targets.push_back(tok);
        out.text_positions.push_back(pos);
    }
    if (!hrows.empty())
        out.text_logits = t.matmul(t.concat_rows(hrows), P(pv, "text_head"));

    for (const auto& pr : row.runs) {
        std::vector<std::int64_t> frames(row.tokens.begin() + pr.begin,
                                         row.tokens.begin() + pr.begin + pr.length);
        out.run_logits.push_back(
            decode_run_logits(t, pv, frames, out.global_h, plan.units, pr.begin));
    }
    return out;
}

LossStats LstModel::batch_loss(const std::vector<InterleavedSequence>& seqs,
                               const TrainContext& ctx,
                               std::map<std::string, Tensor>* grads) {
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    auto batch = interleave::pack_batch(seqs, cfg_.context_len, vocab, train_assigner(ctx));

    Tape t;
    ParamVars pv = bind(t);
    LossStats st;
    st.truncations = batch.truncations;
    std::vector<Var> parts;
    double text_sum = 0.0, speech_sum = 0.0;
    for (const auto& row : batch.rows) {
        RowOutput ro = forward_row(t, pv, row);
        if (!ro.text_targets.empty()) {
            std::int64_t cnt = 0;
            Var ce = t.softmax_cross_entropy_sum(ro.text_logits, ro.text_targets, -1, &cnt);
            parts.push_back(ce);
            st.n_text += cnt;
            text_sum += ce.value()[0];
        }
        for (std::size_t r = 0; r < row.runs.size(); ++r) {
            const auto& pr = row.runs[r];
            std::vector<std::int64_t> targets(row.tokens.begin() + pr.begin,
                                              row.tokens.begin() + pr.begin + pr.length);
            std::int64_t cnt = 0;
            Var ce = t.softmax_cross_entropy_sum(ro.run_logits[r], targets, -1, &cnt);
            parts.push_back(ce);
            st.n_speech += cnt;
            speech_sum += ce.value()[0];
        }
        st.global_units += static_cast<std::int64_t>(ro.plan.units.size());
        st.speech_units += ro.patch_units;
        st.text_units += static_cast<std::int64_t>(ro.plan.units.size()) - ro.patch_units;
        for (const auto& pr : row.runs) st.speech_frames += pr.length;
        for (std::int64_t i = 0; i < row.used; ++i) st.raw_tokens += row.loss_mask[i] ? 1 : 0;
    }
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

LossStats LstModel::loss_and_grad(const std::vector<InterleavedSequence>& seqs,
                                  const TrainContext& ctx,
                                  std::map<std::string, Tensor>& grads) {
    return batch_loss(seqs, ctx, &grads);
}

LossStats LstModel::loss_only(const std::vector<InterleavedSequence>& seqs,
                              const TrainContext& ctx) {
    return batch_loss(seqs, ctx, nullptr);
}

// ------------------------------------------------------------------ scoring

ScoredConcat concat_for_scoring(const InterleavedSequence& prompt,
                                const InterleavedSequence& cand) {
    ScoredConcat sc;
    sc.seq = prompt;
    if (cand.runs.empty()) {
        sc.cand_first_run = sc.seq.runs.size();
        return sc;
    }
    std::size_t from = 0;
    if (!sc.seq.runs.empty() &&
        sc.seq.runs.back().modality == cand.runs.front().modality) {
        interleave::Run& tail = sc.seq.runs.back();
        sc.cand_first_run = sc.seq.runs.size() - 1;
        sc.cand_token_offset = static_cast<std::int64_t>(tail.tokens.size());
        const interleave::Run& head = cand.runs.front();
        const auto frame_off = static_cast<std::int64_t>(tail.tokens.size());
        const std::int64_t unit_off =
            tail.spans.empty() ? 0 : tail.spans.back().unit + 1;
        tail.tokens.insert(tail.tokens.end(), head.tokens.begin(), head.tokens.end());
        for (const auto& s : head.spans)
            tail.spans.push_back({s.unit + unit_off, s.b + frame_off, s.e + frame_off});
        tail.word_end += head.word_end - head.word_begin;
        from = 1;
    } else {
        sc.cand_first_run = sc.seq.runs.size();
        sc.cand_token_offset = 0;
    }
    for (std::size_t r = from; r < cand.runs.size(); ++r) sc.seq.runs.push_back(cand.runs[r]);
    return sc;
}

double LstModel::candidate_nll(const InterleavedSequence& prompt,
                               const InterleavedSequence& cand, std::int64_t* n_scored,
                               std::int64_t* units) {
    ScoredConcat sc = concat_for_scoring(prompt, cand);
    if (sc.seq.rendered_length() > cfg_.context_len)
        throw ContractError("prompt plus candidate exceed the context window");
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);
    auto batch = interleave::pack_batch({sc.seq}, cfg_.context_len, vocab, infer_assigner(false));
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
            if (run.modality == Modality::text) {
                auto it = std::lower_bound(ro.text_positions.begin(), ro.text_positions.end(), tl);
                if (it == ro.text_positions.end() || *it != tl)
                    throw ContractError("candidate text position was not scored");
                const auto idx = static_cast<std::int64_t>(it - ro.text_positions.begin());
                nll += nll_from_logits_row(ro.text_logits.value(), idx, run.tokens[i]);
            } else {
                std::size_t pr_idx = row.runs.size();
                for (std::size_t k = 0; k < row.runs.size(); ++k) {
                    if (tl >= row.runs[k].begin && tl < row.runs[k].begin + row.runs[k].length) {
                        pr_idx = k;
                        break;
                    }
                }
                if (pr_idx == row.runs.size())
                    throw ContractError("candidate speech position was not scored");
                nll += nll_from_logits_row(ro.run_logits[pr_idx].value(),
                                           tl - row.runs[pr_idx].begin, run.tokens[i]);
            }
            ++scored;
        }
        pos += len;
    }
    if (scored == 0) throw EmptyLossError("candidate has no scorable content");
    if (n_scored) *n_scored = scored;
    if (units) *units = static_cast<std::int64_t>(ro.plan.units.size());
    return nll;
}

// --------------------------------------------------------------- generation

GenerationResult LstModel::generate_speech(const InterleavedSequence& prompt,
                                           std::int64_t steps, const GenConfig& gen) {
    GenerationResult res;
    if (steps <= 0) return res;
    Rng rng = Rng(gen.seed).substream("gen");
    const std::int64_t p = cfg_.patch_size;
    const auto vocab = corpus::Vocabulary::text_sized(cfg_.text_vocab);

    // Absolute-timeline units feeding the global model; embeddings are plain
    // values, recomputed global hidden after every advance.
    std::vector<PlanUnit> units;
    std::vector<Tensor> unit_embeds;  // each [1 x d_global]
    std::int64_t timeline = 0;

    auto push_text_unit = [&](std::int64_t token_id) {
        Tape t;
        ParamVars pv = bind(t);
        Var e = t.embedding_lookup(P(pv, "text_embed"), {token_id});
        unit_embeds.push_back(e.value());
        units.push_back({timeline, timeline, false, -1, -1});
        ++timeline;
    };

    InterleavedSequence closed = prompt;
    std::vector<std::int64_t> frames;  // current (open) speech run
    const bool tail_speech =
        !closed.runs.empty() && closed.runs.back().modality == Modality::speech;
    if (tail_speech) {
        frames = closed.runs.back().tokens;
        closed.runs.pop_back();
    }
    for (const auto& run : closed.runs) {
        push_text_unit(run.modality == Modality::text ? vocab.text_marker
                                                      : vocab.speech_marker);
        if (run.modality == Modality::text) {
            for (auto tok : run.tokens) push_text_unit(tok);
        } else {
            const auto len = static_cast<std::int64_t>(run.tokens.size());
            auto seg = patching::static_patch(len, p);
            Tape t;
            ParamVars pv = bind(t);
            Var reps = encode_run(t, pv, run.tokens, seg);
            for (std::int64_t s = 0; s < seg.count(); ++s) {
                Var rrow = t.slice_rows(reps, s, s + 1);
                unit_embeds.push_back(rrow.value());
                units.push_back({timeline + seg.segments[s].start,
                                 timeline + seg.segments[s].end, true, -1, s});
            }
            timeline += len;
        }
    }
    // Marker opening the run being generated (or continuing the prompt tail).
    push_text_unit(vocab.speech_marker);
    const std::int64_t run_begin = timeline;
    std::int64_t committed = 0;  // frames already encoded into patch units

    auto commit_patch = [&] {
        // Encode the committed prefix; causal local attention keeps earlier
        // patch rows stable, so only the newest row is consumed.
        const std::int64_t upto = committed + p;
        std::vector<std::int64_t> prefix(frames.begin(), frames.begin() + upto);
        auto seg = patching::static_patch(upto, p);
        Tape t;
        ParamVars pv = bind(t);
        Var reps = encode_run(t, pv, prefix, seg);
        Var last = t.slice_rows(reps, seg.count() - 1, seg.count());
        unit_embeds.push_back(last.value());
        units.push_back({run_begin + committed, run_begin + upto - 1, true, -1, -1});
        committed = upto;
    };
    while (committed + p <= static_cast<std::int64_t>(frames.size())) commit_patch();

    const std::int64_t max_units = cfg_.context_len;
    for (std::int64_t step = 0; step < steps; ++step) {
        while (static_cast<std::int64_t>(units.size()) > max_units) {
            units.erase(units.begin());
            unit_embeds.erase(unit_embeds.begin());
        }
        Tape t;
        ParamVars pv = bind(t);
        std::vector<Var> rows;
        rows.reserve(unit_embeds.size());
        for (const auto& e : unit_embeds) rows.push_back(t.leaf(e, false));
        Var umat = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
        Var h = global_hidden(t, pv, umat,
                              iota_positions(static_cast<std::int64_t>(units.size())));
        std::vector<std::int64_t> probe = frames;
        probe.push_back(0);  // placeholder target slot; its embedding is never read
        Var logits = decode_run_logits(t, pv, probe, h, units, run_begin);
        const Tensor& lv = logits.value();
        const std::int64_t last = lv.rows() - 1;
        std::int64_t pick = 0;
        if (gen.greedy) {
            for (std::int64_t j = 1; j < lv.cols(); ++j)
                if (lv.at(last, j) > lv.at(last, pick)) pick = j;
        } else {
            const double temp = gen.temperature > 0 ? gen.temperature : 1.0;
            double mx = lv.at(last, 0);
            for (std::int64_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv.at(last, j));
            std::vector<double> w(lv.cols());
            double z = 0.0;
            for (std::int64_t j = 0; j < lv.cols(); ++j) {
                w[j] = std::exp((lv.at(last, j) - mx) / temp);
                z += w[j];
            }
            double u = rng.unit() * z, acc = 0.0;
            for (std::int64_t j = 0; j < lv.cols(); ++j) {
                acc += w[j];
                if (u <= acc) {
                    pick = j;
                    break;
                }
            }
        }
        frames.push_back(pick);
        res.tokens.push_back(pick);
        if (committed + p <= static_cast<std::int64_t>(frames.size())) {
            commit_patch();
            ++res.global_advances;
        }
    }
    return res;
}

ad::Tensor LstModel::word_patch_embedding(const std::vector<std::int64_t>& frames) {
    if (frames.empty()) throw ContractError("word embedding needs at least one frame");
    patching::PatchSegmentation seg;
    seg.total = static_cast<std::int64_t>(frames.size());
    seg.segments = {{0, seg.total - 1, patching::SegmentKind::word}};
    Tape t;
    ParamVars pv = bind(t);
    return encode_run(t, pv, frames, seg).value();
}

}  // namespace lst::model
