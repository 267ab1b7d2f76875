#include "lst/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lst/checkpoint.hpp"
#include "lst/error.hpp"
#include "lst/interleave.hpp"
#include "lst/patching.hpp"

namespace lst::train {

namespace {

constexpr double kPi = 3.14159265358979323846;

using json = nlohmann::json;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("must be positive", "train.lr");
    if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("must lie in [0, 1)", "train.beta1");
    if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("must lie in [0, 1)", "train.beta2");
    if (weight_decay < 0.0) throw ConfigError("must be non-negative", "train.weight_decay");
    if (adam_eps <= 0.0) throw ConfigError("must be positive", "train.adam_eps");
    if (total_steps < 1) throw ConfigError("must be at least 1", "train.total_steps");
    if (warmup < 1 || warmup >= total_steps)
        throw ConfigError("warmup must sit in [1, total_steps)", "train.warmup");
    if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0)
        throw ConfigError("must lie in [0, 1]", "train.min_lr_ratio");
    if (grad_clip < 0.0) throw ConfigError("must be non-negative", "train.grad_clip");
    if (batch_size < 1) throw ConfigError("must be at least 1", "train.batch_size");
    if (mix_interleaved < 0) throw ConfigError("must be non-negative", "train.mix_interleaved");
    if (mix_text < 0) throw ConfigError("must be non-negative", "train.mix_text");
    if (mix_interleaved + mix_text == 0)
        throw ConfigError("mix ratio must have a positive component", "train.mix");
    if (stream != "mixed" && stream != "interleaved" && stream != "speech" && stream != "text")
        throw ConfigError("unknown stream '" + stream + "'", "train.stream");
    if (budget != "compute" && budget != "data")
        throw ConfigError("unknown budget '" + budget + "'", "train.budget");
    if (run_steps < 0) throw ConfigError("must be non-negative", "train.run_steps");
    if (max_units < 0) throw ConfigError("must be non-negative", "train.max_units");
    if (max_raw_tokens < 0) throw ConfigError("must be non-negative", "train.max_raw_tokens");
    if (checkpoint_every < 0) throw ConfigError("must be non-negative", "train.checkpoint_every");
    if (eval_every < 0) throw ConfigError("must be non-negative", "train.eval_every");
}

std::string TrainConfig::to_json() const {
    json j;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["weight_decay"] = weight_decay;
    j["adam_eps"] = adam_eps;
    j["warmup"] = warmup;
    j["min_lr_ratio"] = min_lr_ratio;
    j["grad_clip"] = grad_clip;
    j["total_steps"] = total_steps;
    j["run_steps"] = run_steps;
    j["batch_size"] = batch_size;
    j["mix_interleaved"] = mix_interleaved;
    j["mix_text"] = mix_text;
    j["stream"] = stream;
    j["budget"] = budget;
    j["max_units"] = max_units;
    j["max_raw_tokens"] = max_raw_tokens;
    j["checkpoint_every"] = checkpoint_every;
    j["eval_every"] = eval_every;
    j["seed"] = seed;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid json: ") + e.what(), "train");
    }
    if (!j.is_object()) throw ConfigError("expected a json object", "train");
    TrainConfig c;
    try {
        for (auto& [key, val] : j.items()) {
            if (key == "lr") c.lr = val.get<double>();
            else if (key == "beta1") c.beta1 = val.get<double>();
            else if (key == "beta2") c.beta2 = val.get<double>();
            else if (key == "weight_decay") c.weight_decay = val.get<double>();
            else if (key == "adam_eps") c.adam_eps = val.get<double>();
            else if (key == "warmup") c.warmup = val.get<std::int64_t>();
            else if (key == "min_lr_ratio") c.min_lr_ratio = val.get<double>();
            else if (key == "grad_clip") c.grad_clip = val.get<double>();
            else if (key == "total_steps") c.total_steps = val.get<std::int64_t>();
            else if (key == "run_steps") c.run_steps = val.get<std::int64_t>();
            else if (key == "batch_size") c.batch_size = val.get<std::int64_t>();
            else if (key == "mix_interleaved") c.mix_interleaved = val.get<std::int64_t>();
            else if (key == "mix_text") c.mix_text = val.get<std::int64_t>();
            else if (key == "stream") c.stream = val.get<std::string>();
            else if (key == "budget") c.budget = val.get<std::string>();
            else if (key == "max_units") c.max_units = val.get<std::int64_t>();
            else if (key == "max_raw_tokens") c.max_raw_tokens = val.get<std::int64_t>();
            else if (key == "checkpoint_every") c.checkpoint_every = val.get<std::int64_t>();
            else if (key == "eval_every") c.eval_every = val.get<std::int64_t>();
            else if (key == "seed") c.seed = val.get<std::uint64_t>();
            else throw ConfigError("unknown key", "train." + key);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value: ") + e.what(), "train");
    }
    c.validate();
    return c;
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw ContractError("lr_at: negative step");
    if (step <= cfg.warmup)  // linear ramp, exactly lr at the knee
        return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
    if (step >= cfg.total_steps) return cfg.lr * cfg.min_lr_ratio;
    const double prog = static_cast<double>(step - cfg.warmup) /
                        static_cast<double>(cfg.total_steps - cfg.warmup);
    const double lo = cfg.lr * cfg.min_lr_ratio;
    return lo + (cfg.lr - lo) * 0.5 * (1.0 + std::cos(prog * kPi));
}

void adamw_step(std::map<std::string, ad::Tensor>& params,
                const std::map<std::string, ad::Tensor>& grads, AdamState& state,
                const TrainConfig& cfg, double lr) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) throw ContractError("gradient for unknown parameter " + name);
        if (!g.same_shape(pit->second))
            throw DimensionError("gradient shape mismatch for " + name);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (!std::isfinite(g[i])) throw DivergenceError("non-finite gradient in " + name);
            sq += g[i] * g[i];
        }
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // untouched parameters stay put
        ad::Tensor& m = state.m.emplace(name, ad::Tensor::zeros(p.shape())).first->second;
        ad::Tensor& v = state.v.emplace(name, ad::Tensor::zeros(p.shape())).first->second;
        const ad::Tensor& g = git->second;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * p[i]);
        }
    }
}

void BudgetLedger::add(const model::LossStats& st, bool from_interleaved) {
    global_units += st.global_units;
    speech_units += st.speech_units;
    text_units += st.text_units;
    raw_tokens += st.raw_tokens;
    speech_frames += st.speech_frames;
    truncations += st.truncations;
    (from_interleaved ? tokens_from_interleaved : tokens_from_text) += st.raw_tokens;
}

double BudgetLedger::interleaved_fraction() const {
    const std::int64_t total = tokens_from_interleaved + tokens_from_text;
    return total == 0 ? 0.0 : static_cast<double>(tokens_from_interleaved) / total;
}

std::string BudgetLedger::to_json() const {
    json j;
    j["steps"] = steps;
    j["global_units"] = global_units;
    j["speech_units"] = speech_units;
    j["text_units"] = text_units;
    j["raw_tokens"] = raw_tokens;
    j["speech_frames"] = speech_frames;
    j["tokens_from_interleaved"] = tokens_from_interleaved;
    j["tokens_from_text"] = tokens_from_text;
    j["truncations"] = truncations;
    return j.dump(2);
}

BudgetLedger BudgetLedger::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("invalid ledger json: ") + e.what());
    }
    BudgetLedger led;
    try {
        led.steps = j.at("steps").get<std::int64_t>();
        led.global_units = j.at("global_units").get<std::int64_t>();
        led.speech_units = j.at("speech_units").get<std::int64_t>();
        led.text_units = j.at("text_units").get<std::int64_t>();
        led.raw_tokens = j.at("raw_tokens").get<std::int64_t>();
        led.speech_frames = j.at("speech_frames").get<std::int64_t>();
        led.tokens_from_interleaved = j.at("tokens_from_interleaved").get<std::int64_t>();
        led.tokens_from_text = j.at("tokens_from_text").get<std::int64_t>();
        led.truncations = j.at("truncations").get<std::int64_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("incomplete ledger json: ") + e.what());
    }
    return led;
}

double unit_savings(std::int64_t units_lst, std::int64_t units_baseline) {
    if (units_baseline <= 0) throw ContractError("savings needs a positive baseline unit count");
    return 1.0 - static_cast<double>(units_lst) / static_cast<double>(units_baseline);
}

bool pick_interleaved(const BudgetLedger& led, std::int64_t mix_interleaved,
                      std::int64_t mix_text) {
    if (mix_interleaved <= 0) return false;
    if (mix_text <= 0) return true;
    // Integer form of: realized interleaved share <= target share.
    const std::int64_t total = led.tokens_from_interleaved + led.tokens_from_text;
    return led.tokens_from_interleaved * (mix_interleaved + mix_text) <= total * mix_interleaved;
}

namespace {

interleave::InterleavedSequence make_sequence(const corpus::Utterance& u, const std::string& stream,
                                              bool interleaved_source, Rng& rng) {
    if (stream == "speech") return interleave::pure_speech(u);
    if (stream == "text" || !interleaved_source) return interleave::pure_text(u);
    auto s = interleave::interleave(u, rng);
    return s ? *s : interleave::pure_speech(u);
}

// Curriculum column for metrics: probability that this step patches aligned.
double aligned_prob(const model::LanguageModel& m, std::int64_t step) {
    const auto* lst = dynamic_cast<const model::LstModel*>(&m);
    if (lst == nullptr) return 0.0;
    switch (lst->config().parsed_patch_mode()) {
        case patching::PatchMode::static_: return 0.0;
        case patching::PatchMode::aligned: return 1.0;
        case patching::PatchMode::mixed: return 0.5;
        case patching::PatchMode::bpe: return 0.0;
        case patching::PatchMode::curriculum:
            return patching::curriculum_prob(step, {lst->config().tau1, lst->config().tau2});
    }
    return 0.0;
}

void save_state(const std::string& dir, model::LanguageModel& m, AdamState& state,
                const TrainConfig& cfg, const BudgetLedger& led, std::int64_t steps_done) {
    std::map<std::string, ad::Tensor> tensors = m.parameters();
    for (const auto& [name, t] : state.m) tensors.emplace("adam.m." + name, t);
    for (const auto& [name, t] : state.v) tensors.emplace("adam.v." + name, t);
    std::map<std::string, std::string> extras;
    extras["step"] = std::to_string(steps_done);
    extras["seed"] = std::to_string(cfg.seed);
    extras["ledger"] = led.to_json();
    ckpt::save(dir, tensors, extras);
    // Live state now matches what a resume would load, bit for bit.
    ckpt::quantize(m.parameters());
    ckpt::quantize(state.m);
    ckpt::quantize(state.v);
}

void load_state(const std::string& dir, model::LanguageModel& m, AdamState& state,
                BudgetLedger& led, std::int64_t& start_step) {
    ckpt::Checkpoint c = ckpt::load(dir);
    for (auto& [name, p] : m.parameters()) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) throw IoError("checkpoint is missing parameter " + name);
        if (!it->second.same_shape(p))
            throw IoError("checkpoint shape mismatch for " + name + ": stored " +
                          it->second.shape_str() + ", model " + p.shape_str());
        p = it->second;
        auto mit = c.tensors.find("adam.m." + name);
        auto vit = c.tensors.find("adam.v." + name);
        if (mit != c.tensors.end()) state.m[name] = mit->second;
        if (vit != c.tensors.end()) state.v[name] = vit->second;
    }
    auto need = [&](const char* key) {
        auto it = c.extras.find(key);
        if (it == c.extras.end()) throw IoError(std::string("checkpoint is missing extra ") + key);
        return it->second;
    };
    start_step = std::stoll(need("step"));
    state.t = start_step;
    led = BudgetLedger::from_json_text(need("ledger"));
}

}  // namespace

TrainResult train(model::LanguageModel& m, const TrainConfig& cfg,
                  const std::vector<corpus::Utterance>& utts, const std::string& out_dir,
                  const EvalHook& hook, const std::string& resume_from) {
    cfg.validate();
    if (utts.empty()) throw ConfigError("training corpus is empty", "train.corpus");

    TrainResult res;
    AdamState state;
    std::int64_t start_step = 0;
    if (!resume_from.empty()) load_state(resume_from, m, state, res.ledger, start_step);
    BudgetLedger& led = res.ledger;

    std::ofstream metrics;
    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
        const std::string path = out_dir + "/metrics.csv";
        metrics.open(path, start_step > 0 ? std::ios::app : std::ios::trunc);
        if (!metrics) throw IoError("cannot open " + path);
        if (start_step == 0)
            metrics << "step,lr,loss,text_loss,speech_loss,n_text,n_speech,step_units,"
                       "total_units,total_raw_tokens,interleaved,aligned_p\n";
    }
    const std::string ckpt_dir = out_dir.empty() ? "" : out_dir + "/checkpoint";

    res.stop_reason = "total_steps";
    for (std::int64_t step = start_step; step < cfg.total_steps; ++step) {
        if (cfg.run_steps > 0 && step - start_step >= cfg.run_steps) {
            res.stop_reason = "run_limit";
            break;
        }
        if (cfg.budget == "compute" && cfg.max_units > 0 && led.global_units >= cfg.max_units) {
            res.stop_reason = "unit_budget";
            break;
        }
        if (cfg.budget == "data" && cfg.max_raw_tokens > 0 && led.raw_tokens >= cfg.max_raw_tokens) {
            res.stop_reason = "token_budget";
            break;
        }

        const bool interleaved =
            cfg.stream == "mixed" ? pick_interleaved(led, cfg.mix_interleaved, cfg.mix_text)
                                  : cfg.stream != "text";
        std::vector<interleave::InterleavedSequence> batch;
        batch.reserve(cfg.batch_size);
        for (std::int64_t slot = 0; slot < cfg.batch_size; ++slot) {
            Rng r = Rng(cfg.seed)
                        .substream("seq")
                        .substream(static_cast<std::uint64_t>(step))
                        .substream(static_cast<std::uint64_t>(slot));
            const auto& u = utts[r.below(utts.size())];
            batch.push_back(make_sequence(u, cfg.stream, interleaved, r));
        }

        Rng patch_rng = Rng(cfg.seed).substream("patch").substream(static_cast<std::uint64_t>(step));
        model::TrainContext ctx{step, &patch_rng};
        std::map<std::string, ad::Tensor> grads;
        model::LossStats st;
        try {
            st = m.loss_and_grad(batch, ctx, grads);
            adamw_step(m.parameters(), grads, state, cfg, lr_at(step + 1, cfg));
        } catch (const DivergenceError&) {
            res.stop_reason = "diverged";  // keep the last good checkpoint
            break;
        }

        led.add(st, interleaved);
        led.steps += 1;
        res.steps_done = step + 1 - start_step;
        res.final_loss = st.loss;

        if (metrics.is_open()) {
            metrics << step << ',' << fmt(lr_at(step + 1, cfg)) << ',' << fmt(st.loss) << ','
                    << fmt(st.text_loss) << ',' << fmt(st.speech_loss) << ',' << st.n_text << ','
                    << st.n_speech << ',' << st.global_units << ',' << led.global_units << ','
                    << led.raw_tokens << ',' << (interleaved ? 1 : 0) << ','
                    << fmt(aligned_prob(m, step)) << '\n';
        }
        if (!ckpt_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            save_state(ckpt_dir, m, state, cfg, led, step + 1);
            res.checkpoint_dir = ckpt_dir;
        }
        if (hook && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) hook(step + 1, m);
    }

    if (!ckpt_dir.empty() && res.stop_reason != "diverged") {
        save_state(ckpt_dir, m, state, cfg, led, led.steps);
        res.checkpoint_dir = ckpt_dir;
    }
    if (!out_dir.empty()) {
        std::ofstream lf(out_dir + "/ledger.json", std::ios::trunc);
        if (!lf) throw IoError("cannot open " + out_dir + "/ledger.json");
        lf << led.to_json() << '\n';
    }
    return res;
}

}  // namespace lst::train
