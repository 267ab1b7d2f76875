#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lst/baseline.hpp"
#include "lst/checkpoint.hpp"
#include "lst/corpus.hpp"
#include "lst/error.hpp"
#include "lst/evaluator.hpp"
#include "lst/interleave.hpp"
#include "lst/manifest.hpp"
#include "lst/model.hpp"
#include "lst/patching.hpp"
#include "lst/plot.hpp"
#include "lst/speech_bpe.hpp"
#include "lst/trainer.hpp"

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw lst::IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string join_argv(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw lst::IoError("cannot create " + dir + ": " + ec.message());
}

void emit_manifest(const std::string& path, const std::string& cmdline,
                   const std::string& config_text, std::uint64_t seed,
                   std::vector<std::string> outputs) {
    lst::manifest::RunManifest m;
    m.command_line = cmdline;
    m.config_hash =
        config_text.empty() ? "-" : lst::manifest::hex64(lst::manifest::fnv1a64(config_text));
    m.seed = seed;
    m.started_at = lst::manifest::utc_now();
    m.outputs = std::move(outputs);
    lst::manifest::write_manifest(path, m);
}

// Builds either model family from its config file; trains and attaches the
// speech bpe table when the configuration calls for one.
struct BuiltModel {
    std::unique_ptr<lst::model::LanguageModel> model;
    lst::model::LstModel* lst = nullptr;  // non-null for mode "lst"
};

BuiltModel build_model(const std::string& mode, const std::string& config_text,
                       std::uint64_t seed) {
    BuiltModel out;
    if (mode == "lst") {
        auto cfg = lst::model::ModelConfig::from_json_text(config_text);
        auto m = std::make_unique<lst::model::LstModel>(cfg, seed);
        out.lst = m.get();
        out.model = std::move(m);
    } else if (mode == "base" || mode == "bpe") {
        auto cfg = lst::model::BaselineConfig::from_json_text(config_text);
        if (cfg.kind != mode)
            throw lst::ConfigError("config kind '" + cfg.kind + "' does not match --mode " + mode,
                                   "baseline.kind");
        out.model = std::make_unique<lst::model::BaselineModel>(cfg, seed);
    } else {
        throw lst::ConfigError("unknown mode '" + mode + "'", "cli.mode");
    }
    return out;
}

bool needs_bpe(const BuiltModel& bm, const std::string& mode) {
    if (mode == "bpe") return true;
    return bm.lst != nullptr && bm.lst->config().patch_mode == "bpe";
}

void attach_bpe(BuiltModel& bm, const std::string& mode, lst::bpe::SpeechBpe table) {
    if (bm.lst != nullptr) bm.lst->set_speech_bpe(std::move(table));
    else if (mode == "bpe")
        dynamic_cast<lst::model::BaselineModel&>(*bm.model).set_speech_bpe(std::move(table));
}

void load_weights(lst::model::LanguageModel& m, const std::string& dir) {
    lst::ckpt::Checkpoint c = lst::ckpt::load(dir);
    for (auto& [name, p] : m.parameters()) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) throw lst::IoError("checkpoint is missing parameter " + name);
        if (!it->second.same_shape(p))
            throw lst::IoError("checkpoint shape mismatch for " + name);
        p = it->second;
    }
}

std::vector<std::vector<std::int64_t>> speech_streams(
    const std::vector<lst::corpus::Utterance>& utts) {
    std::vector<std::vector<std::int64_t>> out;
    out.reserve(utts.size());
    for (const auto& u : utts) out.push_back(u.speech_tokens);
    return out;
}

const char* kind_name(lst::patching::SegmentKind k) {
    switch (k) {
        case lst::patching::SegmentKind::word: return "word";
        case lst::patching::SegmentKind::silence: return "silence";
        case lst::patching::SegmentKind::merged: return "merged";
        case lst::patching::SegmentKind::static_: return "static";
    }
    return "?";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent speech-text transformer workbench"};
    app.require_subcommand(1);
    const std::string cmdline = join_argv(argc, argv);

    // ---- gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "synthesize an aligned speech-text corpus");
    std::string gen_out;
    std::int64_t gen_n = 500, gen_min_words = 4, gen_max_words = 12;
    std::uint64_t gen_seed = 0;
    lst::corpus::SynthConfig synth;
    gen->add_option("--out", gen_out, "output jsonl path")->required();
    gen->add_option("--n", gen_n, "number of utterances");
    gen->add_option("--min-words", gen_min_words);
    gen->add_option("--max-words", gen_max_words);
    gen->add_option("--seed", gen_seed)->envname("LST_SEED");
    gen->add_option("--n-word-types", synth.n_word_types);
    gen->add_option("--speech-vocab", synth.speech_vocab);
    gen->add_option("--text-vocab", synth.text_vocab);
    gen->add_option("--sil-prob", synth.sil_prob);
    gen->add_option("--noise-prob", synth.noise_prob);
    gen->add_option("--tokens-per-word", synth.tokens_per_word);
    gen->add_option("--language-seed", synth.language_seed);

    // ---- train
    auto* tr = app.add_subcommand("train", "train an lst or baseline model");
    std::string tr_config, tr_corpus, tr_out, tr_mode = "lst", tr_resume;
    std::string tr_patching, tr_stream, tr_budget;
    std::uint64_t tr_seed = 0;
    std::int64_t tr_patch_size = 0, tr_bpe_vocab = 1000;
    lst::train::TrainConfig tc;
    tr->add_option("--config", tr_config, "model config json")->required();
    tr->add_option("--corpus", tr_corpus, "training corpus jsonl")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--mode", tr_mode, "lst|base|bpe");
    tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
    tr->add_option("--seed", tr_seed)->envname("LST_SEED");
    tr->add_option("--patching", tr_patching, "override the config patch mode");
    tr->add_option("--patch-size", tr_patch_size, "override the static patch size");
    tr->add_option("--bpe-vocab", tr_bpe_vocab, "speech bpe vocab for bpe modes");
    tr->add_option("--steps", tc.total_steps, "total optimizer steps");
    tr->add_option("--run-steps", tc.run_steps, "cap steps this invocation (0 = to completion)");
    tr->add_option("--warmup", tc.warmup);
    tr->add_option("--lr", tc.lr);
    tr->add_option("--batch-size", tc.batch_size);
    tr->add_option("--grad-clip", tc.grad_clip);
    tr->add_option("--stream", tr_stream, "mixed|interleaved|speech|text");
    tr->add_option("--budget", tr_budget, "compute|data");
    tr->add_option("--max-units", tc.max_units, "global-unit budget (compute)");
    tr->add_option("--max-raw-tokens", tc.max_raw_tokens, "raw-token budget (data)");
    tr->add_option("--mix-interleaved", tc.mix_interleaved);
    tr->add_option("--mix-text", tc.mix_text);
    tr->add_option("--checkpoint-every", tc.checkpoint_every);
    tr->add_option("--eval-every", tc.eval_every);

    // ---- eval
    auto* ev = app.add_subcommand("eval", "multiple-choice likelihood evaluation");
    std::string ev_ckpt, ev_config, ev_corpus, ev_records, ev_out, ev_mode = "lst";
    std::string ev_modality = "speech", ev_norm = "sum", ev_bpe_table;
    std::int64_t ev_choices = 2, ev_max_records = 0;
    bool ev_no_match = false;
    std::uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
    ev->add_option("--config", ev_config, "model config json")->required();
    ev->add_option("--out", ev_out, "report directory")->required();
    ev->add_option("--mode", ev_mode, "lst|base|bpe");
    ev->add_option("--corpus", ev_corpus, "held-out corpus jsonl to build records from");
    ev->add_option("--records", ev_records, "pre-built eval records jsonl");
    ev->add_option("--modality", ev_modality, "speech|text");
    ev->add_option("--n-choices", ev_choices, "2 or 4");
    ev->add_option("--normalization", ev_norm, "sum|per_token");
    ev->add_flag("--no-match-length", ev_no_match, "keep candidate lengths unequal");
    ev->add_option("--max-records", ev_max_records, "cap the record count (0 = all)");
    ev->add_option("--bpe-table", ev_bpe_table, "speech bpe table for bpe modes");
    ev->add_option("--seed", ev_seed)->envname("LST_SEED");

    // ---- patch-inspect
    auto* pi = app.add_subcommand("patch-inspect", "print a segmentation for one utterance");
    std::string pi_corpus, pi_patching = "static", pi_out_dir = ".";
    std::int64_t pi_index = 0, pi_patch_size = 4, pi_step = 0;
    std::uint64_t pi_seed = 0;
    pi->add_option("--corpus", pi_corpus)->required();
    pi->add_option("--index", pi_index, "utterance index");
    pi->add_option("--patching", pi_patching, "static|aligned|aligned_merged|mixed|curriculum|bpe");
    pi->add_option("--patch-size", pi_patch_size);
    pi->add_option("--step", pi_step, "training step for curriculum draws");
    pi->add_option("--out-dir", pi_out_dir, "where the run manifest lands");
    pi->add_option("--seed", pi_seed)->envname("LST_SEED");

    // ---- plot-csv
    auto* pc = app.add_subcommand("plot-csv", "render csv columns as an svg line chart");
    std::string pc_csv, pc_x = "step", pc_out, pc_title = "training curves";
    std::vector<std::string> pc_y{"loss"};
    pc->add_option("--csv", pc_csv)->required();
    pc->add_option("--x", pc_x, "x column");
    pc->add_option("--y", pc_y, "y columns")->delimiter(',');
    pc->add_option("--out", pc_out, "output svg path")->required();
    pc->add_option("--title", pc_title);

    // ---- cluster-stats
    auto* cs = app.add_subcommand("cluster-stats", "word patch-embedding cluster statistics");
    std::string cs_ckpt, cs_config, cs_corpus, cs_out_dir = ".";
    std::int64_t cs_max_per_word = 32, cs_top_words = 0;
    std::uint64_t cs_seed = 0;
    cs->add_option("--ckpt", cs_ckpt, "checkpoint directory")->required();
    cs->add_option("--config", cs_config, "lst model config json")->required();
    cs->add_option("--corpus", cs_corpus)->required();
    cs->add_option("--max-per-word", cs_max_per_word);
    cs->add_option("--top-words", cs_top_words, "restrict to the n most frequent words (0 = all)");
    cs->add_option("--out-dir", cs_out_dir);
    cs->add_option("--seed", cs_seed)->envname("LST_SEED");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) {
            synth.validate();
            if (!fs::path(gen_out).parent_path().empty())
                ensure_dir(fs::path(gen_out).parent_path().string());
            emit_manifest(gen_out + ".manifest.json", cmdline, "", gen_seed, {gen_out});
            auto utts =
                lst::corpus::synth_corpus(gen_seed, gen_n, gen_min_words, gen_max_words, synth);
            lst::corpus::write_corpus_jsonl(gen_out, utts);
            std::cout << "wrote " << utts.size() << " utterances to " << gen_out << "\n";
        } else if (tr->parsed()) {
            const std::string config_text = slurp(tr_config);
            ensure_dir(tr_out);
            emit_manifest(tr_out + "/manifest.train.json", cmdline, config_text, tr_seed,
                          {tr_out + "/metrics.csv", tr_out + "/ledger.json",
                           tr_out + "/checkpoint"});

            BuiltModel bm = build_model(tr_mode, config_text, tr_seed);
            if (bm.lst != nullptr && (!tr_patching.empty() || tr_patch_size > 0)) {
                auto cfg = bm.lst->config();
                if (!tr_patching.empty()) cfg.patch_mode = tr_patching;
                if (tr_patch_size > 0) cfg.patch_size = tr_patch_size;
                cfg.validate();
                bm = BuiltModel{};
                auto m = std::make_unique<lst::model::LstModel>(cfg, tr_seed);
                bm.lst = m.get();
                bm.model = std::move(m);
            }
            auto utts = lst::corpus::read_corpus_jsonl(tr_corpus);
            if (needs_bpe(bm, tr_mode)) {
                const std::int64_t base = bm.lst != nullptr
                                              ? bm.lst->config().speech_vocab
                                              : dynamic_cast<lst::model::BaselineModel&>(*bm.model)
                                                    .config()
                                                    .speech_vocab;
                auto table = lst::bpe::train_speech_bpe(speech_streams(utts), base, tr_bpe_vocab);
                table.save(tr_out + "/speech_bpe.json");
                attach_bpe(bm, tr_mode, std::move(table));
            }
            if (!tr_stream.empty()) tc.stream = tr_stream;
            if (!tr_budget.empty()) tc.budget = tr_budget;
            tc.seed = tr_seed;
            auto res = lst::train::train(*bm.model, tc, utts, tr_out, {}, tr_resume);
            std::cout << "trained " << res.steps_done << " steps, stop=" << res.stop_reason
                      << ", loss=" << res.final_loss << ", units=" << res.ledger.global_units
                      << ", raw_tokens=" << res.ledger.raw_tokens << "\n";
        } else if (ev->parsed()) {
            const std::string config_text = slurp(ev_config);
            ensure_dir(ev_out);
            emit_manifest(ev_out + "/manifest.eval.json", cmdline, config_text, ev_seed,
                          {ev_out + "/eval_report.json"});
            BuiltModel bm = build_model(ev_mode, config_text, ev_seed);
            if (needs_bpe(bm, ev_mode)) {
                if (ev_bpe_table.empty())
                    throw lst::ConfigError("bpe model needs --bpe-table", "cli.bpe_table");
                attach_bpe(bm, ev_mode, lst::bpe::SpeechBpe::load(ev_bpe_table));
            }
            load_weights(*bm.model, ev_ckpt);

            std::vector<lst::eval::EvalRecord> records;
            if (!ev_records.empty()) {
                records = lst::eval::read_records(ev_records);
            } else if (!ev_corpus.empty()) {
                lst::eval::EvalGenConfig gc;
                gc.modality = ev_modality;
                gc.n_choices = ev_choices;
                gc.match_length = !ev_no_match;
                gc.seed = ev_seed;
                records = lst::eval::make_eval_records(lst::corpus::read_corpus_jsonl(ev_corpus), gc);
            } else {
                throw lst::ConfigError("eval needs --records or --corpus", "cli.records");
            }
            if (ev_max_records > 0 && static_cast<std::int64_t>(records.size()) > ev_max_records)
                records.resize(ev_max_records);
            auto rep = lst::eval::evaluate(*bm.model, records,
                                           lst::eval::parse_normalization(ev_norm));
            std::ofstream f(ev_out + "/eval_report.json", std::ios::trunc);
            if (!f) throw lst::IoError("cannot open " + ev_out + "/eval_report.json");
            f << "{\n  \"accuracy\": " << rep.accuracy
              << ",\n  \"mean_nll_diff\": " << rep.mean_nll_diff
              << ",\n  \"n_scored\": " << rep.n_scored << ",\n  \"n_skipped\": " << rep.n_skipped
              << ",\n  \"units\": " << rep.units << ",\n  \"normalization\": \"" << ev_norm
              << "\",\n  \"modality\": \"" << ev_modality << "\"\n}\n";
            std::cout << "accuracy=" << rep.accuracy << " nll_diff=" << rep.mean_nll_diff
                      << " scored=" << rep.n_scored << " skipped=" << rep.n_skipped << "\n";
        } else if (pi->parsed()) {
            ensure_dir(pi_out_dir);
            emit_manifest(pi_out_dir + "/manifest.patch-inspect.json", cmdline, "", pi_seed, {});
            auto utts = lst::corpus::read_corpus_jsonl(pi_corpus);
            if (pi_index < 0 || pi_index >= static_cast<std::int64_t>(utts.size()))
                throw lst::ConfigError("utterance index out of range", "cli.index");
            const auto& u = utts[pi_index];
            const auto T = static_cast<std::int64_t>(u.speech_tokens.size());

            lst::patching::PatchSegmentation seg;
            if (pi_patching == "static") {
                seg = lst::patching::static_patch(T, pi_patch_size);
            } else if (pi_patching == "aligned" || pi_patching == "aligned_merged") {
                seg = lst::patching::aligned_patch(T, u.alignment,
                                                   pi_patching == "aligned_merged"
                                                       ? lst::patching::SilenceMode::merged
                                                       : lst::patching::SilenceMode::separate);
            } else if (pi_patching == "bpe") {
                auto table = lst::bpe::train_speech_bpe(speech_streams(utts), synth.speech_vocab,
                                                        synth.speech_vocab + 200);
                std::vector<std::int64_t> counts;
                for (const auto& sp : u.alignment) {
                    std::vector<std::int64_t> word(u.speech_tokens.begin() + sp.b,
                                                   u.speech_tokens.begin() + sp.e + 1);
                    const auto enc = static_cast<std::int64_t>(table.encode(word).size());
                    counts.push_back(std::clamp<std::int64_t>(enc, 1, sp.e - sp.b + 1));
                }
                seg = lst::patching::bpe_aligned_patch(T, u.alignment, counts);
            } else if (pi_patching == "mixed" || pi_patching == "curriculum") {
                lst::Rng rng = lst::Rng(pi_seed).substream("patch");
                const auto mode = pi_patching == "mixed" ? lst::patching::PatchMode::mixed
                                                         : lst::patching::PatchMode::curriculum;
                const auto strat = lst::patching::select_patching(pi_step, rng, mode, {0, 1},
                                                                  !u.alignment.empty());
                seg = strat == lst::patching::Strategy::aligned
                          ? lst::patching::aligned_patch(T, u.alignment,
                                                         lst::patching::SilenceMode::separate)
                          : lst::patching::static_patch(T, pi_patch_size);
            } else {
                throw lst::ConfigError("unknown patching '" + pi_patching + "'", "cli.patching");
            }
            seg.validate();
            std::cout << "utterance " << pi_index << ": " << T << " frames, "
                      << u.text_tokens.size() << " words, " << seg.count() << " patches ("
                      << pi_patching << ")\n";
            for (std::size_t k = 0; k < seg.segments.size(); ++k) {
                const auto& s = seg.segments[k];
                std::cout << "  patch " << k << "  [" << s.start << ", " << s.end << "]  len "
                          << s.length() << "  " << kind_name(s.kind) << "  frames";
                for (std::int64_t i = s.start; i <= s.end; ++i)
                    std::cout << ' ' << u.speech_tokens[i];
                std::cout << "\n";
            }
            std::cout << "compression: " << T << " frames -> " << seg.count() << " units ("
                      << (T > 0 ? static_cast<double>(T) / seg.count() : 0.0) << "x)\n";
        } else if (pc->parsed()) {
            if (!fs::path(pc_out).parent_path().empty())
                ensure_dir(fs::path(pc_out).parent_path().string());
            emit_manifest(pc_out + ".manifest.json", cmdline, "", 0, {pc_out});
            lst::plot::plot_csv(pc_csv, pc_x, pc_y, pc_out, pc_title);
            std::cout << "wrote " << pc_out << "\n";
        } else if (cs->parsed()) {
            const std::string config_text = slurp(cs_config);
            ensure_dir(cs_out_dir);
            emit_manifest(cs_out_dir + "/manifest.cluster-stats.json", cmdline, config_text,
                          cs_seed, {cs_out_dir + "/cluster_stats.json"});
            auto cfg = lst::model::ModelConfig::from_json_text(config_text);
            lst::model::LstModel m(cfg, cs_seed);
            load_weights(m, cs_ckpt);
            auto utts = lst::corpus::read_corpus_jsonl(cs_corpus);
            std::vector<std::int64_t> word_set;
            if (cs_top_words > 0) word_set = lst::eval::top_words(utts, cs_top_words);
            auto st = lst::eval::cluster_stats(m, utts, cs_max_per_word, word_set);
            std::ofstream f(cs_out_dir + "/cluster_stats.json", std::ios::trunc);
            if (!f) throw lst::IoError("cannot open " + cs_out_dir + "/cluster_stats.json");
            f << "{\n  \"within\": " << st.within << ",\n  \"between\": " << st.between
              << ",\n  \"silhouette\": " << st.silhouette << ",\n  \"n_words\": " << st.n_words
              << ",\n  \"n_embeddings\": " << st.n_embeddings
              << ",\n  \"excluded_words\": " << st.excluded_words << "\n}\n";
            std::cout << "within=" << st.within << " between=" << st.between
                      << " silhouette=" << st.silhouette << " words=" << st.n_words
                      << " embeddings=" << st.n_embeddings << " excluded=" << st.excluded_words
                      << "\n";
        }
    } catch (const lst::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const lst::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
