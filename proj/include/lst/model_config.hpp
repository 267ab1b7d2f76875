#pragma once

#include <cstdint>
#include <string>

#include "lst/error.hpp"
#include "lst/patching.hpp"

namespace lst::model {

// Desk-scale defaults; the reference configuration this is scaled down from
// uses d 1024/2048, layers 1/25/9 and a local window of 512.
struct ModelConfig {
    std::int64_t d_local = 64;
    std::int64_t d_global = 128;
    std::int64_t n_layers_enc = 1;
    std::int64_t n_layers_global = 4;
    std::int64_t n_layers_dec = 2;
    std::int64_t n_heads = 4;
    std::int64_t window = 64;  // local attention window W, includes self
    double rope_theta = 5e5;
    std::int64_t speech_vocab = 501;
    std::int64_t text_vocab = 512;
    std::int64_t context_len = 256;  // packed row length L

    std::string patch_mode = "static";  // static|aligned|aligned_merged|mixed|curriculum|bpe
    std::int64_t patch_size = 4;        // static p, also inference patch size
    std::int64_t tau1 = 0;              // curriculum knees
    std::int64_t tau2 = 1;

    bool predict_markers = true;  // modality markers are ordinary text targets
    bool local_decoder_predicts_text = false;  // listed for completeness; rejected when set
    double init_scale = 0.02;

    void validate() const;
    patching::PatchMode parsed_patch_mode() const;
    patching::SilenceMode silence_mode() const;  // merged only for aligned_merged

    std::string to_json() const;
    static ModelConfig from_json_text(const std::string& text);
    static ModelConfig from_json_file(const std::string& path);
};

struct BaselineConfig {
    std::string kind = "base";  // base|bpe
    std::int64_t d_model = 128;
    std::int64_t n_layers = 4;
    std::int64_t n_heads = 4;
    double rope_theta = 5e5;
    std::int64_t speech_vocab = 501;  // 0 = text-only model
    std::int64_t text_vocab = 512;
    std::int64_t context_len = 256;
    std::int64_t bpe_vocab = 1000;  // bpe kind only
    double init_scale = 0.02;

    void validate() const;
    std::string to_json() const;
    static BaselineConfig from_json_text(const std::string& text);
    static BaselineConfig from_json_file(const std::string& path);
};

}  // namespace lst::model
