#pragma once

#include <map>
#include <string>

#include "lst/tensor.hpp"

namespace lst::ckpt {

// On-disk layout: <dir>/manifest.json listing name -> shape + byte offset
// (plus free-form string extras), and <dir>/weights.bin holding raw
// little-endian 32-bit floats in manifest order.
struct Checkpoint {
    std::map<std::string, ad::Tensor> tensors;
    std::map<std::string, std::string> extras;
};

void save(const std::string& dir, const std::map<std::string, ad::Tensor>& tensors,
          const std::map<std::string, std::string>& extras);
Checkpoint load(const std::string& dir);

// Rounds every value through storage precision, exactly matching one
// save/load cycle; callers quantize live state after saving so an in-process
// continuation and a resumed process stay bit-identical.
void quantize(std::map<std::string, ad::Tensor>& tensors);

}  // namespace lst::ckpt
