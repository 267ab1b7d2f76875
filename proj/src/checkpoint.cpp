#include "lst/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lst/error.hpp"

namespace lst::ckpt {

using nlohmann::json;

namespace fs = std::filesystem;

void save(const std::string& dir, const std::map<std::string, ad::Tensor>& tensors,
          const std::map<std::string, std::string>& extras) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir " + dir + ": " + ec.message());

    json manifest;
    manifest["tensors"] = json::array();
    std::ofstream bin(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write weights in " + dir);
    std::int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        manifest["tensors"].push_back(entry);
        std::vector<float> buf(static_cast<std::size_t>(t.numel()));
        for (std::int64_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t[i]);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        offset += t.numel() * static_cast<std::int64_t>(sizeof(float));
    }
    if (!bin) throw IoError("short write to weights in " + dir);
    bin.close();

    manifest["extras"] = extras;
    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("short write to manifest in " + dir);
}

Checkpoint load(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot open manifest in " + dir);
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) throw IoError("manifest in " + dir + " is not valid JSON");

    std::ifstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw IoError("cannot open weights in " + dir);

    Checkpoint out;
    try {
        for (const auto& [k, v] : manifest.at("extras").items())
            out.extras[k] = v.get<std::string>();
        for (const auto& entry : manifest.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = entry.at("offset").get<std::int64_t>();
            ad::Tensor t = ad::Tensor::zeros(shape);
            std::vector<float> buf(static_cast<std::size_t>(t.numel()));
            bin.seekg(offset);
            bin.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(buf.size() * sizeof(float)));
            if (!bin) throw IoError("weights in " + dir + " truncated at " + name);
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(buf[i]);
            out.tensors.emplace(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw IoError("bad manifest in " + dir + ": " + e.what());
    }
    return out;
}

void quantize(std::map<std::string, ad::Tensor>& tensors) {
    for (auto& [name, t] : tensors)
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<double>(static_cast<float>(t[i]));
}

}  // namespace lst::ckpt
