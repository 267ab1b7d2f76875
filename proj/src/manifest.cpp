#include "lst/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <fstream>

#include "json.hpp"
#include "lst/error.hpp"

namespace lst::manifest {

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string utc_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string RunManifest::to_json() const {
    nlohmann::json j;
    j["command_line"] = command_line;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["version"] = version;
    j["started_at"] = started_at;
    j["outputs"] = outputs;
    return j.dump(2);
}

void write_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open " + path);
    f << m.to_json() << '\n';
    if (!f) throw IoError("failed writing " + path);
}

}  // namespace lst::manifest
