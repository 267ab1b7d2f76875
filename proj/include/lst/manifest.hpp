#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lst::manifest {

// Written to the output directory before any work starts and never touched
// again; records enough to reproduce the run.
struct RunManifest {
    std::string command_line;
    std::string config_hash;  // fnv1a64 hex of the config text ("-" when configless)
    std::uint64_t seed = 0;
    std::string version = "lst-0.1.0";
    std::string started_at;  // UTC, ISO-8601
    std::vector<std::string> outputs;

    std::string to_json() const;
};

std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t v);
std::string utc_now();

void write_manifest(const std::string& path, const RunManifest& m);

}  // namespace lst::manifest
