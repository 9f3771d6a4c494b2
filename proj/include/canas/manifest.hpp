#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace canas {

inline constexpr const char* kToolVersion = "0.1.0";

std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t value);

// Provenance sidecar written next to every output artifact.
struct RunManifest {
    std::string tool_version = kToolVersion;
    std::string command_line;
    std::uint64_t config_hash = 0;
    std::uint64_t space_hash = 0;
    std::uint64_t seed = 0;
    std::string started_at;   // ISO-8601 UTC
    std::string finished_at;
};

// Writes JSON atomically (temp file + rename in the target directory).
void write_manifest(const std::string& path, const RunManifest& manifest);

std::string iso8601_utc_now();

void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace canas
