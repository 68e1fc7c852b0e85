#pragma once

#include <filesystem>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace tulip {

// Lowercase hex SHA-256 of a byte string or file. Throws IoError for unreadable files.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Artifact {
    std::string role;
    std::filesystem::path path;
    std::string sha256;
};

struct RunManifest {
    std::string command;
    std::vector<std::string> arguments;
    std::map<std::string, std::string> config;
    std::uint64_t seed = 0;
    std::vector<Artifact> inputs;
    std::vector<Artifact> outputs;
    std::string started_at;   // UTC, ISO 8601
    std::string finished_at;

    void add_input(const std::string& role, const std::filesystem::path& path);
    void add_output(const std::string& role, const std::filesystem::path& path);
};

std::string utc_timestamp();
std::string manifest_json(const RunManifest& manifest);
RunManifest parse_manifest_json(std::string_view text);
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace tulip
