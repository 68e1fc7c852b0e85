#include "tulip/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include <json.hpp>
#include <openssl/evp.h>

#include "tulip/error.hpp"
#include "tulip/eval.hpp"

namespace tulip {

namespace {

using Json = nlohmann::ordered_json;

struct Sha256 {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();

    Sha256() {
        if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx, data, n) != 1) throw Error("SHA-256 update failed");
    }
    std::string hex() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) throw Error("SHA-256 final failed");
        std::string out;
        char buf[3];
        for (unsigned int i = 0; i < len; ++i) {
            std::snprintf(buf, sizeof buf, "%02x", digest[i]);
            out += buf;
        }
        return out;
    }
};

Json artifacts_json(const std::vector<Artifact>& list) {
    Json out = Json::array();
    for (const auto& a : list) out.push_back({{"role", a.role}, {"path", a.path.string()}, {"sha256", a.sha256}});
    return out;
}

std::vector<Artifact> artifacts_from(const Json& j) {
    std::vector<Artifact> out;
    for (const auto& a : j)
        out.push_back({a.at("role").get<std::string>(), a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
    return out;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Sha256 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

void RunManifest::add_input(const std::string& role, const std::filesystem::path& path) {
    inputs.push_back({role, path, sha256_file(path)});
}

void RunManifest::add_output(const std::string& role, const std::filesystem::path& path) {
    outputs.push_back({role, path, sha256_file(path)});
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string manifest_json(const RunManifest& m) {
    Json j;
    j["command"] = m.command;
    j["arguments"] = m.arguments;
    j["seed"] = m.seed;
    j["config"] = m.config;
    j["inputs"] = artifacts_json(m.inputs);
    j["outputs"] = artifacts_json(m.outputs);
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    return j.dump(2) + "\n";
}

RunManifest parse_manifest_json(std::string_view text) {
    try {
        const Json j = Json::parse(text);
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.arguments = j.at("arguments").get<std::vector<std::string>>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config = j.at("config").get<std::map<std::string, std::string>>();
        m.inputs = artifacts_from(j.at("inputs"));
        m.outputs = artifacts_from(j.at("outputs"));
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what(), 1);
    }
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
    write_text_file(path, manifest_json(manifest));
}

}  // namespace tulip
