#include "stella/data/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include "json.hpp"

#include "stella/data/data.hpp"

namespace stella::data {

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open " + path.string());
    }
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
        throw DataError("sha256 init failed");
    }
    std::array<char, 1 << 16> buf{};
    while (is) {
        is.read(buf.data(), buf.size());
        if (is.gcount() > 0) {
            EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
        }
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 15]);
    }
    return out;
}

void write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files,
                    const std::string& extra_json) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["meta"] = nlohmann::json::parse(extra_json);
    j["files"] = nlohmann::json::array();
    for (const auto& f : files) {
        auto p = dir / f;
        j["files"].push_back({{"name", f}, {"bytes", std::filesystem::file_size(p)}, {"sha256", sha256_file(p)}});
    }
    std::ofstream os(dir / "manifest.json");
    os << j.dump(2) << "\n";
    if (!os) {
        throw DataError("failed to write manifest in " + dir.string());
    }
}

std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) {
        throw DataError("missing manifest.json in " + dir.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    std::vector<std::string> names;
    for (const auto& f : j.at("files")) {
        const std::string name = f.at("name").get<std::string>();
        if (!std::filesystem::exists(dir / name)) {
            throw DataError("manifest lists missing file " + name);
        }
        if (sha256_file(dir / name) != f.at("sha256").get<std::string>()) {
            throw DataError("checksum mismatch for " + name + " (file was modified)");
        }
        names.push_back(name);
    }
    return names;
}

}  // namespace stella::data
