#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace stella::data {

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Writes `manifest.json` in `dir` listing each file with its size and digest.
void write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files,
                    const std::string& extra_json = "{}");

/// Re-hashes every listed file; throws DataError on a missing or altered file.
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

}  // namespace stella::data
