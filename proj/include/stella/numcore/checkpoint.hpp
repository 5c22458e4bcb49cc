#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stella/numcore/tensor.hpp"

namespace stella::nc {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Container layout, all integers little-endian:
//   "STCK" | u32 version | u64 count | entries...
// Entry:
//   u64 name_len | name bytes (UTF-8) | u64 rank | u64 extents[rank] | f64 payload[numel]
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

/// u64 count followed by the entries (no magic); embedded by other formats.
void write_entries(std::ostream& os, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_entries(std::istream& is);
std::size_t entry_bytes(const NamedTensor& entry);

void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Finds an entry by name; throws FormatError when missing.
const Tensor& find_tensor(const std::vector<NamedTensor>& entries, const std::string& name);

}  // namespace stella::nc
