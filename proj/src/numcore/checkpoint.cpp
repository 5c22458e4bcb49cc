#include "stella/numcore/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace stella::nc {

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
    std::array<char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> buf{};
    is.read(reinterpret_cast<char*>(buf.data()), buf.size());
    if (!is) {
        throw FormatError("unexpected end of tensor stream");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(buf[i]) << (8 * i);
    }
    return v;
}

constexpr std::uint64_t kMaxNameLen = 1 << 16;
constexpr std::uint64_t kMaxRank = 16;

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

std::size_t entry_bytes(const NamedTensor& entry) {
    return 8 + entry.name.size() + 8 + 8 * entry.tensor.rank() + 8 * entry.tensor.numel();
}

void write_entries(std::ostream& os, const std::vector<NamedTensor>& entries) {
    write_u64(os, entries.size());
    for (const auto& e : entries) {
        write_u64(os, e.name.size());
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_u64(os, e.tensor.rank());
        for (auto extent : e.tensor.shape()) {
            write_u64(os, extent);
        }
        for (double v : e.tensor.data()) {
            write_f64(os, v);
        }
    }
    if (!os) {
        throw FormatError("failed writing tensor stream");
    }
}

std::vector<NamedTensor> read_entries(std::istream& is) {
    std::uint64_t count = read_u64(is);
    std::vector<NamedTensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint64_t len = read_u64(is);
        if (len > kMaxNameLen) {
            throw FormatError("tensor name too long");
        }
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        std::uint64_t rank = read_u64(is);
        if (rank > kMaxRank) {
            throw FormatError("tensor rank too large in entry '" + name + "'");
        }
        Shape shape(rank);
        for (auto& e : shape) {
            e = read_u64(is);
        }
        std::vector<double> values(numel_of(shape));
        for (auto& v : values) {
            v = read_f64(is);
        }
        out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    }
    return out;
}

void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& entries) {
    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_entries(os, entries);
}

std::vector<NamedTensor> read_checkpoint(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError("not a checkpoint stream (bad magic)");
    }
    auto version = read_u32(is);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    return read_entries(is);
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    write_checkpoint(os, entries);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open " + path.string());
    }
    return read_checkpoint(is);
}

const Tensor& find_tensor(const std::vector<NamedTensor>& entries, const std::string& name) {
    for (const auto& e : entries) {
        if (e.name == name) {
            return e.tensor;
        }
    }
    throw FormatError("checkpoint has no tensor named '" + name + "'");
}

}  // namespace stella::nc
