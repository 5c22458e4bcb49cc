#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "stella/data/data.hpp"
#include "stella/numcore/checkpoint.hpp"

namespace stella::memory {

using nc::Tensor;

enum class Layout : std::uint8_t { raw = 0, selected = 1 };

/// One stored training pair. Optional parts are undefined tensors / empty
/// vectors: queries and scores belong to the selection strategies, features
/// to the penalty strategies, grid indices to the selected layout.
struct RehearsalEntry {
    Layout layout = Layout::raw;
    Tensor audio;  // [n_a, Pa]
    Tensor video;  // [n_v, Pv]
    std::vector<std::size_t> audio_idx;  // selected layout: original grid positions
    std::vector<std::size_t> video_idx;
    Tensor q_a, q_v;                     // [H, d] pooled queries
    std::vector<double> i_a, i_v;        // raw layout importance
    std::vector<double> c_a, c_v;        // raw layout correlation (0 where unscored)
    Tensor feat_a, feat_v;               // [D] contrastive features at insertion
    std::uint64_t step = 0;
    std::uint64_t task = 0;  // diagnostics only

    bool has_queries() const { return q_a.defined(); }
    bool has_scores() const { return !i_a.empty(); }
    bool has_features() const { return feat_a.defined(); }
    /// Bytes of the stored patch values alone.
    std::size_t patch_bytes() const;
};

class MemoryError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Reservoir sampling (algorithm R) over a stream of entries.
class ReservoirMemory {
   public:
    explicit ReservoirMemory(std::size_t capacity = 0) : capacity_(capacity) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::uint64_t seen() const { return seen_; }
    const RehearsalEntry& at(std::size_t i) const { return entries_.at(i); }

    /// Returns the slot written, or capacity() when the item was dropped.
    std::size_t insert(RehearsalEntry entry, Rng& rng);

    /// B indices drawn uniformly with replacement; throws MemoryError if empty.
    std::vector<std::size_t> sample(std::size_t count, Rng& rng) const;

    void restore(std::size_t capacity, std::uint64_t seen, std::vector<RehearsalEntry> entries);

   private:
    std::size_t capacity_;
    std::uint64_t seen_ = 0;
    std::vector<RehearsalEntry> entries_;
};

/// Stacked replay rows aligned with the sampled indices.
struct ReplayBatch {
    data::PatchSet audio;
    data::PatchSet video;
    Tensor q_a, q_v;                  // [B, H, d] when stored
    std::vector<double> i_a, i_v;     // B x n when stored
    std::vector<double> c_a, c_v;
    Tensor feat_a, feat_v;            // [B, D] when stored
    std::size_t size() const { return audio.batch(); }
};

/// Throws MemoryError when the chosen entries disagree in layout or shape.
ReplayBatch assemble(const ReservoirMemory& mem, const std::vector<std::size_t>& rows, const data::Geometry& geometry);

/// MSE(c_a, stored_a) + MSE(c_v, stored_v); stored features are constants.
Tensor der_penalty(const Tensor& c_a, const Tensor& c_v, const Tensor& stored_a, const Tensor& stored_v);

/// Capacity for selected-layout entries whose patch bytes match those of
/// `raw_capacity` raw entries: floor(raw_capacity * raw_bytes / selected_bytes).
std::size_t equalized_capacity(std::size_t raw_capacity, std::size_t raw_patch_bytes, std::size_t selected_patch_bytes);

// Snapshot: "STMM" | u32 version | u64 capacity | u64 seen | u64 count |
// per entry a checkpoint entry list (u64 count + named tensors).
inline constexpr char kMemoryMagic[4] = {'S', 'T', 'M', 'M'};
inline constexpr std::uint32_t kMemoryVersion = 1;
inline constexpr std::size_t kMemoryHeaderBytes = 4 + 4 + 8 + 8 + 8;

std::vector<nc::NamedTensor> entry_tensors(const RehearsalEntry& e);
RehearsalEntry entry_from_tensors(const std::vector<nc::NamedTensor>& t);

/// Exact serialized size of one entry / of the whole snapshot.
std::size_t entry_bytes(const RehearsalEntry& e);
std::size_t memory_bytes(const ReservoirMemory& mem);

void write_memory(std::ostream& os, const ReservoirMemory& mem);
ReservoirMemory read_memory(std::istream& is);
void save_memory(const std::filesystem::path& path, const ReservoirMemory& mem);
ReservoirMemory load_memory(const std::filesystem::path& path);

}  // namespace stella::memory
