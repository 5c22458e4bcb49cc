#include "stella/memory/memory.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "stella/numcore/ops.hpp"

namespace stella::memory {

namespace {

Tensor vec_tensor(const std::vector<double>& v) { return Tensor::from({v.size()}, v); }

Tensor idx_tensor(const std::vector<std::size_t>& v) {
    std::vector<double> d(v.begin(), v.end());
    return Tensor::from({v.size()}, std::move(d));
}

std::vector<double> tensor_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<std::size_t> tensor_idx(const Tensor& t) {
    std::vector<std::size_t> out;
    out.reserve(t.numel());
    for (double x : t.data()) {
        if (x < 0 || x != static_cast<double>(static_cast<std::size_t>(x))) {
            throw nc::FormatError("memory snapshot: bad patch index");
        }
        out.push_back(static_cast<std::size_t>(x));
    }
    return out;
}

const Tensor* find(const std::vector<nc::NamedTensor>& t, const std::string& name) {
    for (const auto& e : t) {
        if (e.name == name) return &e.tensor;
    }
    return nullptr;
}

// Stacks row tensors [n, ...] into [B, n, ...].
Tensor stack_field(const std::vector<const Tensor*>& rows, const char* what) {
    std::vector<Tensor> parts;
    parts.reserve(rows.size());
    for (const Tensor* t : rows) {
        if (!t->defined()) {
            throw MemoryError(std::string("replay rows disagree: missing ") + what);
        }
        if (t->shape() != rows.front()->shape()) {
            throw MemoryError(std::string("replay rows disagree in ") + what + " shape");
        }
        parts.push_back(*t);
    }
    return nc::stack(parts);
}

}  // namespace

std::size_t RehearsalEntry::patch_bytes() const { return 8 * (audio.numel() + video.numel()); }

std::size_t ReservoirMemory::insert(RehearsalEntry entry, Rng& rng) {
    ++seen_;
    if (entries_.size() < capacity_) {
        entries_.push_back(std::move(entry));
        return entries_.size() - 1;
    }
    if (capacity_ == 0) {
        return capacity_;
    }
    std::size_t j = rng.index(static_cast<std::size_t>(seen_));
    if (j < capacity_) {
        entries_[j] = std::move(entry);
        return j;
    }
    return capacity_;
}

std::vector<std::size_t> ReservoirMemory::sample(std::size_t count, Rng& rng) const {
    if (entries_.empty()) {
        throw MemoryError("cannot sample from an empty memory");
    }
    std::vector<std::size_t> out(count);
    for (auto& i : out) i = rng.index(entries_.size());
    return out;
}

void ReservoirMemory::restore(std::size_t capacity, std::uint64_t seen, std::vector<RehearsalEntry> entries) {
    if (entries.size() > capacity || seen < entries.size()) {
        throw MemoryError("memory restore: inconsistent counts");
    }
    capacity_ = capacity;
    seen_ = seen;
    entries_ = std::move(entries);
}

ReplayBatch assemble(const ReservoirMemory& mem, const std::vector<std::size_t>& rows, const data::Geometry& geometry) {
    if (rows.empty()) {
        throw MemoryError("assemble: no rows");
    }
    const RehearsalEntry& first = mem.at(rows.front());
    std::vector<const Tensor*> a, v, qa, qv, fa, fv;
    ReplayBatch out;
    const std::size_t b = rows.size();
    for (auto r : rows) {
        const RehearsalEntry& e = mem.at(r);
        if (e.layout != first.layout || e.has_queries() != first.has_queries() ||
            e.has_scores() != first.has_scores() || e.has_features() != first.has_features()) {
            throw MemoryError("assemble: entries with different contents");
        }
        a.push_back(&e.audio);
        v.push_back(&e.video);
        qa.push_back(&e.q_a);
        qv.push_back(&e.q_v);
        fa.push_back(&e.feat_a);
        fv.push_back(&e.feat_v);
        if (e.has_scores()) {
            out.i_a.insert(out.i_a.end(), e.i_a.begin(), e.i_a.end());
            out.i_v.insert(out.i_v.end(), e.i_v.begin(), e.i_v.end());
            out.c_a.insert(out.c_a.end(), e.c_a.begin(), e.c_a.end());
            out.c_v.insert(out.c_v.end(), e.c_v.begin(), e.c_v.end());
        }
    }
    out.audio.modality = data::Modality::audio;
    out.audio.grid = data::audio_grid(geometry.audio);
    out.audio.patches = stack_field(a, "audio");
    out.video.modality = data::Modality::video;
    out.video.grid = data::video_grid(geometry.video);
    out.video.patches = stack_field(v, "video");
    for (auto r : rows) {
        const RehearsalEntry& e = mem.at(r);
        if (e.layout == Layout::raw) {
            for (std::size_t i = 0; i < e.audio.dim(0); ++i) out.audio.indices.push_back(i);
            for (std::size_t i = 0; i < e.video.dim(0); ++i) out.video.indices.push_back(i);
        } else {
            out.audio.indices.insert(out.audio.indices.end(), e.audio_idx.begin(), e.audio_idx.end());
            out.video.indices.insert(out.video.indices.end(), e.video_idx.begin(), e.video_idx.end());
        }
    }
    if (first.has_queries()) {
        out.q_a = stack_field(qa, "q_a");
        out.q_v = stack_field(qv, "q_v");
    }
    if (first.has_features()) {
        out.feat_a = stack_field(fa, "feat_a");
        out.feat_v = stack_field(fv, "feat_v");
    }
    if (first.has_scores() && (out.i_a.size() != b * out.audio.count() || out.i_v.size() != b * out.video.count())) {
        throw MemoryError("assemble: score lengths disagree with patch counts");
    }
    return out;
}

Tensor der_penalty(const Tensor& c_a, const Tensor& c_v, const Tensor& stored_a, const Tensor& stored_v) {
    if (c_a.shape() != stored_a.shape() || c_v.shape() != stored_v.shape()) {
        throw nc::ShapeError("der_penalty: current " + nc::shape_str(c_a.shape()) + " vs stored " +
                             nc::shape_str(stored_a.shape()));
    }
    return nc::add(nc::mse(c_a, stored_a.detach()), nc::mse(c_v, stored_v.detach()));
}

std::size_t equalized_capacity(std::size_t raw_capacity, std::size_t raw_patch_bytes,
                               std::size_t selected_patch_bytes) {
    if (selected_patch_bytes == 0) {
        throw std::invalid_argument("equalized_capacity: empty selected entries");
    }
    return raw_capacity * raw_patch_bytes / selected_patch_bytes;
}

std::vector<nc::NamedTensor> entry_tensors(const RehearsalEntry& e) {
    std::vector<nc::NamedTensor> t;
    t.push_back({"layout", Tensor::scalar(static_cast<double>(e.layout))});
    t.push_back({"step", Tensor::scalar(static_cast<double>(e.step))});
    t.push_back({"task", Tensor::scalar(static_cast<double>(e.task))});
    t.push_back({"audio", e.audio});
    t.push_back({"video", e.video});
    if (e.layout == Layout::selected) {
        t.push_back({"audio_idx", idx_tensor(e.audio_idx)});
        t.push_back({"video_idx", idx_tensor(e.video_idx)});
    }
    if (e.has_queries()) {
        t.push_back({"q_a", e.q_a});
        t.push_back({"q_v", e.q_v});
    }
    if (e.has_scores()) {
        t.push_back({"i_a", vec_tensor(e.i_a)});
        t.push_back({"i_v", vec_tensor(e.i_v)});
        t.push_back({"c_a", vec_tensor(e.c_a)});
        t.push_back({"c_v", vec_tensor(e.c_v)});
    }
    if (e.has_features()) {
        t.push_back({"feat_a", e.feat_a});
        t.push_back({"feat_v", e.feat_v});
    }
    return t;
}

RehearsalEntry entry_from_tensors(const std::vector<nc::NamedTensor>& t) {
    RehearsalEntry e;
    double layout = nc::find_tensor(t, "layout").item();
    if (layout != 0.0 && layout != 1.0) {
        throw nc::FormatError("memory snapshot: unknown layout");
    }
    e.layout = static_cast<Layout>(static_cast<int>(layout));
    e.step = static_cast<std::uint64_t>(nc::find_tensor(t, "step").item());
    e.task = static_cast<std::uint64_t>(nc::find_tensor(t, "task").item());
    e.audio = nc::find_tensor(t, "audio");
    e.video = nc::find_tensor(t, "video");
    if (e.layout == Layout::selected) {
        e.audio_idx = tensor_idx(nc::find_tensor(t, "audio_idx"));
        e.video_idx = tensor_idx(nc::find_tensor(t, "video_idx"));
    }
    if (const Tensor* q = find(t, "q_a")) {
        e.q_a = *q;
        e.q_v = nc::find_tensor(t, "q_v");
    }
    if (const Tensor* i = find(t, "i_a")) {
        e.i_a = tensor_vec(*i);
        e.i_v = tensor_vec(nc::find_tensor(t, "i_v"));
        e.c_a = tensor_vec(nc::find_tensor(t, "c_a"));
        e.c_v = tensor_vec(nc::find_tensor(t, "c_v"));
    }
    if (const Tensor* f = find(t, "feat_a")) {
        e.feat_a = *f;
        e.feat_v = nc::find_tensor(t, "feat_v");
    }
    return e;
}

std::size_t entry_bytes(const RehearsalEntry& e) {
    std::size_t total = 8;
    for (const auto& t : entry_tensors(e)) total += nc::entry_bytes(t);
    return total;
}

std::size_t memory_bytes(const ReservoirMemory& mem) {
    std::size_t total = kMemoryHeaderBytes;
    for (std::size_t i = 0; i < mem.size(); ++i) total += entry_bytes(mem.at(i));
    return total;
}

void write_memory(std::ostream& os, const ReservoirMemory& mem) {
    os.write(kMemoryMagic, 4);
    nc::write_u32(os, kMemoryVersion);
    nc::write_u64(os, mem.capacity());
    nc::write_u64(os, mem.seen());
    nc::write_u64(os, mem.size());
    for (std::size_t i = 0; i < mem.size(); ++i) nc::write_entries(os, entry_tensors(mem.at(i)));
}

ReservoirMemory read_memory(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMemoryMagic, 4)) {
        throw nc::FormatError("not a memory snapshot");
    }
    if (nc::read_u32(is) != kMemoryVersion) {
        throw nc::FormatError("unsupported memory snapshot version");
    }
    std::size_t capacity = nc::read_u64(is);
    std::uint64_t seen = nc::read_u64(is);
    std::size_t count = nc::read_u64(is);
    if (count > capacity) {
        throw nc::FormatError("memory snapshot holds more entries than its capacity");
    }
    std::vector<RehearsalEntry> entries;
    entries.reserve(count);
    for (std::size_t i = 0; i < count; ++i) entries.push_back(entry_from_tensors(nc::read_entries(is)));
    ReservoirMemory mem;
    mem.restore(capacity, seen, std::move(entries));
    return mem;
}

void save_memory(const std::filesystem::path& path, const ReservoirMemory& mem) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_memory(os, mem);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

ReservoirMemory load_memory(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return read_memory(is);
}

}  // namespace stella::memory
