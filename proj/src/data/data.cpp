#include "stella/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "stella/numcore/checkpoint.hpp"
#include "stella/numcore/ops.hpp"

namespace stella::data {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'L', 'A'};
constexpr std::uint32_t kVersion = 1;

void require_divisible(std::size_t extent, std::size_t p, const char* what) {
    if (p == 0) {
        throw DataError("patch size must be positive");
    }
    if (extent == 0 || extent % p != 0) {
        throw DataError(std::string(what) + " = " + std::to_string(extent) + " is not divisible by patch size " +
                        std::to_string(p));
    }
}

// Uniform start in [lo, hi], snapped to multiples of p when aligning.
std::size_t draw_start(std::size_t lo, std::size_t hi, std::size_t p, bool align, Rng& rng) {
    if (hi < lo) {
        hi = lo;
    }
    if (!align) {
        return lo + rng.index(hi - lo + 1);
    }
    std::size_t first = (lo + p - 1) / p;
    std::size_t last = hi / p;
    if (last < first) {
        return lo;
    }
    return (first + rng.index(last - first + 1)) * p;
}

std::vector<double> draw_pattern(std::size_t n, double amplitude, Rng& rng) {
    std::vector<double> out(n);
    for (auto& v : out) {
        double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        v = sign * amplitude * (1.0 + 0.5 * rng.uniform());
    }
    return out;
}

void fill_noise(std::vector<double>& values, double std, Rng& rng) {
    for (auto& v : values) {
        v = std * rng.normal();
    }
}

void plant_audio(AudioSpectrogram& spec, const SyntheticClass& cls, const Geometry& geometry,
                 const SignatureConfig& sig, std::size_t t0) {
    const std::size_t f0 = cls.audio_freq_offset;
    for (std::size_t t = 0; t < sig.audio_time; ++t) {
        for (std::size_t f = 0; f < sig.audio_freq; ++f) {
            spec.values[(t0 + t) * geometry.audio.freq + f0 + f] += cls.audio_pattern[t * sig.audio_freq + f];
        }
    }
    spec.source_time = {t0, t0 + sig.audio_time};
    spec.source_freq = {f0, f0 + sig.audio_freq};
}

std::uint64_t read_count(std::istream& is) {
    std::uint64_t v = nc::read_u64(is);
    if (v > (1ULL << 40)) {
        throw DataError("dataset header field out of range");
    }
    return v;
}

nc::Tensor u8_tensor(const std::vector<std::uint8_t>& v, nc::Shape shape) {
    return nc::Tensor::from(std::move(shape), std::vector<double>(v.begin(), v.end()));
}

nc::Tensor u32_tensor(const std::vector<std::uint32_t>& v) {
    return nc::Tensor::from({v.size()}, std::vector<double>(v.begin(), v.end()));
}

template <typename T>
std::vector<T> to_ints(const nc::Tensor& t) {
    std::vector<T> out;
    out.reserve(t.numel());
    for (double v : t.data()) {
        if (v < 0 || v != std::floor(v)) {
            throw DataError("expected non-negative integer tensor values");
        }
        out.push_back(static_cast<T>(v));
    }
    return out;
}

}  // namespace

const char* modality_name(Modality m) { return m == Modality::audio ? "audio" : "video"; }

void AudioGeometry::validate() const {
    require_divisible(time, patch, "audio time");
    require_divisible(freq, patch, "audio freq");
}

void VideoGeometry::validate() const {
    require_divisible(height, patch, "video height");
    require_divisible(width, patch, "video width");
    if (frames == 0) {
        throw DataError("video needs at least one frame");
    }
    if (channels == 0) {
        throw DataError("video needs at least one channel");
    }
}

std::size_t GridGeometry::flat(std::size_t frame, std::size_t row, std::size_t col) const {
    if (frame >= frames || row >= rows || col >= cols) {
        throw std::out_of_range("grid cell out of range");
    }
    return (frame * rows + row) * cols + col;
}

GridGeometry::Cell GridGeometry::cell(std::size_t flat_index) const {
    if (flat_index >= size()) {
        throw std::out_of_range("flat index out of range");
    }
    return {flat_index / (rows * cols), (flat_index / cols) % rows, flat_index % cols};
}

GridGeometry audio_grid(const AudioGeometry& g) { return {1, g.num_time(), g.num_freq()}; }

GridGeometry video_grid(const VideoGeometry& g) { return {g.frames, g.rows(), g.cols()}; }

std::span<const std::size_t> PatchSet::row_indices(std::size_t b) const {
    const std::size_t n = count();
    return std::span<const std::size_t>(indices).subspan(b * n, n);
}

PatchSet patchify(const AudioSpectrogram& spec, std::size_t p) {
    AudioGeometry g{spec.time, spec.freq, p};
    g.validate();
    if (spec.values.size() != spec.time * spec.freq) {
        throw DataError("spectrogram value count does not match its dimensions");
    }
    const std::size_t nt = g.num_time();
    const std::size_t nf = g.num_freq();
    std::vector<double> out(g.num_patches() * p * p);
    for (std::size_t i = 0; i < nt; ++i) {
        for (std::size_t j = 0; j < nf; ++j) {
            double* dst = out.data() + (i * nf + j) * p * p;
            for (std::size_t r = 0; r < p; ++r) {
                for (std::size_t c = 0; c < p; ++c) {
                    dst[r * p + c] = spec.values[(i * p + r) * spec.freq + j * p + c];
                }
            }
        }
    }
    PatchSet set;
    set.modality = Modality::audio;
    set.grid = audio_grid(g);
    set.patches = nc::Tensor::from({1, g.num_patches(), p * p}, std::move(out));
    set.indices.resize(g.num_patches());
    for (std::size_t i = 0; i < set.indices.size(); ++i) {
        set.indices[i] = i;
    }
    return set;
}

PatchSet patchify(const VideoClip& clip, std::size_t p) {
    VideoGeometry g{clip.frames, clip.height, clip.width, p, clip.channels};
    g.validate();
    if (clip.values.size() != clip.frames * clip.channels * clip.height * clip.width) {
        throw DataError("clip value count does not match its dimensions");
    }
    const std::size_t pd = g.patch_dim();
    std::vector<double> out(g.num_patches() * pd);
    const GridGeometry grid = video_grid(g);
    for (std::size_t idx = 0; idx < grid.size(); ++idx) {
        auto [fr, row, col] = grid.cell(idx);
        double* dst = out.data() + idx * pd;
        for (std::size_t ch = 0; ch < clip.channels; ++ch) {
            const double* plane = clip.values.data() + (fr * clip.channels + ch) * clip.height * clip.width;
            for (std::size_t r = 0; r < p; ++r) {
                for (std::size_t c = 0; c < p; ++c) {
                    dst[(ch * p + r) * p + c] = plane[(row * p + r) * clip.width + col * p + c];
                }
            }
        }
    }
    PatchSet set;
    set.modality = Modality::video;
    set.grid = grid;
    set.patches = nc::Tensor::from({1, grid.size(), pd}, std::move(out));
    set.indices.resize(grid.size());
    for (std::size_t i = 0; i < set.indices.size(); ++i) {
        set.indices[i] = i;
    }
    return set;
}

AudioSpectrogram unpatchify_audio(const PatchSet& set, std::size_t p) {
    if (set.modality != Modality::audio || set.batch() != 1 || set.count() != set.grid.size() ||
        set.patch_dim() != p * p) {
        throw DataError("unpatchify_audio needs one full audio patch row");
    }
    AudioSpectrogram spec;
    spec.time = set.grid.rows * p;
    spec.freq = set.grid.cols * p;
    spec.values.assign(spec.time * spec.freq, 0.0);
    auto src = set.patches.data();
    for (std::size_t k = 0; k < set.count(); ++k) {
        auto cell = set.grid.cell(set.indices[k]);
        for (std::size_t r = 0; r < p; ++r) {
            for (std::size_t c = 0; c < p; ++c) {
                spec.values[(cell.row * p + r) * spec.freq + cell.col * p + c] = src[(k * p + r) * p + c];
            }
        }
    }
    return spec;
}

VideoClip unpatchify_video(const PatchSet& set, std::size_t p, std::size_t channels) {
    if (set.modality != Modality::video || set.batch() != 1 || set.count() != set.grid.size() ||
        set.patch_dim() != channels * p * p) {
        throw DataError("unpatchify_video needs one full video patch row");
    }
    VideoClip clip;
    clip.frames = set.grid.frames;
    clip.channels = channels;
    clip.height = set.grid.rows * p;
    clip.width = set.grid.cols * p;
    clip.values.assign(clip.frames * channels * clip.height * clip.width, 0.0);
    auto src = set.patches.data();
    const std::size_t pd = set.patch_dim();
    for (std::size_t k = 0; k < set.count(); ++k) {
        auto cell = set.grid.cell(set.indices[k]);
        for (std::size_t ch = 0; ch < channels; ++ch) {
            double* plane = clip.values.data() + (cell.frame * channels + ch) * clip.height * clip.width;
            for (std::size_t r = 0; r < p; ++r) {
                for (std::size_t c = 0; c < p; ++c) {
                    plane[(cell.row * p + r) * clip.width + cell.col * p + c] = src[k * pd + (ch * p + r) * p + c];
                }
            }
        }
    }
    return clip;
}

std::vector<std::uint8_t> truth_mask(const AudioSpectrogram& spec, std::size_t p) {
    AudioGeometry g{spec.time, spec.freq, p};
    g.validate();
    std::vector<std::uint8_t> mask(g.num_patches(), 0);
    if (spec.source_time.length() == 0 || spec.source_freq.length() == 0) {
        return mask;
    }
    for (std::size_t i = spec.source_time.begin / p; i <= (spec.source_time.end - 1) / p; ++i) {
        for (std::size_t j = spec.source_freq.begin / p; j <= (spec.source_freq.end - 1) / p; ++j) {
            mask[i * g.num_freq() + j] = 1;
        }
    }
    return mask;
}

std::vector<std::uint8_t> truth_mask(const VideoClip& clip, std::size_t p) {
    VideoGeometry g{clip.frames, clip.height, clip.width, p, clip.channels};
    g.validate();
    const GridGeometry grid = video_grid(g);
    std::vector<std::uint8_t> mask(grid.size(), 0);
    if (clip.source_frames.length() == 0 || clip.source_rows.length() == 0 || clip.source_cols.length() == 0) {
        return mask;
    }
    for (std::size_t f = clip.source_frames.begin; f < clip.source_frames.end; ++f) {
        for (std::size_t r = clip.source_rows.begin / p; r <= (clip.source_rows.end - 1) / p; ++r) {
            for (std::size_t c = clip.source_cols.begin / p; c <= (clip.source_cols.end - 1) / p; ++c) {
                mask[grid.flat(f, r, c)] = 1;
            }
        }
    }
    return mask;
}

std::vector<std::uint8_t> random_mask(std::size_t n_patches, double mask_prob, Rng& rng) {
    if (!(mask_prob >= 0.0 && mask_prob < 1.0)) {
        throw DataError("mask_prob must lie in [0, 1), got " + std::to_string(mask_prob));
    }
    if (n_patches == 0) {
        throw DataError("random_mask needs at least one patch");
    }
    std::vector<std::uint8_t> mask(n_patches);
    while (true) {
        std::size_t masked = 0;
        for (auto& m : mask) {
            m = rng.bernoulli(mask_prob) ? 1 : 0;
            masked += m;
        }
        if (masked < n_patches) {
            return mask;
        }
    }
}

SyntheticClass make_class(std::uint32_t class_id, std::uint64_t master_seed, const Geometry& geometry,
                          const SignatureConfig& sig) {
    if (sig.audio_freq > geometry.audio.freq || sig.audio_time > geometry.audio.time) {
        throw DataError("audio signature does not fit the spectrogram");
    }
    if (sig.video_size > geometry.video.height || sig.video_size > geometry.video.width ||
        sig.video_frames > geometry.video.frames || sig.video_frames == 0) {
        throw DataError("video signature does not fit the clip");
    }
    if (!(sig.correlation >= 0.0 && sig.correlation <= 1.0)) {
        throw DataError("correlation strength must lie in [0, 1]");
    }
    Rng rng(derive_seed({master_seed, 0xC1A55ULL, class_id}));
    SyntheticClass cls;
    cls.class_id = class_id;
    cls.correlation = sig.correlation;
    cls.video_pattern = draw_pattern(geometry.video.channels * sig.video_size * sig.video_size, sig.amplitude, rng);
    cls.audio_pattern = draw_pattern(sig.audio_time * sig.audio_freq, sig.amplitude, rng);
    cls.audio_freq_offset =
        draw_start(0, geometry.audio.freq - sig.audio_freq, geometry.audio.patch, sig.align_to_grid, rng);
    return cls;
}

GeneratedPair generate_pair(const SyntheticClass& cls, std::span<const SyntheticClass> pool,
                            const Geometry& geometry, const SignatureConfig& sig, Rng& rng) {
    const auto& vg = geometry.video;
    const auto& ag = geometry.audio;
    GeneratedPair out;

    out.video.frames = vg.frames;
    out.video.channels = vg.channels;
    out.video.height = vg.height;
    out.video.width = vg.width;
    out.video.values.resize(vg.frames * vg.channels * vg.height * vg.width);
    fill_noise(out.video.values, sig.noise_std, rng);

    const std::size_t f0 = rng.index(vg.frames - sig.video_frames + 1);
    const std::size_t y0 = draw_start(0, vg.height - sig.video_size, vg.patch, sig.align_to_grid, rng);
    const std::size_t x0 = draw_start(0, vg.width - sig.video_size, vg.patch, sig.align_to_grid, rng);
    const std::size_t s = sig.video_size;
    for (std::size_t f = f0; f < f0 + sig.video_frames; ++f) {
        for (std::size_t ch = 0; ch < vg.channels; ++ch) {
            double* plane = out.video.values.data() + (f * vg.channels + ch) * vg.height * vg.width;
            for (std::size_t r = 0; r < s; ++r) {
                for (std::size_t c = 0; c < s; ++c) {
                    plane[(y0 + r) * vg.width + x0 + c] += cls.video_pattern[(ch * s + r) * s + c];
                }
            }
        }
    }
    out.video.source_frames = {f0, f0 + sig.video_frames};
    out.video.source_rows = {y0, y0 + s};
    out.video.source_cols = {x0, x0 + s};
    out.video_class = cls.class_id;

    out.audio.time = ag.time;
    out.audio.freq = ag.freq;
    out.audio.values.resize(ag.time * ag.freq);
    fill_noise(out.audio.values, sig.noise_std, rng);

    const SyntheticClass* audio_cls = &cls;
    bool correlated = rng.bernoulli(cls.correlation);
    if (!correlated) {
        if (pool.empty()) {
            throw DataError("uncorrelated pair needs a class pool");
        }
        audio_cls = &pool[rng.index(pool.size())];
    }
    std::size_t t0;
    if (correlated) {
        // Time bins covered by the active video frames.
        const std::size_t lo = f0 * ag.time / vg.frames;
        const std::size_t hi_end = std::min(ag.time, (f0 + sig.video_frames) * ag.time / vg.frames);
        const std::size_t hi = hi_end >= lo + sig.audio_time ? hi_end - sig.audio_time
                                                             : std::min(lo, ag.time - sig.audio_time);
        t0 = draw_start(std::min(lo, ag.time - sig.audio_time), hi, ag.patch, sig.align_to_grid, rng);
    } else {
        t0 = draw_start(0, ag.time - sig.audio_time, ag.patch, sig.align_to_grid, rng);
    }
    plant_audio(out.audio, *audio_cls, geometry, sig, t0);
    out.audio_class = audio_cls->class_id;
    return out;
}

std::vector<TaskSpec> default_task_specs(const DataConfig& cfg) {
    std::vector<TaskSpec> specs;
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        TaskSpec s;
        s.task_id = static_cast<std::uint32_t>(t);
        for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
            s.class_ids.push_back(static_cast<std::uint32_t>(t * cfg.classes_per_task + c));
        }
        s.n_train = cfg.train_per_task;
        s.n_eval = cfg.eval_per_task;
        s.seed = derive_seed({cfg.seed, 0x7A5CULL, t});
        specs.push_back(std::move(s));
    }
    return specs;
}

namespace {

PatchBank generate_bank(const TaskSpec& spec, const std::vector<SyntheticClass>& classes, const DataConfig& cfg,
                        std::uint64_t split, std::size_t n) {
    const auto& geo = cfg.geometry;
    const std::size_t m = geo.audio.num_patches();
    const std::size_t nv = geo.video.num_patches();
    const std::size_t pa = geo.audio.patch_dim();
    const std::size_t pv = geo.video.patch_dim();
    std::vector<double> audio(n * m * pa);
    std::vector<double> video(n * nv * pv);
    PatchBank bank;
    bank.audio_truth.resize(n * m);
    bank.video_truth.resize(n * nv);
    bank.audio_class.resize(n);
    bank.video_class.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed({cfg.seed, spec.task_id, split, i}));
        const auto& cls = classes[rng.index(classes.size())];
        GeneratedPair pair = generate_pair(cls, classes, geo, cfg.signature, rng);
        auto ap = patchify(pair.audio, geo.audio.patch);
        auto vp = patchify(pair.video, geo.video.patch);
        std::copy(ap.patches.data().begin(), ap.patches.data().end(), audio.begin() + i * m * pa);
        std::copy(vp.patches.data().begin(), vp.patches.data().end(), video.begin() + i * nv * pv);
        auto at = truth_mask(pair.audio, geo.audio.patch);
        auto vt = truth_mask(pair.video, geo.video.patch);
        std::copy(at.begin(), at.end(), bank.audio_truth.begin() + i * m);
        std::copy(vt.begin(), vt.end(), bank.video_truth.begin() + i * nv);
        bank.audio_class[i] = pair.audio_class;
        bank.video_class[i] = pair.video_class;
    }
    bank.audio = nc::Tensor::from({n, m, pa}, std::move(audio));
    bank.video = nc::Tensor::from({n, nv, pv}, std::move(video));
    return bank;
}

}  // namespace

std::vector<TaskDataset> build_sequence(const std::vector<TaskSpec>& specs, const DataConfig& cfg) {
    if (specs.empty()) {
        throw DataError("build_sequence needs at least one task");
    }
    cfg.geometry.audio.validate();
    cfg.geometry.video.validate();
    std::set<std::uint32_t> seen;
    for (const auto& s : specs) {
        if (s.class_ids.empty()) {
            throw DataError("task " + std::to_string(s.task_id) + " has no classes");
        }
        for (auto c : s.class_ids) {
            if (!seen.insert(c).second) {
                throw DataError("class " + std::to_string(c) + " appears in more than one task");
            }
        }
    }
    std::vector<TaskDataset> out;
    for (const auto& s : specs) {
        std::vector<SyntheticClass> classes;
        for (auto c : s.class_ids) {
            classes.push_back(make_class(c, cfg.seed, cfg.geometry, cfg.signature));
        }
        TaskDataset task;
        task.spec = s;
        task.train = generate_bank(s, classes, cfg, 0, s.n_train);
        task.eval = generate_bank(s, classes, cfg, 1, s.n_eval);
        out.push_back(std::move(task));
    }
    return out;
}

Batch make_batch(const PatchBank& bank, std::span<const std::size_t> rows, const Geometry& geometry) {
    if (rows.empty()) {
        throw DataError("empty batch");
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    for (auto r : idx) {
        if (r >= bank.size()) {
            throw DataError("batch row out of range");
        }
    }
    Batch b;
    b.audio.modality = Modality::audio;
    b.audio.grid = audio_grid(geometry.audio);
    b.audio.patches = nc::index_select(bank.audio, 0, idx);
    b.video.modality = Modality::video;
    b.video.grid = video_grid(geometry.video);
    b.video.patches = nc::index_select(bank.video, 0, idx);
    for (auto* set : {&b.audio, &b.video}) {
        const std::size_t n = set->grid.size();
        set->indices.resize(idx.size() * n);
        for (std::size_t i = 0; i < set->indices.size(); ++i) {
            set->indices[i] = i % n;
        }
    }
    return b;
}

void write_task(std::ostream& os, const TaskDataset& task, const Geometry& geometry) {
    os.write(kMagic, 4);
    nc::write_u32(os, kVersion);
    const auto& g = geometry;
    for (std::uint64_t v : {std::uint64_t{task.spec.task_id}, std::uint64_t{task.spec.n_train},
                            std::uint64_t{task.spec.n_eval}, std::uint64_t{task.spec.class_ids.size()},
                            std::uint64_t{g.audio.time}, std::uint64_t{g.audio.freq}, std::uint64_t{g.audio.patch},
                            std::uint64_t{g.video.frames}, std::uint64_t{g.video.channels},
                            std::uint64_t{g.video.height}, std::uint64_t{g.video.width},
                            std::uint64_t{g.video.patch}}) {
        nc::write_u64(os, v);
    }
    nc::write_u64(os, task.spec.seed);
    std::vector<nc::NamedTensor> entries;
    entries.push_back({"class_ids", u32_tensor(task.spec.class_ids)});
    for (auto [name, bank] : {std::pair{"train", &task.train}, std::pair{"eval", &task.eval}}) {
        const std::string p = name;
        const std::size_t n = bank->size();
        entries.push_back({p + "/audio", bank->audio});
        entries.push_back({p + "/video", bank->video});
        entries.push_back({p + "/audio_truth", u8_tensor(bank->audio_truth, {n, g.audio.num_patches()})});
        entries.push_back({p + "/video_truth", u8_tensor(bank->video_truth, {n, g.video.num_patches()})});
        entries.push_back({p + "/audio_class", u32_tensor(bank->audio_class)});
        entries.push_back({p + "/video_class", u32_tensor(bank->video_class)});
    }
    nc::write_entries(os, entries);
    if (!os) {
        throw DataError("failed to write dataset");
    }
}

TaskDataset read_task(std::istream& is, Geometry* geometry_out) {
    char magic[4];
    is.read(magic, 4);
    if (!is || !std::equal(magic, magic + 4, kMagic)) {
        throw DataError("not a dataset file (bad magic)");
    }
    std::uint32_t version = nc::read_u32(is);
    if (version != kVersion) {
        throw DataError("unsupported dataset version " + std::to_string(version));
    }
    TaskDataset task;
    task.spec.task_id = static_cast<std::uint32_t>(read_count(is));
    task.spec.n_train = read_count(is);
    task.spec.n_eval = read_count(is);
    const std::size_t n_classes = read_count(is);
    Geometry g;
    g.audio.time = read_count(is);
    g.audio.freq = read_count(is);
    g.audio.patch = read_count(is);
    g.video.frames = read_count(is);
    g.video.channels = read_count(is);
    g.video.height = read_count(is);
    g.video.width = read_count(is);
    g.video.patch = read_count(is);
    g.audio.validate();
    g.video.validate();
    task.spec.seed = nc::read_u64(is);

    std::vector<nc::NamedTensor> entries;
    try {
        entries = nc::read_entries(is);
    } catch (const nc::FormatError& e) {
        throw DataError(std::string("corrupt dataset payload: ") + e.what());
    }
    auto get = [&](const std::string& name, const nc::Shape& shape) {
        try {
            const auto& t = nc::find_tensor(entries, name);
            if (t.shape() != shape) {
                throw DataError("dataset tensor '" + name + "' has shape " + nc::shape_str(t.shape()) +
                                ", expected " + nc::shape_str(shape));
            }
            return t;
        } catch (const nc::FormatError& e) {
            throw DataError(e.what());
        }
    };
    task.spec.class_ids = to_ints<std::uint32_t>(get("class_ids", {n_classes}));
    const std::size_t m = g.audio.num_patches();
    const std::size_t nv = g.video.num_patches();
    for (auto [name, bank, n] : {std::tuple{"train", &task.train, task.spec.n_train},
                                 std::tuple{"eval", &task.eval, task.spec.n_eval}}) {
        const std::string p = name;
        bank->audio = get(p + "/audio", {n, m, g.audio.patch_dim()});
        bank->video = get(p + "/video", {n, nv, g.video.patch_dim()});
        bank->audio_truth = to_ints<std::uint8_t>(get(p + "/audio_truth", {n, m}));
        bank->video_truth = to_ints<std::uint8_t>(get(p + "/video_truth", {n, nv}));
        bank->audio_class = to_ints<std::uint32_t>(get(p + "/audio_class", {n}));
        bank->video_class = to_ints<std::uint32_t>(get(p + "/video_class", {n}));
        for (const auto* t : {&bank->audio, &bank->video}) {
            for (double v : t->data()) {
                if (!std::isfinite(v)) {
                    throw DataError("dataset contains non-finite values");
                }
            }
        }
    }
    if (geometry_out != nullptr) {
        *geometry_out = g;
    }
    return task;
}

void save_task(const std::filesystem::path& path, const TaskDataset& task, const Geometry& geometry) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    write_task(os, task, geometry);
}

TaskDataset load_task(const std::filesystem::path& path, Geometry* geometry_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot open " + path.string());
    }
    try {
        return read_task(is, geometry_out);
    } catch (const nc::FormatError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

}  // namespace stella::data
