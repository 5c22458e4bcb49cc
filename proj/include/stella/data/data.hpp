#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "stella/numcore/random.hpp"
#include "stella/numcore/tensor.hpp"

namespace stella::data {

class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Modality { audio, video };

const char* modality_name(Modality m);

/// Spectrogram of `time` x `freq` bins cut into `patch` x `patch` tiles.
/// Patch flat index = time_token * num_freq() + freq_token.
struct AudioGeometry {
    std::size_t time = 64;
    std::size_t freq = 16;
    std::size_t patch = 4;

    std::size_t num_time() const { return time / patch; }
    std::size_t num_freq() const { return freq / patch; }
    std::size_t num_patches() const { return num_time() * num_freq(); }
    std::size_t patch_dim() const { return patch * patch; }
    void validate() const;
};

/// Clip of `frames` x `channels` x `height` x `width`.
/// Patch flat index = (frame * rows() + row) * cols() + col.
struct VideoGeometry {
    std::size_t frames = 4;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t patch = 8;
    std::size_t channels = 1;

    std::size_t rows() const { return height / patch; }
    std::size_t cols() const { return width / patch; }
    std::size_t num_patches() const { return frames * rows() * cols(); }
    std::size_t patch_dim() const { return channels * patch * patch; }
    void validate() const;
};

struct Geometry {
    AudioGeometry audio;
    VideoGeometry video;
};

/// Grid of patch cells; a bijection between flat index and (frame, row, col).
struct GridGeometry {
    std::size_t frames = 1;
    std::size_t rows = 1;
    std::size_t cols = 1;

    std::size_t size() const { return frames * rows * cols; }
    std::size_t flat(std::size_t frame, std::size_t row, std::size_t col) const;
    struct Cell {
        std::size_t frame, row, col;
    };
    Cell cell(std::size_t flat_index) const;
};

GridGeometry audio_grid(const AudioGeometry& g);
GridGeometry video_grid(const VideoGeometry& g);

/// Half-open interval.
struct Interval {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t length() const { return end - begin; }
};

struct AudioSpectrogram {
    std::size_t time = 0;
    std::size_t freq = 0;
    std::vector<double> values;  // time-major, time x freq
    Interval source_time;
    Interval source_freq;
};

struct VideoClip {
    std::size_t frames = 0;
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // frames x channels x height x width
    Interval source_frames;
    Interval source_rows;  // pixel rows
    Interval source_cols;  // pixel cols
};

/// B rows of patches plus the original flat index of every patch (so selected
/// subsets keep their positions).
struct PatchSet {
    Modality modality = Modality::audio;
    GridGeometry grid;
    nc::Tensor patches;                // [B, n, patch_dim]
    std::vector<std::size_t> indices;  // B x n original flat indices

    std::size_t batch() const { return patches.dim(0); }
    std::size_t count() const { return patches.dim(1); }
    std::size_t patch_dim() const { return patches.dim(2); }
    std::span<const std::size_t> row_indices(std::size_t b) const;
};

PatchSet patchify(const AudioSpectrogram& spec, std::size_t p);
PatchSet patchify(const VideoClip& clip, std::size_t p);
AudioSpectrogram unpatchify_audio(const PatchSet& set, std::size_t p);
VideoClip unpatchify_video(const PatchSet& set, std::size_t p, std::size_t channels = 1);

/// Patch cells intersecting the planted region.
std::vector<std::uint8_t> truth_mask(const AudioSpectrogram& spec, std::size_t p);
std::vector<std::uint8_t> truth_mask(const VideoClip& clip, std::size_t p);

/// Independent per-patch masking (true = masked); an all-masked draw is
/// resampled so at least one patch stays visible.
std::vector<std::uint8_t> random_mask(std::size_t n_patches, double mask_prob, Rng& rng);

struct SignatureConfig {
    double noise_std = 1.0;
    double amplitude = 3.0;
    double correlation = 1.0;
    bool align_to_grid = true;
    std::size_t video_size = 16;    // pixels, square box
    std::size_t video_frames = 2;   // frames carrying the box
    std::size_t audio_time = 16;    // time bins
    std::size_t audio_freq = 8;     // frequency bins
};

struct SyntheticClass {
    std::uint32_t class_id = 0;
    std::vector<double> video_pattern;  // channels x video_size x video_size
    std::vector<double> audio_pattern;  // audio_time x audio_freq
    std::size_t audio_freq_offset = 0;
    double correlation = 1.0;
};

/// Deterministic in (class_id, master_seed).
SyntheticClass make_class(std::uint32_t class_id, std::uint64_t master_seed, const Geometry& geometry,
                          const SignatureConfig& sig);

struct GeneratedPair {
    AudioSpectrogram audio;
    VideoClip video;
    std::uint32_t audio_class = 0;
    std::uint32_t video_class = 0;
};

/// Video carries `cls`; audio carries `cls` with probability
/// cls.correlation, otherwise an independently drawn class from `pool`.
/// When correlated, the audio band lies inside the time span of the video
/// frames that carry the box.
GeneratedPair generate_pair(const SyntheticClass& cls, std::span<const SyntheticClass> pool,
                            const Geometry& geometry, const SignatureConfig& sig, Rng& rng);

struct TaskSpec {
    std::uint32_t task_id = 0;
    std::vector<std::uint32_t> class_ids;
    std::size_t n_train = 0;
    std::size_t n_eval = 0;
    std::uint64_t seed = 0;
};

/// Patchified samples of one split.
struct PatchBank {
    nc::Tensor audio;  // [n, M, Pa]
    nc::Tensor video;  // [n, N, Pv]
    std::vector<std::uint8_t> audio_truth;  // n x M
    std::vector<std::uint8_t> video_truth;  // n x N
    std::vector<std::uint32_t> audio_class;  // diagnostics only
    std::vector<std::uint32_t> video_class;

    std::size_t size() const { return audio.defined() ? audio.dim(0) : 0; }
};

struct TaskDataset {
    TaskSpec spec;
    PatchBank train;
    PatchBank eval;
};

struct DataConfig {
    Geometry geometry;
    SignatureConfig signature;
    std::size_t num_tasks = 4;
    std::size_t classes_per_task = 5;
    std::size_t train_per_task = 256;
    std::size_t eval_per_task = 64;
    std::uint64_t seed = 7;
};

/// Consecutive disjoint class blocks per task.
std::vector<TaskSpec> default_task_specs(const DataConfig& cfg);

std::vector<TaskDataset> build_sequence(const std::vector<TaskSpec>& specs, const DataConfig& cfg);

struct Batch {
    PatchSet audio;
    PatchSet video;
};

/// Full (unselected) patch sets for the given bank rows.
Batch make_batch(const PatchBank& bank, std::span<const std::size_t> rows, const Geometry& geometry);

// Dataset file: "STLA" | u32 version | u64 task_id, n_train, n_eval,
// n_classes, audio time/freq/patch, video frames/channels/height/width/patch |
// checkpoint-format tensor entries.
void write_task(std::ostream& os, const TaskDataset& task, const Geometry& geometry);
TaskDataset read_task(std::istream& is, Geometry* geometry_out = nullptr);
void save_task(const std::filesystem::path& path, const TaskDataset& task, const Geometry& geometry);
TaskDataset load_task(const std::filesystem::path& path, Geometry* geometry_out = nullptr);

}  // namespace stella::data
