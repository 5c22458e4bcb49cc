#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "stella/avm/avm.hpp"

namespace stella::eval {

using nc::Tensor;

inline constexpr std::array<std::size_t, 3> kRecallKs = {1, 5, 10};

struct RetrievalReport {
    std::array<double, 3> a2v{};  // R@1, R@5, R@10 in percent
    std::array<double, 3> v2a{};
    std::size_t n = 0;

    /// Mean of the six recalls (the per-task headline score).
    double headline() const;
};

/// Cosine-similarity retrieval; row i of each matrix is the true pair. Ties
/// rank the lower candidate index first. Throws if n < max K.
RetrievalReport zero_shot_retrieval(const Tensor& audio, const Tensor& video);

/// 1-based rank of the true candidate per query row of a similarity matrix.
std::vector<std::size_t> true_ranks(std::span<const double> sim, std::size_t n, bool by_column);

/// acc[t][i] for i <= t.
class AccMatrix {
   public:
    AccMatrix() = default;
    explicit AccMatrix(std::size_t tasks) : rows_(tasks) {}
    static AccMatrix from_rows(std::vector<std::vector<double>> rows);

    std::size_t tasks() const { return rows_.size(); }
    /// Rows filled so far (row t holds t + 1 values).
    std::size_t completed() const;
    void set_row(std::size_t t, std::vector<double> values);
    double at(std::size_t t, std::size_t i) const;
    const std::vector<std::vector<double>>& rows() const { return rows_; }

    bool operator==(const AccMatrix&) const = default;

   private:
    std::vector<std::vector<double>> rows_;
};

/// Mean of the last row; throws if the matrix is incomplete.
double average_accuracy(const AccMatrix& m);
/// Mean over i < T of max_{i <= t < T} acc[t][i] - acc[T][i]; needs T >= 2.
double average_forgetting(const AccMatrix& m);

/// || mean(normalize(audio)) - mean(normalize(video)) ||_2
double modality_gap(const Tensor& audio, const Tensor& video);
/// Mean over i < T of gap[i][i] - gap[T][i] (how far each task's gap shrank).
double gap_decline(const AccMatrix& gaps);

struct SelectionQuality {
    std::optional<double> recall;  // absent when the truth mask is empty
    double precision = 0.0;
};
SelectionQuality selection_quality(std::span<const std::size_t> selected, std::span<const std::uint8_t> truth);

/// Head-averaged softmaxed maps as CSV (sample,query,k0..). Writes
/// attention_audio.csv (video queries over audio keys) and
/// attention_video.csv into `dir`.
void export_attention(const avm::CrossAttnMaps& maps, const std::filesystem::path& dir);
/// Rows of one exported file: values per (sample, query).
std::vector<std::vector<double>> read_attention(const std::filesystem::path& file);

/// Contrastive features and retrieval on one evaluation bank.
struct TaskEval {
    RetrievalReport retrieval;
    double gap = 0.0;
};

/// Full-token encoding of every bank row; chunks are split across `workers`
/// threads (each worker handles whole chunks).
std::pair<Tensor, Tensor> encode_bank(const backbone::Backbone& bb, const data::PatchBank& bank,
                                      const data::Geometry& geometry, std::size_t chunk = 32,
                                      std::size_t workers = 1);
TaskEval evaluate_bank(const backbone::Backbone& bb, const data::PatchBank& bank, const data::Geometry& geometry,
                       std::size_t workers = 1);

}  // namespace stella::eval
