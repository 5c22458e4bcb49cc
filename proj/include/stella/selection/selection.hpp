#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "stella/avm/avm.hpp"

namespace stella::selection {

using nc::Tensor;

struct SelectionConfig {
    double rho_a = 0.5;
    double rho_v = 0.5;
    std::size_t chunk = 2;  // audio time chunk, in time tokens
    double beta = 0.4;

    void validate() const;
};

/// round(n * rho) with halves rounded up, at least 1.
std::size_t kappa(std::size_t n, double rho);

/// Row-wise probability vectors, [B, M] and [B, N].
struct Importance {
    Tensor i_a;
    Tensor i_v;
};

/// Softmax of each map over its key axis, then the mean over heads and queries.
Importance importance_scores(const avm::CrossAttnMaps& maps);

/// Importance-pooled query and top-kappa keys of one modality.
struct LocalizedQueries {
    Tensor q_hat;                   // [B, H, d]
    Tensor k_hat;                   // [B, H, kappa, d]
    std::vector<std::size_t> top;   // B x kappa patch indices, ascending importance
    std::size_t kappa = 0;
};

/// Sorts patches by importance (ascending, stable) and keeps the top-kappa
/// tail. q_hat is the importance-weighted mean of the kept queries.
LocalizedQueries gather_localized(const Tensor& q, const Tensor& k, const Tensor& importance, std::size_t kappa);

/// Per scored patch: mean over heads of exp(A_past) / (exp(A) + exp(A_past))
/// with A = mu(q_hat, k_hat), A_past = mu(q_past, k_hat). Returns [B, kappa].
Tensor correlation_scores(const Tensor& k_hat, const Tensor& q_hat, const Tensor& q_past, double beta);

/// Spreads [B, kappa] scores onto their patches; unscored patches get 0.
std::vector<double> expand_scores(const Tensor& scores, std::span<const std::size_t> top, std::size_t n);

struct Selection {
    std::vector<std::size_t> indices;  // B x kappa, ascending within a row
    std::vector<std::uint8_t> flags;   // B x n exclusion draws
    std::size_t batch = 0;
    std::size_t kappa = 0;

    std::span<const std::size_t> row(std::size_t b) const { return {indices.data() + b * kappa, kappa}; }
};

/// Flags ~ Bernoulli(C); flagged importances are zeroed and kappa distinct
/// patches drawn proportionally to what remains. When fewer than kappa
/// patches keep positive mass, the rest come from the leftovers in
/// ascending-C order.
Selection select_video(std::span<const double> importance, std::span<const double> corr, std::size_t batch,
                       std::size_t n, std::size_t kappa, Rng& rng);

/// Time-chunk selection: chunk importance is the mean over the chunk's time
/// steps of the frequency-summed importance (a short final chunk averages
/// over its own length). Chunks are ordered by a weighted draw without
/// replacement and taken whole, minus flagged patches, until kappa is
/// reached; the last chunk keeps only its leading patches. If flags leave
/// too few patches, flagged ones fill up in ascending-C order.
Selection select_audio(std::span<const double> importance, std::span<const double> corr, std::size_t batch,
                       const data::GridGeometry& grid, std::size_t chunk, std::size_t kappa, Rng& rng);

/// Uniform-importance, no-exclusion variants (random patch selection baseline).
Selection random_video(std::size_t batch, std::size_t n, std::size_t kappa, Rng& rng);
Selection random_audio(std::size_t batch, const data::GridGeometry& grid, std::size_t chunk, std::size_t kappa,
                       Rng& rng);

/// out[b, j] = x[b, idx[b, j]]; indices of the result map back to the
/// original grid. Throws data::DataError on duplicates or out-of-range.
data::PatchSet gather_selected(const data::PatchSet& x, std::span<const std::size_t> idx, std::size_t kappa);

/// Scores of one modality batch, for diagnostics.
struct TraceRows {
    std::uint64_t step = 0;
    data::Modality modality = data::Modality::audio;
    std::size_t batch = 0;
    std::size_t n = 0;
    std::span<const double> importance;
    std::span<const double> corr;
    const Selection* selection = nullptr;
};

/// CSV: step,modality,row,patch_index,I,C,flagged,selected.
void write_trace_header(std::ostream& os);
void write_trace(std::ostream& os, const TraceRows& rows);

}  // namespace stella::selection
