#pragma once

#include <cstdint>
#include <vector>

#include "stella/backbone/backbone.hpp"

namespace stella::avm {

using nc::Tensor;

struct CrossAttnMaps {
    Tensor a_a;  // [B, H, N, M] video queries over audio keys
    Tensor a_v;  // [B, H, M, N] audio queries over video keys
    double beta = 1.0;
};

/// Per-head projections, each [B, H, n, d].
struct Projections {
    Tensor q_a, k_a, v_a;
    Tensor q_v, k_v, v_v;
};

struct CrossAttention {
    CrossAttnMaps maps;
    Projections proj;
};

class AvmModule {
   public:
    AvmModule(std::size_t dim, std::size_t heads, std::uint64_t seed);

    std::size_t dim() const { return dim_; }
    std::size_t heads() const { return heads_; }
    nc::ParamStore& params() { return params_; }
    const nc::ParamStore& params() const { return params_; }

    Projections project(const Tensor& o_a, const Tensor& o_v) const;

    /// A_a = q_v k_a^T / (beta sqrt(d)), A_v = q_a k_v^T / (beta sqrt(d)).
    CrossAttention cross_attention(const Tensor& o_a, const Tensor& o_v, double beta) const;

    /// Matching probability per row, shape [B].
    Tensor matching_forward(const Tensor& o_a, const Tensor& o_v) const;

    /// Pooled attended values [B, 2D] (input of the matching head).
    Tensor pooled_values(const Tensor& o_a, const Tensor& o_v) const;
    Tensor head(const Tensor& pooled) const;

    std::vector<nc::NamedTensor> state(const std::string& prefix = "avm/") const { return params_.snapshot(prefix); }
    void load(const std::vector<nc::NamedTensor>& source, const std::string& prefix = "avm/") {
        params_.load(source, prefix);
    }

    Tensor wq_a, wk_a, wv_a, wq_v, wk_v, wv_v;  // [D, D]
    nc::Linear fc1, fc2;

   private:
    std::size_t dim_;
    std::size_t heads_;
    nc::ParamStore params_;
};

/// Uniform random permutation of 0..n-1 without fixed points (n >= 2).
std::vector<std::size_t> random_derangement(std::size_t n, Rng& rng);

/// Audio source row per batch row plus labels: floor(B/2) random rows become
/// negatives whose audio comes from a derangement of the negative set (a
/// lone negative takes any other row).
struct PairPlan {
    std::vector<std::size_t> audio_source;
    std::vector<double> labels;  // 1 matched, 0 shuffled
};
PairPlan plan_negatives(std::size_t batch, Rng& rng);

struct AvmStepResult {
    double loss = 0.0;
    std::size_t negatives = 0;
};

/// One matching update. Backbone encodings are computed without gradient;
/// throws std::logic_error if any backbone parameter receives gradient.
AvmStepResult avm_train_step(const backbone::Backbone& bb, const Tensor& ea, const Tensor& ev,
                             const backbone::TokenLayout& la, const backbone::TokenLayout& lv, AvmModule& avm,
                             nc::Adam& opt, Rng& rng);
AvmStepResult avm_train_step(const backbone::Backbone& bb, const data::PatchSet& a, const data::PatchSet& v,
                             AvmModule& avm, nc::Adam& opt, Rng& rng);

/// Held-out matching accuracy: every pair is scored as a positive and against
/// one audio drawn from a different class (a negative).
double matching_accuracy(const backbone::Backbone& bb, const AvmModule& avm, const data::PatchBank& bank,
                         const data::Geometry& geometry, Rng& rng, std::size_t chunk = 32);

}  // namespace stella::avm
