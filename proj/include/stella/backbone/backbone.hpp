#pragma once

#include <cstdint>
#include <vector>

#include "stella/data/data.hpp"
#include "stella/numcore/nn.hpp"

namespace stella::backbone {

using nc::Tensor;

/// Row-major B x n flags, 1 = masked.
using Mask = std::vector<std::uint8_t>;

struct BackboneConfig {
    std::size_t embed_dim = 32;
    std::size_t heads = 2;
    std::size_t encoder_layers = 2;
    std::size_t fusion_layers = 1;
    std::size_t decoder_layers = 1;
    std::size_t mlp_ratio = 4;
    double mask_prob = 0.8;
    double tau = 0.07;
    double lambda = 0.1;
    double ln_eps = 1e-6;

    std::size_t head_dim() const { return embed_dim / heads; }
    void validate() const;
};

/// Visible-token layout of one modality: every row's unmasked positions packed
/// into `width` slots (rows with fewer visible tokens are padded).
struct TokenLayout {
    std::size_t batch = 0;
    std::size_t length = 0;  // patches per row
    std::size_t width = 0;   // max visible per row
    std::vector<std::size_t> slot_pos;   // B x width, position of each slot (pads -> 0)
    std::vector<std::size_t> pos_slot;   // B x length, slot of each position (masked -> width)
    std::vector<std::size_t> counts;     // visible per row
    Tensor key_bias;  // [B, 1, 1, width]: 0 for real slots, -1e30 for pads
    Tensor weights;   // [B, width, 1]: 1 for real slots, 0 for pads
};

/// Throws data::DataError if a row has no visible token.
TokenLayout make_layout(const Mask& mask, std::size_t batch, std::size_t length);

struct FusedOutput {
    Tensor a_tilde;  // [B, wa, D] audio-only fusion, LN_a
    Tensor v_tilde;  // [B, wv, D] video-only fusion, LN_v
    Tensor o_a;      // [B, wa, D] joint fusion, audio part
    Tensor o_v;      // [B, wv, D] joint fusion, video part
    TokenLayout layout_a;
    TokenLayout layout_v;
};

struct ForwardResult {
    Tensor l_r;
    Tensor c_a;  // [B, D], unit norm
    Tensor c_v;
    Tensor decoded_a;  // [B, n_a, Pa]
    Tensor decoded_v;
};

/// Full-token encodings for matching, selection and evaluation.
struct FullEncoding {
    Tensor o_a;  // [B, M, D]
    Tensor o_v;  // [B, N, D]
    Tensor c_a;  // [B, D], unit norm
    Tensor c_v;
};

class Backbone {
   public:
    Backbone(const BackboneConfig& cfg, const data::Geometry& geometry, std::uint64_t seed);

    const BackboneConfig& config() const { return cfg_; }
    const data::Geometry& geometry() const { return geometry_; }
    nc::ParamStore& params() { return params_; }
    const nc::ParamStore& params() const { return params_; }

    /// Linear patch embedding plus positional embedding at the original indices.
    Tensor embed(const data::PatchSet& patches) const;

    FusedOutput forward_fused(const Tensor& a_emb, const Tensor& v_emb, const Mask& m_a, const Mask& m_v) const;

    /// Joint fusion only (no single-modality path); used to re-fuse shuffled pairs.
    std::pair<Tensor, Tensor> fuse_joint(const Tensor& ea, const Tensor& ev, const TokenLayout& la,
                                         const TokenLayout& lv) const;
    /// Modality encoders on visible tokens.
    Tensor encode_audio(const Tensor& a_emb, const TokenLayout& layout) const;
    Tensor encode_video(const Tensor& v_emb, const TokenLayout& layout) const;

    /// Mean-pooled, L2-normalized contrastive features.
    Tensor pool(const Tensor& tilde, const TokenLayout& layout) const;

    /// Reinserts mask tokens and predicts every patch of both modalities.
    std::pair<Tensor, Tensor> decode(const FusedOutput& fused, const data::PatchSet& a,
                                     const data::PatchSet& v) const;

    /// Masked forward: reconstruction loss plus contrastive features.
    ForwardResult forward(const data::PatchSet& a, const data::PatchSet& v, const Mask& m_a,
                          const Mask& m_v) const;

    /// No-mask forward (callers usually wrap it in NoGradGuard).
    FullEncoding encode_full(const data::PatchSet& a, const data::PatchSet& v) const;

    std::vector<nc::NamedTensor> state(const std::string& prefix = "backbone/") const {
        return params_.snapshot(prefix);
    }
    void load(const std::vector<nc::NamedTensor>& source, const std::string& prefix = "backbone/") {
        params_.load(source, prefix);
    }

   private:
    BackboneConfig cfg_;
    data::Geometry geometry_;
    nc::ParamStore params_;
    nc::Linear patch_a_, patch_v_;
    Tensor pos_a_, pos_v_;
    std::vector<nc::TransformerBlock> enc_a_, enc_v_, fusion_, decoder_;
    nc::LayerNorm norm_joint_, norm_a_, norm_v_, dec_norm_;
    nc::Linear dec_embed_;
    Tensor mask_token_a_, mask_token_v_;
    Tensor dec_pos_a_, dec_pos_v_;
    nc::Linear head_a_, head_v_;
};

/// Sum over modalities of the batch mean of per-sample masked-patch MSE
/// (per-patch pixel mean, averaged over the sample's masked patches).
Tensor reconstruction_loss(const Tensor& decoded_a, const Tensor& decoded_v, const Tensor& x_a, const Tensor& x_v,
                           const Mask& m_a, const Mask& m_v);

/// Symmetric InfoNCE over B x B similarities of unit-norm features.
Tensor contrastive_loss(const Tensor& c_a, const Tensor& c_v, double tau);

/// -(1/B) sum_i [log_softmax_row(L)[i,i] + log_softmax_col(L)[i,i]].
Tensor info_nce(const Tensor& logits);

/// l_r + lambda * l_c + alpha * l_p; an undefined l_p counts as zero.
Tensor pretrain_objective(const Tensor& l_r, const Tensor& l_c, const Tensor& l_p, double lambda, double alpha);

/// Independent random masks for every row of a B x n patch set.
Mask random_masks(std::size_t batch, std::size_t n, double mask_prob, Rng& rng);

}  // namespace stella::backbone
