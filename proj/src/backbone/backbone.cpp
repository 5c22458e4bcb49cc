#include "stella/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stella::backbone {

namespace {

constexpr double kPadBias = -1e30;
constexpr double kInitStd = 0.02;

void check_mask(const Mask& m, std::size_t batch, std::size_t n, const char* what) {
    if (m.size() != batch * n) {
        throw nc::ShapeError(std::string(what) + " mask has " + std::to_string(m.size()) + " entries, expected " +
                             std::to_string(batch * n));
    }
}

Tensor gather_positions(const Tensor& table, const data::PatchSet& set) {
    for (auto i : set.indices) {
        if (i >= table.dim(0)) {
            throw nc::ShapeError("patch index " + std::to_string(i) + " beyond positional table");
        }
    }
    return nc::reshape(nc::index_select(table, 0, set.indices), {set.batch(), set.count(), table.dim(1)});
}

// Per-row mean over patches of the per-patch pixel-mean squared error,
// restricted to masked patches.
Tensor masked_patch_mse(const Tensor& decoded, const Tensor& target, const Mask& mask, std::size_t* masked_total) {
    if (decoded.shape() != target.shape() || decoded.rank() != 3) {
        throw nc::ShapeError("reconstruction shapes differ: " + nc::shape_str(decoded.shape()) + " vs " +
                             nc::shape_str(target.shape()));
    }
    const std::size_t b = decoded.dim(0);
    const std::size_t n = decoded.dim(1);
    check_mask(mask, b, n, "reconstruction");
    std::vector<double> w(b * n, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t cnt = 0;
        for (std::size_t j = 0; j < n; ++j) {
            cnt += mask[i * n + j] != 0;
        }
        *masked_total += cnt;
        for (std::size_t j = 0; j < n && cnt > 0; ++j) {
            if (mask[i * n + j]) {
                w[i * n + j] = 1.0 / (static_cast<double>(cnt) * static_cast<double>(b));
            }
        }
    }
    Tensor per_patch = nc::mean(nc::square(nc::sub(decoded, target)), 2);
    return nc::sum_all(nc::mul(per_patch, Tensor::from({b, n}, std::move(w))));
}

}  // namespace

void BackboneConfig::validate() const {
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw std::invalid_argument("embed_dim must be a positive multiple of heads");
    }
    if (!(mask_prob >= 0.0 && mask_prob < 1.0)) {
        throw std::invalid_argument("mask_prob must lie in [0, 1)");
    }
    if (!(tau > 0.0)) {
        throw std::invalid_argument("tau must be positive");
    }
    if (!(lambda >= 0.0)) {
        throw std::invalid_argument("lambda must be non-negative");
    }
    if (encoder_layers == 0 || fusion_layers == 0 || decoder_layers == 0 || mlp_ratio == 0) {
        throw std::invalid_argument("layer counts and mlp_ratio must be positive");
    }
}

TokenLayout make_layout(const Mask& mask, std::size_t batch, std::size_t length) {
    check_mask(mask, batch, length, "layout");
    TokenLayout l;
    l.batch = batch;
    l.length = length;
    l.counts.assign(batch, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < length; ++j) {
            l.counts[b] += mask[b * length + j] == 0;
        }
        if (l.counts[b] == 0) {
            throw data::DataError("every patch of a row is masked");
        }
        l.width = std::max(l.width, l.counts[b]);
    }
    l.slot_pos.assign(batch * l.width, 0);
    l.pos_slot.assign(batch * length, l.width);
    std::vector<double> bias(batch * l.width, 0.0);
    std::vector<double> weights(batch * l.width, 0.0);
    bool padded = false;
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t s = 0;
        for (std::size_t j = 0; j < length; ++j) {
            if (mask[b * length + j] == 0) {
                l.slot_pos[b * l.width + s] = j;
                l.pos_slot[b * length + j] = s;
                weights[b * l.width + s] = 1.0;
                ++s;
            }
        }
        for (; s < l.width; ++s) {
            bias[b * l.width + s] = kPadBias;
            padded = true;
        }
    }
    if (padded) {
        l.key_bias = Tensor::from({batch, 1, 1, l.width}, std::move(bias));
        l.weights = Tensor::from({batch, l.width, 1}, std::move(weights));
    }
    return l;
}

Mask random_masks(std::size_t batch, std::size_t n, double mask_prob, Rng& rng) {
    Mask out;
    out.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = data::random_mask(n, mask_prob, rng);
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

Backbone::Backbone(const BackboneConfig& cfg, const data::Geometry& geometry, std::uint64_t seed)
    : cfg_(cfg), geometry_(geometry) {
    cfg_.validate();
    geometry_.audio.validate();
    geometry_.video.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.embed_dim;
    const std::size_t m = geometry_.audio.num_patches();
    const std::size_t n = geometry_.video.num_patches();
    patch_a_ = nc::Linear(params_, "patch_a", geometry_.audio.patch_dim(), d, rng);
    patch_v_ = nc::Linear(params_, "patch_v", geometry_.video.patch_dim(), d, rng);
    pos_a_ = params_.add("pos_a", {m, d}, rng, kInitStd);
    pos_v_ = params_.add("pos_v", {n, d}, rng, kInitStd);
    auto blocks = [&](const std::string& name, std::size_t count) {
        std::vector<nc::TransformerBlock> out;
        for (std::size_t i = 0; i < count; ++i) {
            out.emplace_back(params_, name + "/" + std::to_string(i), d, cfg_.heads, cfg_.mlp_ratio, cfg_.ln_eps,
                             rng);
        }
        return out;
    };
    enc_a_ = blocks("enc_a", cfg_.encoder_layers);
    enc_v_ = blocks("enc_v", cfg_.encoder_layers);
    fusion_ = blocks("fusion", cfg_.fusion_layers);
    norm_joint_ = nc::LayerNorm(params_, "norm_joint", d, cfg_.ln_eps);
    norm_a_ = nc::LayerNorm(params_, "norm_a", d, cfg_.ln_eps);
    norm_v_ = nc::LayerNorm(params_, "norm_v", d, cfg_.ln_eps);
    dec_embed_ = nc::Linear(params_, "dec_embed", d, d, rng);
    mask_token_a_ = params_.add("mask_token_a", {d}, rng, kInitStd);
    mask_token_v_ = params_.add("mask_token_v", {d}, rng, kInitStd);
    dec_pos_a_ = params_.add("dec_pos_a", {m, d}, rng, kInitStd);
    dec_pos_v_ = params_.add("dec_pos_v", {n, d}, rng, kInitStd);
    decoder_ = blocks("decoder", cfg_.decoder_layers);
    dec_norm_ = nc::LayerNorm(params_, "dec_norm", d, cfg_.ln_eps);
    head_a_ = nc::Linear(params_, "head_a", d, geometry_.audio.patch_dim(), rng);
    head_v_ = nc::Linear(params_, "head_v", d, geometry_.video.patch_dim(), rng);
}

Tensor Backbone::embed(const data::PatchSet& patches) const {
    const bool audio = patches.modality == data::Modality::audio;
    const std::size_t pd = audio ? geometry_.audio.patch_dim() : geometry_.video.patch_dim();
    if (patches.patches.rank() != 3 || patches.patch_dim() != pd) {
        throw nc::ShapeError(std::string("embed: ") + data::modality_name(patches.modality) + " patches " +
                             nc::shape_str(patches.patches.shape()) + " do not match patch dim " +
                             std::to_string(pd));
    }
    if (patches.indices.size() != patches.batch() * patches.count()) {
        throw nc::ShapeError("embed: index count does not match patch count");
    }
    const auto& proj = audio ? patch_a_ : patch_v_;
    return nc::add(proj.forward(patches.patches), gather_positions(audio ? pos_a_ : pos_v_, patches));
}

Tensor Backbone::encode_audio(const Tensor& a_emb, const TokenLayout& layout) const {
    Tensor x = nc::gather_rows(a_emb, layout.slot_pos, layout.width);
    for (const auto& blk : enc_a_) {
        x = blk.forward(x, layout.key_bias);
    }
    return x;
}

Tensor Backbone::encode_video(const Tensor& v_emb, const TokenLayout& layout) const {
    Tensor x = nc::gather_rows(v_emb, layout.slot_pos, layout.width);
    for (const auto& blk : enc_v_) {
        x = blk.forward(x, layout.key_bias);
    }
    return x;
}

std::pair<Tensor, Tensor> Backbone::fuse_joint(const Tensor& ea, const Tensor& ev, const TokenLayout& la,
                                               const TokenLayout& lv) const {
    Tensor x = nc::concat({ea, ev}, 1);
    Tensor bias;
    if (la.key_bias.defined() || lv.key_bias.defined()) {
        auto zeros_for = [](const TokenLayout& l) {
            return l.key_bias.defined() ? l.key_bias : Tensor::zeros({l.batch, 1, 1, l.width});
        };
        bias = nc::concat({zeros_for(la), zeros_for(lv)}, 3);
    }
    for (const auto& blk : fusion_) {
        x = blk.forward(x, bias);
    }
    x = norm_joint_.forward(x);
    return {nc::slice(x, 1, 0, la.width), nc::slice(x, 1, la.width, la.width + lv.width)};
}

FusedOutput Backbone::forward_fused(const Tensor& a_emb, const Tensor& v_emb, const Mask& m_a,
                                    const Mask& m_v) const {
    if (a_emb.rank() != 3 || v_emb.rank() != 3 || a_emb.dim(0) != v_emb.dim(0)) {
        throw nc::ShapeError("forward_fused: embeddings must be [B, n, D] with equal B");
    }
    FusedOutput out;
    out.layout_a = make_layout(m_a, a_emb.dim(0), a_emb.dim(1));
    out.layout_v = make_layout(m_v, v_emb.dim(0), v_emb.dim(1));
    Tensor ea = encode_audio(a_emb, out.layout_a);
    Tensor ev = encode_video(v_emb, out.layout_v);
    std::tie(out.o_a, out.o_v) = fuse_joint(ea, ev, out.layout_a, out.layout_v);
    Tensor ta = ea;
    Tensor tv = ev;
    for (const auto& blk : fusion_) {
        ta = blk.forward(ta, out.layout_a.key_bias);
        tv = blk.forward(tv, out.layout_v.key_bias);
    }
    out.a_tilde = norm_a_.forward(ta);
    out.v_tilde = norm_v_.forward(tv);
    return out;
}

Tensor Backbone::pool(const Tensor& tilde, const TokenLayout& layout) const {
    Tensor pooled;
    if (!layout.weights.defined()) {
        pooled = nc::mean(tilde, 1);
    } else {
        std::vector<double> counts(layout.counts.begin(), layout.counts.end());
        pooled = nc::div(nc::sum(nc::mul(tilde, layout.weights), 1),
                         Tensor::from({layout.batch, 1}, std::move(counts)));
    }
    return nc::l2_normalize(pooled, -1);
}

std::pair<Tensor, Tensor> Backbone::decode(const FusedOutput& fused, const data::PatchSet& a,
                                           const data::PatchSet& v) const {
    const std::size_t d = cfg_.embed_dim;
    auto assemble = [&](const Tensor& o, const TokenLayout& l, const Tensor& token, const Tensor& pos,
                        const data::PatchSet& set) {
        Tensor mt = nc::add(Tensor::zeros({l.batch, 1, d}), token);
        Tensor src = nc::concat({dec_embed_.forward(o), mt}, 1);
        return nc::add(nc::gather_rows(src, l.pos_slot, l.length), gather_positions(pos, set));
    };
    Tensor xa = assemble(fused.o_a, fused.layout_a, mask_token_a_, dec_pos_a_, a);
    Tensor xv = assemble(fused.o_v, fused.layout_v, mask_token_v_, dec_pos_v_, v);
    Tensor x = nc::concat({xa, xv}, 1);
    for (const auto& blk : decoder_) {
        x = blk.forward(x);
    }
    x = dec_norm_.forward(x);
    const std::size_t na = fused.layout_a.length;
    const std::size_t nv = fused.layout_v.length;
    return {head_a_.forward(nc::slice(x, 1, 0, na)), head_v_.forward(nc::slice(x, 1, na, na + nv))};
}

ForwardResult Backbone::forward(const data::PatchSet& a, const data::PatchSet& v, const Mask& m_a,
                                const Mask& m_v) const {
    FusedOutput fused = forward_fused(embed(a), embed(v), m_a, m_v);
    ForwardResult r;
    std::tie(r.decoded_a, r.decoded_v) = decode(fused, a, v);
    r.l_r = reconstruction_loss(r.decoded_a, r.decoded_v, a.patches, v.patches, m_a, m_v);
    r.c_a = pool(fused.a_tilde, fused.layout_a);
    r.c_v = pool(fused.v_tilde, fused.layout_v);
    return r;
}

FullEncoding Backbone::encode_full(const data::PatchSet& a, const data::PatchSet& v) const {
    Mask none_a(a.batch() * a.count(), 0);
    Mask none_v(v.batch() * v.count(), 0);
    FusedOutput fused = forward_fused(embed(a), embed(v), none_a, none_v);
    return {fused.o_a, fused.o_v, pool(fused.a_tilde, fused.layout_a), pool(fused.v_tilde, fused.layout_v)};
}

Tensor reconstruction_loss(const Tensor& decoded_a, const Tensor& decoded_v, const Tensor& x_a, const Tensor& x_v,
                           const Mask& m_a, const Mask& m_v) {
    std::size_t masked = 0;
    Tensor la = masked_patch_mse(decoded_a, x_a, m_a, &masked);
    Tensor lv = masked_patch_mse(decoded_v, x_v, m_v, &masked);
    if (masked == 0) {
        throw std::invalid_argument("reconstruction loss undefined: no patch is masked in either modality");
    }
    return nc::add(la, lv);
}

Tensor contrastive_loss(const Tensor& c_a, const Tensor& c_v, double tau) {
    if (c_a.rank() != 2 || c_a.shape() != c_v.shape()) {
        throw nc::ShapeError("contrastive_loss expects matching [B, D] features");
    }
    const std::size_t b = c_a.dim(0);
    if (b < 2) {
        throw std::invalid_argument("contrastive_loss needs at least 2 pairs");
    }
    if (!(tau > 0.0)) {
        throw std::invalid_argument("contrastive_loss: tau must be positive");
    }
    return info_nce(nc::div_scalar(nc::matmul(c_a, nc::transpose(c_v, 0, 1)), tau));
}

Tensor info_nce(const Tensor& logits) {
    if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
        throw nc::ShapeError("info_nce expects square logits");
    }
    const std::size_t b = logits.dim(0);
    std::vector<double> eye(b * b, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        eye[i * b + i] = 1.0;
    }
    Tensor diag = Tensor::from({b, b}, std::move(eye));
    Tensor both = nc::add(nc::log_softmax(logits, 1), nc::log_softmax(logits, 0));
    return nc::div_scalar(nc::neg(nc::sum_all(nc::mul(both, diag))), static_cast<double>(b));
}

Tensor pretrain_objective(const Tensor& l_r, const Tensor& l_c, const Tensor& l_p, double lambda, double alpha) {
    Tensor total = nc::add(l_r, nc::scale(l_c, lambda));
    if (l_p.defined() && alpha != 0.0) {
        total = nc::add(total, nc::scale(l_p, alpha));
    }
    return total;
}

}  // namespace stella::backbone
