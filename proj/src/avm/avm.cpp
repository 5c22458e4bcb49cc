#include "stella/avm/avm.hpp"

#include <cmath>
#include <stdexcept>

namespace stella::avm {

namespace {

Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.dim(0);
    const std::size_t n = x.dim(1);
    const std::size_t d = x.dim(2) / heads;
    return nc::permute(nc::reshape(x, {b, n, heads, d}), {0, 2, 1, 3});
}

Tensor merge_pooled(const Tensor& attended) {
    // [B, H, n, d] -> mean over n -> [B, H*d]
    Tensor pooled = nc::mean(attended, 2);
    return nc::reshape(pooled, {pooled.dim(0), pooled.dim(1) * pooled.dim(2)});
}

}  // namespace

AvmModule::AvmModule(std::size_t dim, std::size_t heads, std::uint64_t seed) : dim_(dim), heads_(heads) {
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("AVM dim must be divisible by heads");
    }
    Rng rng(seed);
    const double std = std::sqrt(1.0 / static_cast<double>(dim));
    wq_a = params_.add("wq_a", {dim, dim}, rng, std);
    wk_a = params_.add("wk_a", {dim, dim}, rng, std);
    wv_a = params_.add("wv_a", {dim, dim}, rng, std);
    wq_v = params_.add("wq_v", {dim, dim}, rng, std);
    wk_v = params_.add("wk_v", {dim, dim}, rng, std);
    wv_v = params_.add("wv_v", {dim, dim}, rng, std);
    fc1 = nc::Linear(params_, "fc1", 2 * dim, dim, rng);
    fc2 = nc::Linear(params_, "fc2", dim, 1, rng);
}

Projections AvmModule::project(const Tensor& o_a, const Tensor& o_v) const {
    if (o_a.rank() != 3 || o_v.rank() != 3 || o_a.dim(2) != dim_ || o_v.dim(2) != dim_ || o_a.dim(0) != o_v.dim(0)) {
        throw nc::ShapeError("AVM expects [B, M, D] and [B, N, D] with D = " + std::to_string(dim_) + ", got " +
                             nc::shape_str(o_a.shape()) + " and " + nc::shape_str(o_v.shape()));
    }
    Projections p;
    p.q_a = split_heads(nc::matmul(o_a, wq_a), heads_);
    p.k_a = split_heads(nc::matmul(o_a, wk_a), heads_);
    p.v_a = split_heads(nc::matmul(o_a, wv_a), heads_);
    p.q_v = split_heads(nc::matmul(o_v, wq_v), heads_);
    p.k_v = split_heads(nc::matmul(o_v, wk_v), heads_);
    p.v_v = split_heads(nc::matmul(o_v, wv_v), heads_);
    return p;
}

CrossAttention AvmModule::cross_attention(const Tensor& o_a, const Tensor& o_v, double beta) const {
    CrossAttention out;
    out.proj = project(o_a, o_v);
    out.maps.a_a = nc::attention_logits(out.proj.q_v, out.proj.k_a, beta);
    out.maps.a_v = nc::attention_logits(out.proj.q_a, out.proj.k_v, beta);
    out.maps.beta = beta;
    return out;
}

Tensor AvmModule::pooled_values(const Tensor& o_a, const Tensor& o_v) const {
    CrossAttention ca = cross_attention(o_a, o_v, 1.0);
    Tensor va = nc::matmul(nc::softmax(ca.maps.a_a, -1), ca.proj.v_a);  // [B, H, N, d]
    Tensor vv = nc::matmul(nc::softmax(ca.maps.a_v, -1), ca.proj.v_v);  // [B, H, M, d]
    return nc::concat({merge_pooled(va), merge_pooled(vv)}, 1);
}

Tensor AvmModule::head(const Tensor& pooled) const {
    Tensor logit = fc2.forward(nc::gelu(fc1.forward(pooled)));
    return nc::reshape(nc::sigmoid(logit), {pooled.dim(0)});
}

Tensor AvmModule::matching_forward(const Tensor& o_a, const Tensor& o_v) const {
    return head(pooled_values(o_a, o_v));
}

std::vector<std::size_t> random_derangement(std::size_t n, Rng& rng) {
    if (n < 2) {
        throw std::invalid_argument("a derangement needs at least 2 elements");
    }
    while (true) {
        auto p = rng.permutation(n);
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) {
            ok = p[i] != i;
        }
        if (ok) {
            return p;
        }
    }
}

PairPlan plan_negatives(std::size_t batch, Rng& rng) {
    if (batch < 2) {
        throw std::invalid_argument("matching needs a batch of at least 2 pairs");
    }
    PairPlan plan;
    plan.audio_source.resize(batch);
    plan.labels.assign(batch, 1.0);
    for (std::size_t i = 0; i < batch; ++i) {
        plan.audio_source[i] = i;
    }
    const std::size_t k = batch / 2;
    auto order = rng.permutation(batch);
    std::vector<std::size_t> neg(order.begin(), order.begin() + static_cast<long>(k));
    if (k == 1) {
        std::size_t j = rng.index(batch - 1);
        plan.audio_source[neg[0]] = j >= neg[0] ? j + 1 : j;
    } else {
        auto d = random_derangement(k, rng);
        for (std::size_t i = 0; i < k; ++i) {
            plan.audio_source[neg[i]] = neg[d[i]];
        }
    }
    for (auto i : neg) {
        plan.labels[i] = 0.0;
    }
    return plan;
}

namespace {

void assert_no_backbone_grad(const backbone::Backbone& bb) {
    for (const auto& e : bb.params().entries()) {
        if (!e.tensor.has_grad()) {
            continue;
        }
        for (double g : e.tensor.grad()) {
            if (g != 0.0) {
                throw std::logic_error("matching loss leaked gradient into backbone parameter " + e.name);
            }
        }
    }
}

}  // namespace

AvmStepResult avm_train_step(const backbone::Backbone& bb, const Tensor& ea, const Tensor& ev,
                             const backbone::TokenLayout& la, const backbone::TokenLayout& lv, AvmModule& avm,
                             nc::Adam& opt, Rng& rng) {
    const std::size_t b = ea.dim(0);
    PairPlan plan = plan_negatives(b, rng);
    Tensor o_a, o_v;
    {
        nc::NoGradGuard no_grad;
        Tensor shuffled = nc::index_select(ea.detach(), 0, plan.audio_source);
        std::tie(o_a, o_v) = bb.fuse_joint(shuffled, ev.detach(), la, lv);
    }
    avm.params().zero_grad();
    Tensor prob = avm.matching_forward(o_a.detach(), o_v.detach());
    Tensor loss = nc::binary_cross_entropy(prob, Tensor::from({b}, plan.labels));
    nc::backward(loss);
    assert_no_backbone_grad(bb);
    opt.step();
    AvmStepResult r;
    r.loss = loss.item();
    r.negatives = b / 2;
    return r;
}

AvmStepResult avm_train_step(const backbone::Backbone& bb, const data::PatchSet& a, const data::PatchSet& v,
                             AvmModule& avm, nc::Adam& opt, Rng& rng) {
    Tensor ea, ev;
    backbone::TokenLayout la, lv;
    {
        nc::NoGradGuard no_grad;
        la = backbone::make_layout(backbone::Mask(a.batch() * a.count(), 0), a.batch(), a.count());
        lv = backbone::make_layout(backbone::Mask(v.batch() * v.count(), 0), v.batch(), v.count());
        ea = bb.encode_audio(bb.embed(a), la);
        ev = bb.encode_video(bb.embed(v), lv);
    }
    return avm_train_step(bb, ea, ev, la, lv, avm, opt, rng);
}

double matching_accuracy(const backbone::Backbone& bb, const AvmModule& avm, const data::PatchBank& bank,
                         const data::Geometry& geometry, Rng& rng, std::size_t chunk) {
    const std::size_t n = bank.size();
    if (n == 0) {
        throw std::invalid_argument("matching_accuracy: empty bank");
    }
    nc::NoGradGuard no_grad;
    std::vector<Tensor> ea_parts, ev_parts;
    for (std::size_t s = 0; s < n; s += chunk) {
        std::vector<std::size_t> rows;
        for (std::size_t i = s; i < std::min(n, s + chunk); ++i) {
            rows.push_back(i);
        }
        auto batch = data::make_batch(bank, rows, geometry);
        auto la = backbone::make_layout(backbone::Mask(rows.size() * batch.audio.count(), 0), rows.size(),
                                        batch.audio.count());
        auto lv = backbone::make_layout(backbone::Mask(rows.size() * batch.video.count(), 0), rows.size(),
                                        batch.video.count());
        ea_parts.push_back(bb.encode_audio(bb.embed(batch.audio), la));
        ev_parts.push_back(bb.encode_video(bb.embed(batch.video), lv));
    }
    Tensor ea = nc::concat(ea_parts, 0);
    Tensor ev = nc::concat(ev_parts, 0);

    std::size_t correct = 0;
    std::size_t total = 0;
    auto score = [&](const std::vector<std::size_t>& audio_rows, const std::vector<std::size_t>& video_rows,
                     bool positive) {
        for (std::size_t s = 0; s < audio_rows.size(); s += chunk) {
            std::size_t e = std::min(audio_rows.size(), s + chunk);
            std::vector<std::size_t> ar(audio_rows.begin() + static_cast<long>(s),
                                        audio_rows.begin() + static_cast<long>(e));
            std::vector<std::size_t> vr(video_rows.begin() + static_cast<long>(s),
                                        video_rows.begin() + static_cast<long>(e));
            auto la = backbone::make_layout(backbone::Mask(ar.size() * ea.dim(1), 0), ar.size(), ea.dim(1));
            auto lv = backbone::make_layout(backbone::Mask(vr.size() * ev.dim(1), 0), vr.size(), ev.dim(1));
            auto [o_a, o_v] = bb.fuse_joint(nc::index_select(ea, 0, ar), nc::index_select(ev, 0, vr), la, lv);
            Tensor p = avm.matching_forward(o_a, o_v);
            for (double x : p.data()) {
                correct += positive ? (x > 0.5) : (x < 0.5);
                ++total;
            }
        }
    };
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) {
        all[i] = i;
    }
    score(all, all, true);
    std::vector<std::size_t> neg_audio, neg_video;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> candidates;
        for (std::size_t j = 0; j < n; ++j) {
            if (bank.audio_class[j] != bank.video_class[i]) {
                candidates.push_back(j);
            }
        }
        if (!candidates.empty()) {
            neg_audio.push_back(candidates[rng.index(candidates.size())]);
            neg_video.push_back(i);
        }
    }
    score(neg_audio, neg_video, false);
    return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace stella::avm
