#include "stella/numcore/nn.hpp"

#include <cmath>

namespace stella::nc {

Tensor ParamStore::add(const std::string& name, Shape shape, Rng& rng, double init_std) {
    std::vector<double> values(numel_of(shape));
    for (auto& v : values) {
        v = init_std * rng.normal();
    }
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    entries_.push_back({name, t});
    return t;
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, true);
    entries_.push_back({name, t});
    return t;
}

std::vector<Tensor> ParamStore::tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.push_back(e.tensor);
    }
    return out;
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.tensor.numel();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) {
        e.tensor.zero_grad();
    }
}

void ParamStore::load(const std::vector<NamedTensor>& source, const std::string& prefix) {
    for (auto& e : entries_) {
        const Tensor& src = find_tensor(source, prefix + e.name);
        if (src.shape() != e.tensor.shape()) {
            throw FormatError("shape mismatch for '" + e.name + "': " + shape_str(src.shape()) + " vs " +
                              shape_str(e.tensor.shape()));
        }
        auto dst = e.tensor.mutable_data();
        std::copy(src.data().begin(), src.data().end(), dst.begin());
    }
}

std::vector<NamedTensor> ParamStore::snapshot(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.push_back({prefix + e.name, e.tensor.detach()});
    }
    return out;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) {
            continue;
        }
        auto w = p.mutable_data();
        auto g = p.mutable_grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            double gj = g[j] + cfg_.weight_decay * w[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            double mh = m[j] / bc1;
            double vh = v[j] / bc2;
            w[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
        for (double x : w) {
            if (!std::isfinite(x)) {
                throw NumericError("Adam: parameter diverged");
            }
        }
    }
}

std::vector<NamedTensor> Adam::state(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    out.push_back({prefix + "t", Tensor::scalar(static_cast<double>(t_))});
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({prefix + "m/" + std::to_string(i), Tensor::from(params_[i].shape(), m_[i])});
        out.push_back({prefix + "v/" + std::to_string(i), Tensor::from(params_[i].shape(), v_[i])});
    }
    return out;
}

void Adam::load_state(const std::vector<NamedTensor>& source, const std::string& prefix) {
    t_ = static_cast<std::size_t>(find_tensor(source, prefix + "t").item());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& m = find_tensor(source, prefix + "m/" + std::to_string(i));
        const auto& v = find_tensor(source, prefix + "v/" + std::to_string(i));
        if (m.numel() != m_[i].size() || v.numel() != v_[i].size()) {
            throw FormatError("optimizer state size mismatch");
        }
        m_[i].assign(m.data().begin(), m.data().end());
        v_[i].assign(v.data().begin(), v.data().end());
    }
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    // Xavier-uniform-scale normal init.
    double std = std::sqrt(2.0 / static_cast<double>(in + out));
    weight = store.add(name + "/weight", {in, out}, rng, std);
    bias = store.add_constant(name + "/bias", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim, double eps) : eps_(eps) {
    gamma = store.add_constant(name + "/gamma", {dim}, 1.0);
    beta = store.add_constant(name + "/beta", {dim}, 0.0);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                                   std::size_t mlp_ratio, double eps, Rng& rng)
    : dim_(dim), heads_(heads) {
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("TransformerBlock: dim must be divisible by heads");
    }
    ln1_ = LayerNorm(store, name + "/ln1", dim, eps);
    qkv_ = Linear(store, name + "/qkv", dim, 3 * dim, rng);
    proj_ = Linear(store, name + "/proj", dim, dim, rng);
    ln2_ = LayerNorm(store, name + "/ln2", dim, eps);
    fc1_ = Linear(store, name + "/fc1", dim, mlp_ratio * dim, rng);
    fc2_ = Linear(store, name + "/fc2", mlp_ratio * dim, dim, rng);
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor& key_bias) const {
    if (x.rank() != 3 || x.dim(2) != dim_) {
        throw ShapeError("TransformerBlock expects [B, n, " + std::to_string(dim_) + "], got " + shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0);
    const std::size_t n = x.dim(1);
    const std::size_t d = dim_ / heads_;
    Tensor qkv = reshape(qkv_.forward(ln1_.forward(x)), {b, n, 3, heads_, d});
    qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, B, H, n, d]
    auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {b, heads_, n, d}); };
    Tensor q = part(0);
    Tensor k = part(1);
    Tensor v = part(2);
    Tensor logits = div_scalar(matmul(q, transpose(k, -1, -2)), std::sqrt(static_cast<double>(d)));
    if (key_bias.defined()) {
        logits = add(logits, key_bias);
    }
    Tensor attn = softmax(logits, -1);
    Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, n, dim_});
    Tensor h = add(x, proj_.forward(ctx));
    return add(h, fc2_.forward(gelu(fc1_.forward(ln2_.forward(h)))));
}

}  // namespace stella::nc
