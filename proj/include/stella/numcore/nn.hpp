#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stella/numcore/checkpoint.hpp"
#include "stella/numcore/ops.hpp"
#include "stella/numcore/random.hpp"

namespace stella::nc {

/// Ordered registry of named trainable leaves.
class ParamStore {
   public:
    Tensor add(const std::string& name, Shape shape, Rng& rng, double init_std);
    Tensor add_constant(const std::string& name, Shape shape, double value);

    const std::vector<NamedTensor>& entries() const { return entries_; }
    std::vector<Tensor> tensors() const;
    std::size_t parameter_count() const;

    void zero_grad();
    /// Copies values from a checkpoint; every registered name must be present
    /// with a matching shape.
    void load(const std::vector<NamedTensor>& source, const std::string& prefix = "");
    std::vector<NamedTensor> snapshot(const std::string& prefix = "") const;

   private:
    std::vector<NamedTensor> entries_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.95;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
   public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void step();
    std::size_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    std::vector<NamedTensor> state(const std::string& prefix) const;
    void load_state(const std::vector<NamedTensor>& source, const std::string& prefix);

   private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

class Linear {
   public:
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

    Tensor weight;
    Tensor bias;
};

class LayerNorm {
   public:
    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, std::size_t dim, double eps);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps_); }

    Tensor gamma;
    Tensor beta;

   private:
    double eps_ = 1e-6;
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
/// Input [B, n, D]. `key_bias` ([B, 1, 1, n], constant) is added to the
/// attention logits; large negative entries hide padded keys.
class TransformerBlock {
   public:
    TransformerBlock() = default;
    TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                     std::size_t mlp_ratio, double eps, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& key_bias = Tensor()) const;

   private:
    std::size_t dim_ = 0;
    std::size_t heads_ = 1;
    LayerNorm ln1_;
    Linear qkv_;
    Linear proj_;
    LayerNorm ln2_;
    Linear fc1_;
    Linear fc2_;
};

}  // namespace stella::nc
