// Layer modules over the tensor ops: parameter ownership, Kaiming-uniform
// initialization, named-parameter collection for the optimizer and for
// checkpoints. Layers are plain structs; forward() builds the autodiff graph.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

template <typename T>
struct NamedTensor {
    std::string name;
    TensorT<T> tensor;
    bool trainable = true;
};

namespace init {

// Kaiming-uniform with ReLU gain: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
TensorT<T> kaiming_uniform(Shape shape, std::int64_t fan_in, CounterRng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return TensorT<T>::rand_uniform(std::move(shape), rng, static_cast<T>(-bound),
                                    static_cast<T>(bound));
}

template <typename T>
TensorT<T> bias_uniform(Shape shape, std::int64_t fan_in, CounterRng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return TensorT<T>::rand_uniform(std::move(shape), rng, static_cast<T>(-bound),
                                    static_cast<T>(bound));
}

}  // namespace init

template <typename T>
struct LinearLayer {
    TensorT<T> weight;  // (Dout, Din)
    TensorT<T> bias;    // (Dout)

    void init(std::int64_t din, std::int64_t dout, CounterRng& rng) {
        weight = init::kaiming_uniform<T>({dout, din}, din, rng).set_requires_grad(true);
        bias = init::bias_uniform<T>({dout}, din, rng).set_requires_grad(true);
    }

    TensorT<T> forward(const TensorT<T>& x) const { return linear(x, weight, bias); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
};

template <typename T>
struct Conv2dLayer {
    TensorT<T> weight;  // (Cout, Cin, kh, kw)
    TensorT<T> bias;    // (Cout)
    std::int64_t stride = 1;
    std::int64_t padding = 0;

    void init(std::int64_t cin, std::int64_t cout, std::int64_t kh, std::int64_t kw,
              std::int64_t stride_, std::int64_t padding_, CounterRng& rng) {
        stride = stride_;
        padding = padding_;
        const std::int64_t fan_in = cin * kh * kw;
        weight = init::kaiming_uniform<T>({cout, cin, kh, kw}, fan_in, rng).set_requires_grad(true);
        bias = init::bias_uniform<T>({cout}, fan_in, rng).set_requires_grad(true);
    }

    TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
};

template <typename T>
struct DepthwiseConv2dLayer {
    TensorT<T> weight;  // (C, 1, kh, kw)
    TensorT<T> bias;    // (C)
    std::int64_t stride = 1;
    std::int64_t padding = 0;

    void init(std::int64_t channels, std::int64_t kh, std::int64_t kw, std::int64_t stride_,
              std::int64_t padding_, CounterRng& rng) {
        stride = stride_;
        padding = padding_;
        const std::int64_t fan_in = kh * kw;
        weight = init::kaiming_uniform<T>({channels, 1, kh, kw}, fan_in, rng).set_requires_grad(true);
        bias = init::bias_uniform<T>({channels}, fan_in, rng).set_requires_grad(true);
    }

    TensorT<T> forward(const TensorT<T>& x) const {
        return depthwise_conv2d(x, weight, bias, stride, padding);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
};

template <typename T>
struct BatchNorm2dLayer {
    TensorT<T> gamma, beta;
    TensorT<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    void init(std::int64_t channels, CounterRng&) {
        gamma = TensorT<T>::ones({channels}).set_requires_grad(true);
        beta = TensorT<T>::zeros({channels}).set_requires_grad(true);
        running_mean = TensorT<T>::zeros({channels});
        running_var = TensorT<T>::ones({channels});
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) {
        return batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", gamma, true});
        out.push_back({prefix + ".bias", beta, true});
        out.push_back({prefix + ".running_mean", running_mean, false});
        out.push_back({prefix + ".running_var", running_var, false});
    }
};

template <typename T>
struct LayerNormLayer {
    TensorT<T> gamma, beta;
    T eps = T(1e-5);

    void init(std::int64_t dim, CounterRng&) {
        gamma = TensorT<T>::ones({dim}).set_requires_grad(true);
        beta = TensorT<T>::zeros({dim}).set_requires_grad(true);
    }

    TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        out.push_back({prefix + ".weight", gamma, true});
        out.push_back({prefix + ".bias", beta, true});
    }
};

// Stateful dropout wrapper: owns a counter RNG on a dedicated stream so that
// reseeding the model reproduces every mask.
template <typename T>
struct DropoutLayer {
    double p = 0.0;
    CounterRng rng;

    void init(double rate, std::uint64_t seed, std::uint64_t stream) {
        p = rate;
        rng = CounterRng(seed, stream);
    }

    void reseed(std::uint64_t seed, std::uint64_t stream) { rng = CounterRng(seed, stream); }

    TensorT<T> forward(const TensorT<T>& x, bool training) { return dropout(x, p, training, rng); }
};

// Scaled dot-product multi-head self-attention over (Batch, Seq, Embed).
// No positional encoding; scale = 1/sqrt(Embed/heads). Dropout is applied to
// the attention weights after the softmax.
template <typename T>
struct MultiheadSelfAttention {
    std::int64_t embed = 0;
    std::int64_t heads = 0;
    LinearLayer<T> q_proj, k_proj, v_proj, out_proj;
    DropoutLayer<T> attn_drop;

    void init(std::int64_t embed_, std::int64_t heads_, double dropout_rate, std::uint64_t seed,
              std::uint64_t stream, CounterRng& rng) {
        if (heads_ <= 0 || embed_ % heads_ != 0)
            throw ConfigError("mhsa: embed dim " + std::to_string(embed_) +
                              " not divisible by heads " + std::to_string(heads_));
        embed = embed_;
        heads = heads_;
        q_proj.init(embed, embed, rng);
        k_proj.init(embed, embed, rng);
        v_proj.init(embed, embed, rng);
        out_proj.init(embed, embed, rng);
        attn_drop.init(dropout_rate, seed, stream);
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) {
        if (x.ndim() != 3 || x.dim(2) != embed)
            throw ShapeError("mhsa: expected (B,S," + std::to_string(embed) + "), got " +
                             shape_str(x.shape()));
        const std::int64_t b = x.dim(0), s = x.dim(1);
        const std::int64_t hd = embed / heads;
        auto split = [&](const TensorT<T>& t) {
            // (B,S,E) -> (B*H, S, hd)
            return reshape(permute(reshape(t, {b, s, heads, hd}), {0, 2, 1, 3}), {b * heads, s, hd});
        };
        TensorT<T> q = split(q_proj.forward(x));
        TensorT<T> k = split(k_proj.forward(x));
        TensorT<T> v = split(v_proj.forward(x));
        TensorT<T> scores = bmm(q, permute(k, {0, 2, 1}));  // (B*H, S, S)
        scores = scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        TensorT<T> attn = softmax(scores, 2);
        attn = attn_drop.forward(attn, training);
        TensorT<T> ctx = bmm(attn, v);  // (B*H, S, hd)
        TensorT<T> merged =
            reshape(permute(reshape(ctx, {b, heads, s, hd}), {0, 2, 1, 3}), {b, s, embed});
        return out_proj.forward(merged);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        q_proj.collect(prefix + ".q_proj", out);
        k_proj.collect(prefix + ".k_proj", out);
        v_proj.collect(prefix + ".v_proj", out);
        out_proj.collect(prefix + ".out_proj", out);
    }
};

// Global L2 norm of all parameter gradients.
template <typename T>
double grad_global_norm(const std::vector<NamedTensor<T>>& params) {
    double s = 0.0;
    for (const auto& p : params) {
        if (!p.trainable || !p.tensor.has_grad()) continue;
        for (const T g : p.tensor.grad()) s += static_cast<double>(g) * g;
    }
    return std::sqrt(s);
}

template <typename T>
void clip_grad_norm(std::vector<NamedTensor<T>>& params, double max_norm) {
    const double norm = grad_global_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
        if (!p.trainable || !p.tensor.has_grad()) continue;
        for (auto& g : p.tensor.grad_mut()) g *= f;
    }
}

template <typename T>
void zero_all_grads(std::vector<NamedTensor<T>>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
std::int64_t count_trainable(const std::vector<NamedTensor<T>>& params) {
    std::int64_t n = 0;
    for (const auto& p : params)
        if (p.trainable) n += p.tensor.numel();
    return n;
}

}  // namespace seld
