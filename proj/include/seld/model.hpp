// CST-former network: three-block conv encoder with time-frequency pooling,
// stacked CST blocks (local perception unit, channel/spectral/temporal
// attention, inverted-residual FFN), and a fully connected multi-ACCDOA head.
// Variants:
//   dst — spectral + temporal attention only
//   dca — channel attention over the raw input channels (M folded into batch
//         through the encoder, attended as a sequence of length M, then
//         reduced by mean over M)
//   ule — channel attention with unfolded local patch embeddings
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "seld/nn.hpp"
#include "seld/tensor.hpp"

namespace seld {

enum class Variant { Dst, Dca, Ule };
enum class PoolingPlacement { Front, Middle };
enum class PoolMode { Max, Avg };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::Dst: return "dst";
        case Variant::Dca: return "dca";
        default: return "ule";
    }
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "dst" || s == "DST") return Variant::Dst;
    if (s == "dca" || s == "DCA") return Variant::Dca;
    if (s == "ule" || s == "ULE") return Variant::Ule;
    throw ConfigError("unknown model variant: " + s);
}

inline std::string to_string(PoolingPlacement p) {
    return p == PoolingPlacement::Front ? "front" : "middle";
}

inline PoolingPlacement pooling_from_string(const std::string& s) {
    if (s == "front") return PoolingPlacement::Front;
    if (s == "middle") return PoolingPlacement::Middle;
    throw ConfigError("unknown pooling placement: " + s);
}

struct ModelConfig {
    Variant variant = Variant::Ule;
    bool use_cmt = true;
    PoolingPlacement pooling = PoolingPlacement::Middle;
    PoolMode pool_mode = PoolMode::Max;
    std::int64_t input_channels = 7;
    std::int64_t conv_filters = 64;
    std::int64_t n_cst_blocks = 2;
    std::int64_t heads = 8;
    std::int64_t patch_t = 10;
    std::int64_t patch_f = 4;
    std::int64_t n_classes = 13;
    std::int64_t n_tracks = 3;
    std::int64_t fc_hidden = 128;
    std::int64_t freq_bins = 64;  // input F extent; pooled to F/4 before the head
    double dropout = 0.05;

    std::int64_t output_width() const { return n_tracks * 3 * n_classes; }

    void validate() const {
        if (conv_filters % heads != 0)
            throw ConfigError("conv_filters " + std::to_string(conv_filters) +
                              " not divisible by heads " + std::to_string(heads));
        if (freq_bins % 4 != 0)
            throw ConfigError("freq_bins " + std::to_string(freq_bins) +
                              " not divisible by the total frequency pooling factor 4");
        if (variant == Variant::Ule && (patch_t * patch_f) % heads != 0)
            throw ConfigError("ULE patch embedding " + std::to_string(patch_t * patch_f) +
                              " not divisible by heads " + std::to_string(heads));
        if (n_cst_blocks < 1) throw ConfigError("n_cst_blocks must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

inline nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"variant", to_string(variant)},
                          {"use_cmt", use_cmt},
                          {"pooling", to_string(pooling)},
                          {"pool_mode", pool_mode == PoolMode::Max ? "max" : "avg"},
                          {"input_channels", input_channels},
                          {"conv_filters", conv_filters},
                          {"n_cst_blocks", n_cst_blocks},
                          {"heads", heads},
                          {"patch_t", patch_t},
                          {"patch_f", patch_f},
                          {"n_classes", n_classes},
                          {"n_tracks", n_tracks},
                          {"fc_hidden", fc_hidden},
                          {"freq_bins", freq_bins},
                          {"dropout", dropout}};
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    if (j.contains("use_cmt")) c.use_cmt = j.at("use_cmt").get<bool>();
    if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    if (j.contains("pool_mode"))
        c.pool_mode = j.at("pool_mode").get<std::string>() == "avg" ? PoolMode::Avg : PoolMode::Max;
    auto get_i = [&](const char* k, std::int64_t& dst) {
        if (j.contains(k)) dst = j.at(k).get<std::int64_t>();
    };
    get_i("input_channels", c.input_channels);
    get_i("conv_filters", c.conv_filters);
    get_i("n_cst_blocks", c.n_cst_blocks);
    get_i("heads", c.heads);
    get_i("patch_t", c.patch_t);
    get_i("patch_f", c.patch_f);
    get_i("n_classes", c.n_classes);
    get_i("n_tracks", c.n_tracks);
    get_i("fc_hidden", c.fc_hidden);
    get_i("freq_bins", c.freq_bins);
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// unfold / fold
// ---------------------------------------------------------------------------
// unfold_patches splits (B, C, T, F) into non-overlapping (P_T x P_F) tiles
// and aligns them along the batch axis: output (B * T/P_T * F/P_F, C, P_T*P_F).
//
// Index map (row-major everywhere):
//   tile grid   nT = T/P_T, nF = F/P_F
//   element (b, c, t, f) with t = it*P_T + pt, f = if_*P_F + pf lands at
//     patch   p = (b*nT + it)*nF + if_
//     offset  q = pt*P_F + pf
//   i.e. out[p, c, q] = x[b, c, t, f]. fold_patches is the exact inverse.

template <typename T>
TensorT<T> unfold_patches(const TensorT<T>& x, std::int64_t pt, std::int64_t pf) {
    if (x.ndim() != 4) throw ShapeError("unfold_patches: input must be (B,C,T,F)");
    const std::int64_t b = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
    if (pt < 1 || pf < 1 || t % pt != 0)
        throw ConfigError("unfold_patches: T extent " + std::to_string(t) +
                          " not divisible by patch_t " + std::to_string(pt));
    if (f % pf != 0)
        throw ConfigError("unfold_patches: F extent " + std::to_string(f) +
                          " not divisible by patch_f " + std::to_string(pf));
    const std::int64_t nt = t / pt, nf = f / pf;
    const std::int64_t patches = b * nt * nf, pp = pt * pf;
    std::vector<T> out(static_cast<std::size_t>(patches * c * pp));
    const T* px = x.data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t it = 0; it < nt; ++it)
                for (std::int64_t jf = 0; jf < nf; ++jf) {
                    const std::int64_t p = (bi * nt + it) * nf + jf;
                    T* dst = out.data() + (p * c + ci) * pp;
                    for (std::int64_t pi = 0; pi < pt; ++pi) {
                        const T* src = px + ((bi * c + ci) * t + it * pt + pi) * f + jf * pf;
                        for (std::int64_t pj = 0; pj < pf; ++pj) dst[pi * pf + pj] = src[pj];
                    }
                }
    return detail::make_op<T>(
        {patches, c, pp}, std::move(out), {x}, [b, c, t, f, pt, pf, nt, nf, pp](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t it = 0; it < nt; ++it)
                        for (std::int64_t jf = 0; jf < nf; ++jf) {
                            const std::int64_t p = (bi * nt + it) * nf + jf;
                            const T* g = self.grad.data() + (p * c + ci) * pp;
                            for (std::int64_t pi = 0; pi < pt; ++pi) {
                                T* dst = acc.data() + ((bi * c + ci) * t + it * pt + pi) * f + jf * pf;
                                for (std::int64_t pj = 0; pj < pf; ++pj) dst[pj] += g[pi * pf + pj];
                            }
                        }
        });
}

template <typename T>
TensorT<T> fold_patches(const TensorT<T>& y, std::int64_t b, std::int64_t c, std::int64_t t,
                        std::int64_t f, std::int64_t pt, std::int64_t pf) {
    if (y.ndim() != 3) throw ShapeError("fold_patches: input must be (patches, C, P_T*P_F)");
    if (t % pt != 0 || f % pf != 0)
        throw ConfigError("fold_patches: extents not divisible by patch sizes");
    const std::int64_t nt = t / pt, nf = f / pf, pp = pt * pf;
    if (y.dim(0) != b * nt * nf || y.dim(1) != c || y.dim(2) != pp)
        throw ShapeError("fold_patches: input " + shape_str(y.shape()) +
                         " inconsistent with target (" + std::to_string(b) + "," +
                         std::to_string(c) + "," + std::to_string(t) + "," + std::to_string(f) +
                         ") and patches (" + std::to_string(pt) + "," + std::to_string(pf) + ")");
    std::vector<T> out(static_cast<std::size_t>(b * c * t * f));
    const T* py = y.data();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t it = 0; it < nt; ++it)
                for (std::int64_t jf = 0; jf < nf; ++jf) {
                    const std::int64_t p = (bi * nt + it) * nf + jf;
                    const T* src = py + (p * c + ci) * pp;
                    for (std::int64_t pi = 0; pi < pt; ++pi) {
                        T* dst = out.data() + ((bi * c + ci) * t + it * pt + pi) * f + jf * pf;
                        for (std::int64_t pj = 0; pj < pf; ++pj) dst[pj] = src[pi * pf + pj];
                    }
                }
    return detail::make_op<T>(
        {b, c, t, f}, std::move(out), {y}, [b, c, t, f, pt, pf, nt, nf, pp](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t ci = 0; ci < c; ++ci)
                    for (std::int64_t it = 0; it < nt; ++it)
                        for (std::int64_t jf = 0; jf < nf; ++jf) {
                            const std::int64_t p = (bi * nt + it) * nf + jf;
                            T* dst = acc.data() + (p * c + ci) * pp;
                            for (std::int64_t pi = 0; pi < pt; ++pi) {
                                const T* g = self.grad.data() + ((bi * c + ci) * t + it * pt + pi) * f + jf * pf;
                                for (std::int64_t pj = 0; pj < pf; ++pj) dst[pi * pf + pj] += g[pj];
                            }
                        }
        });
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNorm2dLayer<T> bn;
    std::int64_t pool_h = 1, pool_w = 1;
    PoolMode pool_mode = PoolMode::Max;

    void init(std::int64_t cin, std::int64_t cout, std::int64_t ph, std::int64_t pw, PoolMode mode,
              CounterRng& rng) {
        conv.init(cin, cout, 3, 3, 1, 1, rng);
        bn.init(cout, rng);
        pool_h = ph;
        pool_w = pw;
        pool_mode = mode;
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) {
        TensorT<T> y = relu(bn.forward(conv.forward(x), training));
        if (pool_h == 1 && pool_w == 1) return y;
        return pool_mode == PoolMode::Max ? max_pool2d(y, pool_h, pool_w)
                                          : avg_pool2d(y, pool_h, pool_w);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        conv.collect(prefix + ".conv", out);
        bn.collect(prefix + ".bn", out);
    }
};

// Three conv blocks, 64 filters each, pooling kernels (5,2),(1,2),(1,1) at
// the front placement or the reverse order at the middle placement. Both
// reduce (T, F) to (T/5, F/4).
template <typename T>
struct ConvEncoder {
    std::vector<ConvBlock<T>> blocks;

    void init(const ModelConfig& cfg, CounterRng& rng) {
        const std::int64_t cin0 = cfg.variant == Variant::Dca ? 1 : cfg.input_channels;
        std::vector<std::pair<std::int64_t, std::int64_t>> kernels = {{5, 2}, {1, 2}, {1, 1}};
        if (cfg.pooling == PoolingPlacement::Middle)
            kernels = {{1, 1}, {1, 2}, {5, 2}};
        blocks.resize(3);
        blocks[0].init(cin0, cfg.conv_filters, kernels[0].first, kernels[0].second, cfg.pool_mode, rng);
        blocks[1].init(cfg.conv_filters, cfg.conv_filters, kernels[1].first, kernels[1].second,
                       cfg.pool_mode, rng);
        blocks[2].init(cfg.conv_filters, cfg.conv_filters, kernels[2].first, kernels[2].second,
                       cfg.pool_mode, rng);
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) {
        if (x.dim(2) % 5 != 0)
            throw ConfigError("encoder: T extent " + std::to_string(x.dim(2)) +
                              " not divisible by the total time pooling factor 5");
        if (x.dim(3) % 4 != 0)
            throw ConfigError("encoder: F extent " + std::to_string(x.dim(3)) +
                              " not divisible by the total frequency pooling factor 4");
        TensorT<T> y = x;
        for (auto& b : blocks) y = b.forward(y, training);
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    }
};

// ---------------------------------------------------------------------------
// CST block pieces
// ---------------------------------------------------------------------------

// Local perception unit: x + depthwise 3x3 conv(x).
template <typename T>
struct Lpu {
    DepthwiseConv2dLayer<T> dw;

    void init(std::int64_t channels, CounterRng& rng) { dw.init(channels, 3, 3, 1, 1, rng); }

    TensorT<T> forward(const TensorT<T>& x) { return add(x, dw.forward(x)); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        dw.collect(prefix + ".dw", out);
    }
};

// Inverted residual FFN: 1x1 expansion (ratio 4) -> BN -> GELU ->
// depthwise 3x3 with inner residual (BN after the conv) -> GELU ->
// 1x1 projection -> BN, added to the input through the outer residual.
template <typename T>
struct Irffn {
    Conv2dLayer<T> up;
    BatchNorm2dLayer<T> bn_up;
    DepthwiseConv2dLayer<T> dw;
    BatchNorm2dLayer<T> bn_dw;
    Conv2dLayer<T> down;
    BatchNorm2dLayer<T> bn_down;
    DropoutLayer<T> drop;

    void init(std::int64_t channels, double dropout_rate, std::uint64_t seed, std::uint64_t stream,
              CounterRng& rng) {
        const std::int64_t hidden = channels * 4;
        up.init(channels, hidden, 1, 1, 1, 0, rng);
        bn_up.init(hidden, rng);
        dw.init(hidden, 3, 3, 1, 1, rng);
        bn_dw.init(hidden, rng);
        down.init(hidden, channels, 1, 1, 1, 0, rng);
        bn_down.init(channels, rng);
        drop.init(dropout_rate, seed, stream);
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) {
        TensorT<T> h = gelu(bn_up.forward(up.forward(x), training));
        h = gelu(add(h, bn_dw.forward(dw.forward(h), training)));
        TensorT<T> y = bn_down.forward(down.forward(h), training);
        return add(x, drop.forward(y, training));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        up.collect(prefix + ".up", out);
        bn_up.collect(prefix + ".bn_up", out);
        dw.collect(prefix + ".dw", out);
        bn_dw.collect(prefix + ".bn_dw", out);
        down.collect(prefix + ".down", out);
        bn_down.collect(prefix + ".bn_down", out);
    }
};

// Channel -> spectral -> temporal attention, applied sequentially; each step
// is layer-norm -> MHSA over that domain's sequence axis -> dropout ->
// residual add. The channel step depends on the variant; dst skips it.
template <typename T>
struct CstAttention {
    Variant variant = Variant::Dst;
    std::int64_t patch_t = 0, patch_f = 0;
    LayerNormLayer<T> ln_c, ln_s, ln_t;
    MultiheadSelfAttention<T> c_mhsa, s_mhsa, t_mhsa;
    DropoutLayer<T> drop_c, drop_s, drop_t;
    Shape last_channel_attn_shape;  // diagnostics: input shape seen by c_mhsa

    void init(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t stream_base,
              CounterRng& rng) {
        variant = cfg.variant;
        patch_t = cfg.patch_t;
        patch_f = cfg.patch_f;
        const std::int64_t c = cfg.conv_filters;
        if (variant == Variant::Ule) {
            const std::int64_t pp = cfg.patch_t * cfg.patch_f;
            ln_c.init(pp, rng);
            c_mhsa.init(pp, cfg.heads, cfg.dropout, seed, stream_base + 0, rng);
        } else if (variant == Variant::Dca) {
            ln_c.init(c, rng);
            c_mhsa.init(c, cfg.heads, cfg.dropout, seed, stream_base + 0, rng);
        }
        ln_s.init(c, rng);
        s_mhsa.init(c, cfg.heads, cfg.dropout, seed, stream_base + 1, rng);
        ln_t.init(c, rng);
        t_mhsa.init(c, cfg.heads, cfg.dropout, seed, stream_base + 2, rng);
        drop_c.init(cfg.dropout, seed, stream_base + 3);
        drop_s.init(cfg.dropout, seed, stream_base + 4);
        drop_t.init(cfg.dropout, seed, stream_base + 5);
    }

    void reseed(std::uint64_t seed, std::uint64_t stream_base) {
        if (variant != Variant::Dst) {
            c_mhsa.attn_drop.reseed(seed, stream_base + 0);
        }
        s_mhsa.attn_drop.reseed(seed, stream_base + 1);
        t_mhsa.attn_drop.reseed(seed, stream_base + 2);
        drop_c.reseed(seed, stream_base + 3);
        drop_s.reseed(seed, stream_base + 4);
        drop_t.reseed(seed, stream_base + 5);
    }

    // x: (B*m, C, T, F) where m > 1 only for dca before its channel attention
    // has run. Returns (B, C, T, F); m is consumed by the dca mean reduction.
    TensorT<T> forward(const TensorT<T>& x, std::int64_t m, bool training) {
        const std::int64_t bm = x.dim(0), c = x.dim(1), t = x.dim(2), f = x.dim(3);
        if (bm % m != 0)
            throw ShapeError("cst_attention: batch extent " + std::to_string(bm) +
                             " not divisible by channel fold " + std::to_string(m));
        const std::int64_t b = bm / m;
        TensorT<T> y = x;

        if (variant == Variant::Ule) {
            if (m != 1) throw ShapeError("cst_attention: ULE expects no channel fold");
            TensorT<T> u = unfold_patches(y, patch_t, patch_f);
            last_channel_attn_shape = u.shape();
            TensorT<T> a = drop_c.forward(c_mhsa.forward(ln_c.forward(u), training), training);
            u = add(u, a);
            y = fold_patches(u, b, c, t, f, patch_t, patch_f);
        } else if (variant == Variant::Dca) {
            // (B*m, C, T, F) -> (B, T*F, m, C): sequence = m, embedding = C
            TensorT<T> u = reshape(y, {b, m, c, t * f});
            u = permute(u, {0, 3, 1, 2});                 // (B, T*F, m, C)
            u = reshape(u, {b * t * f, m, c});
            last_channel_attn_shape = u.shape();
            TensorT<T> a = drop_c.forward(c_mhsa.forward(ln_c.forward(u), training), training);
            u = add(u, a);
            u = reshape(u, {b, t * f, m, c});
            u = mean_axis(u, 2);                          // consume m: (B, T*F, C)
            u = permute(u, {0, 2, 1});                    // (B, C, T*F)
            y = reshape(u, {b, c, t, f});
        } else if (m != 1) {
            throw ShapeError("cst_attention: DST expects no channel fold");
        }

        // spectral attention: sequence = F, batch = B*T, embedding = C
        {
            TensorT<T> u = reshape(permute(y, {0, 2, 3, 1}), {b * t, f, c});
            TensorT<T> a = drop_s.forward(s_mhsa.forward(ln_s.forward(u), training), training);
            u = add(u, a);
            y = permute(reshape(u, {b, t, f, c}), {0, 3, 1, 2});
        }
        // temporal attention: sequence = T, batch = B*F, embedding = C
        {
            TensorT<T> u = reshape(permute(y, {0, 3, 2, 1}), {b * f, t, c});
            TensorT<T> a = drop_t.forward(t_mhsa.forward(ln_t.forward(u), training), training);
            u = add(u, a);
            y = permute(reshape(u, {b, f, t, c}), {0, 3, 2, 1});
        }
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        if (variant != Variant::Dst) {
            ln_c.collect(prefix + ".ln_c", out);
            c_mhsa.collect(prefix + ".c_mhsa", out);
        }
        ln_s.collect(prefix + ".ln_s", out);
        s_mhsa.collect(prefix + ".s_mhsa", out);
        ln_t.collect(prefix + ".ln_t", out);
        t_mhsa.collect(prefix + ".t_mhsa", out);
    }
};

template <typename T>
struct CstBlock {
    bool use_cmt = true;
    Lpu<T> lpu;
    CstAttention<T> attn;
    Irffn<T> ffn;

    void init(const ModelConfig& cfg, std::uint64_t seed, std::uint64_t stream_base,
              CounterRng& rng) {
        use_cmt = cfg.use_cmt;
        if (use_cmt) lpu.init(cfg.conv_filters, rng);
        attn.init(cfg, seed, stream_base, rng);
        if (use_cmt) ffn.init(cfg.conv_filters, cfg.dropout, seed, stream_base + 6, rng);
    }

    void reseed(std::uint64_t seed, std::uint64_t stream_base) {
        attn.reseed(seed, stream_base);
        if (use_cmt) ffn.drop.reseed(seed, stream_base + 6);
    }

    TensorT<T> forward(const TensorT<T>& x, std::int64_t m, bool training) {
        TensorT<T> y = use_cmt ? lpu.forward(x) : x;
        y = attn.forward(y, m, training);
        if (use_cmt) y = ffn.forward(y, training);
        return y;
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
        if (use_cmt) lpu.collect(prefix + ".lpu", out);
        attn.collect(prefix, out);
        if (use_cmt) ffn.collect(prefix + ".irffn", out);
    }
};

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

template <typename T>
struct CstFormer {
    ModelConfig cfg;
    ConvEncoder<T> encoder;
    std::vector<CstBlock<T>> blocks;
    LinearLayer<T> fc1, fc2;
    std::uint64_t seed = 0;

    CstFormer() = default;

    explicit CstFormer(const ModelConfig& config, std::uint64_t seed_ = 1) { build(config, seed_); }

    void build(const ModelConfig& config, std::uint64_t seed_) {
        config.validate();
        cfg = config;
        seed = seed_;
        CounterRng rng(seed, /*stream=*/0xC57);
        encoder.init(cfg, rng);
        blocks.assign(static_cast<std::size_t>(cfg.n_cst_blocks), CstBlock<T>());
        for (std::int64_t i = 0; i < cfg.n_cst_blocks; ++i)
            blocks[static_cast<std::size_t>(i)].init(cfg, seed, 16 * static_cast<std::uint64_t>(i), rng);
        head_in_ = cfg.conv_filters * (cfg.freq_bins / 4);
        fc1.init(head_in_, cfg.fc_hidden, rng);
        fc2.init(cfg.fc_hidden, cfg.output_width(), rng);
    }

    // Reset every dropout stream; forward passes then reproduce masks exactly.
    void seed_dropout(std::uint64_t s) {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].reseed(s, 16 * static_cast<std::uint64_t>(i));
    }

    // features: (B, M, T, F) -> (B, T/5, n_tracks*3*n_classes)
    TensorT<T> forward(const TensorT<T>& x, bool training) {
        if (x.ndim() != 4)
            throw ShapeError("forward: expected (B,M,T,F), got " + shape_str(x.shape()));
        if (x.dim(1) != cfg.input_channels)
            throw ShapeError("forward: input channel extent " + std::to_string(x.dim(1)) +
                             " does not match configured M=" + std::to_string(cfg.input_channels));
        const std::int64_t b = x.dim(0), m = x.dim(1), t = x.dim(2), f = x.dim(3);
        TensorT<T> y = x;
        std::int64_t fold_m = 1;
        if (cfg.variant == Variant::Dca) {
            y = reshape(y, {b * m, 1, t, f});
            fold_m = m;
        }
        y = encoder.forward(y, training);
        const std::int64_t tp = y.dim(2), fp = y.dim(3);
        if (cfg.variant == Variant::Ule) {
            if (tp % cfg.patch_t != 0)
                throw ConfigError("forward: pooled T extent " + std::to_string(tp) +
                                  " not divisible by patch_t " + std::to_string(cfg.patch_t));
            if (fp % cfg.patch_f != 0)
                throw ConfigError("forward: pooled F extent " + std::to_string(fp) +
                                  " not divisible by patch_f " + std::to_string(cfg.patch_f));
        }
        if (cfg.conv_filters * fp != head_in_)
            throw ShapeError("forward: pooled feature width " +
                             std::to_string(cfg.conv_filters * fp) +
                             " does not match head input " + std::to_string(head_in_));
        for (auto& blk : blocks) {
            y = blk.forward(y, fold_m, training);
            fold_m = 1;  // dca consumes the fold in its first channel attention
        }
        // (B, C, T', F') -> (B, T', C*F') -> FC -> ReLU -> FC -> tanh
        y = reshape(permute(y, {0, 2, 1, 3}), {b, tp, head_in_});
        y = relu(fc1.forward(y));
        y = fc2.forward(y);
        return tanh_op(y);
    }

    std::vector<NamedTensor<T>> named_tensors() {
        std::vector<NamedTensor<T>> out;
        encoder.collect("encoder", out);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect("cst." + std::to_string(i), out);
        fc1.collect("head.fc1", out);
        fc2.collect("head.fc2", out);
        return out;
    }

    std::int64_t num_params() {
        auto nt = named_tensors();
        return count_trainable(nt);
    }

    const Shape& last_channel_attn_shape(std::size_t block = 0) const {
        return blocks[block].attn.last_channel_attn_shape;
    }

private:
    std::int64_t head_in_ = 0;
};

}  // namespace seld
