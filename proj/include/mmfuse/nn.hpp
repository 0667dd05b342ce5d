#pragma once

// Transformer encoder building blocks: linear layers, last-axis layer
// normalization, sinusoidal position tables, scaled dot-product
// multi-head self-attention and the pre-norm encoder layer/stack.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse::nn {

template <typename S>
struct LinearParamsT {
    TensorT<S> weight;  // [in, out]
    TensorT<S> bias;    // [out]

    std::size_t in_dim() const { return weight.extent(0); }
    std::size_t out_dim() const { return weight.extent(1); }
};

// Xavier-uniform weight, zero bias.
template <typename S>
LinearParamsT<S> make_linear(std::size_t in, std::size_t out, std::mt19937& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    return {TensorT<S>::uniform({in, out}, rng, static_cast<S>(-limit), static_cast<S>(limit), true),
            TensorT<S>::zeros({out}, true)};
}

// Identity weight, zero bias; starts as a no-op and stays trainable.
template <typename S>
LinearParamsT<S> make_identity_linear(std::size_t dim) {
    std::vector<S> w(dim * dim, S(0));
    for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = S(1);
    return {TensorT<S>({dim, dim}, std::move(w), true), TensorT<S>::zeros({dim}, true)};
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const LinearParamsT<S>& p) {
    return add_bias(matmul(x, p.weight), p.bias);
}

// ==================== layer normalization ====================

// Normalizes each last-axis slice to zero mean / unit variance, then
// applies the learned gain and shift.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& shift,
                      double eps = 1e-5) {
    const std::size_t width = x.shape().back();
    if (gain.rank() != 1 || gain.shape()[0] != width || shift.rank() != 1 || shift.shape()[0] != width)
        throw DimensionError("layer_norm: gain/shift must span the last axis of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / width;

    std::vector<S> out(x.size());
    auto normalized = std::make_shared<std::vector<S>>(x.size());
    auto inv_std = std::make_shared<std::vector<S>>(rows);
    const S* px = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = px + r * width;
        S mean = S(0);
        for (std::size_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<S>(width);
        S var = S(0);
        for (std::size_t j = 0; j < width; ++j) {
            const S d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(width);
        const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
        (*inv_std)[r] = istd;
        for (std::size_t j = 0; j < width; ++j) {
            const S n = (row[j] - mean) * istd;
            (*normalized)[r * width + j] = n;
            out[r * width + j] = n * gain.values()[j] + shift.values()[j];
        }
    }

    const bool track = TapeT<S>::recording() &&
                       (x.requires_grad() || gain.requires_grad() || shift.requires_grad());
    TensorT<S> result = TensorT<S>::tracked(x.shape(), std::move(out), track);
    detail::audit_output(result, "layer_norm");
    if (track) {
        auto gx = x.grad_store();
        auto gg = gain.grad_store();
        auto gs = shift.grad_store();
        auto dgain = gain.data_ptr();
        auto gout = result.grad_store();
        TapeT<S>::active()->record("layer_norm", [=](BackwardPassT<S>& ctx) {
            const std::vector<S>& g = gout->value;
            const std::vector<S>& nrm = *normalized;
            if (gg) {
                std::vector<S>& dst = ctx.sink(gg);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < width; ++j) dst[j] += g[r * width + j] * nrm[r * width + j];
            }
            if (gs) {
                std::vector<S>& dst = ctx.sink(gs);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < width; ++j) dst[j] += g[r * width + j];
            }
            if (gx) {
                std::vector<S>& dst = ctx.sink(gx);
                const std::vector<S>& gv = *dgain;
                for (std::size_t r = 0; r < rows; ++r) {
                    const S istd = (*inv_std)[r];
                    // dnorm = g * gain; dx = istd * (dnorm - mean(dnorm) - n * mean(dnorm * n))
                    S mean_dn = S(0), mean_dnn = S(0);
                    for (std::size_t j = 0; j < width; ++j) {
                        const S dn = g[r * width + j] * gv[j];
                        mean_dn += dn;
                        mean_dnn += dn * nrm[r * width + j];
                    }
                    mean_dn /= static_cast<S>(width);
                    mean_dnn /= static_cast<S>(width);
                    for (std::size_t j = 0; j < width; ++j) {
                        const S dn = g[r * width + j] * gv[j];
                        dst[r * width + j] += istd * (dn - mean_dn - nrm[r * width + j] * mean_dnn);
                    }
                }
            }
        });
    }
    return result;
}

// ==================== positional encoding ====================

// Interleaved sine/cosine table of any width; column pair (2i, 2i+1)
// oscillates at 10000^(-2i/width). Constant, never trainable.
template <typename S>
TensorT<S> sinusoid_table(std::size_t positions, std::size_t width) {
    if (positions < 1 || width < 1) throw ConfigError("sinusoid_table: counts must be >= 1");
    std::vector<S> v(positions * width);
    for (std::size_t pos = 0; pos < positions; ++pos) {
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t pair = j / 2;
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(width));
            v[pos * width + j] = static_cast<S>((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return TensorT<S>({positions, width}, std::move(v));
}

template <typename S>
TensorT<S> positional_encoding(std::size_t seq_len, std::size_t d_model) {
    if (d_model % 2 != 0)
        throw ConfigError("positional_encoding: d_model must be even, got " + std::to_string(d_model));
    return sinusoid_table<S>(seq_len, d_model);
}

// ==================== attention ====================

// softmax(q k^T / sqrt(d_k)) v over the last two axes.
template <typename S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
    if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2)
        throw DimensionError("attention: operands must have rank >= 2");
    const std::size_t dk = q.shape().back();
    if (k.shape().back() != dk)
        throw DimensionError("attention: query width " + std::to_string(dk) + " != key width " +
                             std::to_string(k.shape().back()));
    if (v.shape()[v.rank() - 2] != k.shape()[k.rank() - 2])
        throw DimensionError("attention: key and value sequence lengths differ");
    auto scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    return matmul(softmax_lastdim(scores), v);
}

// The attention weights alone; evaluation/property-check helper.
template <typename S>
TensorT<S> attention_weights(const TensorT<S>& q, const TensorT<S>& k) {
    const std::size_t dk = q.shape().back();
    auto scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    return softmax_lastdim(scores);
}

// ==================== encoder layer ====================

template <typename S>
struct EncoderLayerParamsT {
    LinearParamsT<S> wq, wk, wv, wo;
    LinearParamsT<S> ff1, ff2;
    TensorT<S> ln1_gain, ln1_shift, ln2_gain, ln2_shift;
    std::size_t heads = 1;
    std::size_t d_model = 0;

    std::size_t head_dim() const { return d_model / heads; }
};

template <typename S>
EncoderLayerParamsT<S> make_encoder_layer(std::size_t d_model, std::size_t heads, std::size_t ff_dim,
                                          std::mt19937& rng) {
    if (heads == 0 || d_model == 0 || d_model % heads != 0)
        throw ConfigError("encoder layer: model width " + std::to_string(d_model) +
                          " not divisible into " + std::to_string(heads) + " heads");
    EncoderLayerParamsT<S> p;
    p.wq = make_linear<S>(d_model, d_model, rng);
    p.wk = make_linear<S>(d_model, d_model, rng);
    p.wv = make_linear<S>(d_model, d_model, rng);
    p.wo = make_linear<S>(d_model, d_model, rng);
    p.ff1 = make_linear<S>(d_model, ff_dim, rng);
    p.ff2 = make_linear<S>(ff_dim, d_model, rng);
    p.ln1_gain = TensorT<S>::ones({d_model}, true);
    p.ln1_shift = TensorT<S>::zeros({d_model}, true);
    p.ln2_gain = TensorT<S>::ones({d_model}, true);
    p.ln2_shift = TensorT<S>::zeros({d_model}, true);
    p.heads = heads;
    p.d_model = d_model;
    return p;
}

// Projects to Q/K/V, runs per-head attention on last-axis slices,
// concatenates the heads and projects the result.
template <typename S>
TensorT<S> multi_head_attention(const TensorT<S>& h_in, const EncoderLayerParamsT<S>& p) {
    if (h_in.shape().back() != p.d_model)
        throw DimensionError("multi_head_attention: input width " + std::to_string(h_in.shape().back()) +
                             " != model width " + std::to_string(p.d_model));
    auto q = linear(h_in, p.wq);
    auto k = linear(h_in, p.wk);
    auto v = linear(h_in, p.wv);
    const std::size_t dk = p.head_dim();
    std::vector<TensorT<S>> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto qh = slice_axis(q, q.rank() - 1, h * dk, dk);
        auto kh = slice_axis(k, k.rank() - 1, h * dk, dk);
        auto vh = slice_axis(v, v.rank() - 1, h * dk, dk);
        heads.push_back(attention(qh, kh, vh));
    }
    auto merged = p.heads == 1 ? heads[0] : concat_axis(heads, heads[0].rank() - 1);
    return linear(merged, p.wo);
}

// Pre-norm residual wiring: x + MHSA(LN(x)), then y + FFN(LN(y)) with
// FFN = linear -> gelu -> linear.
template <typename S>
TensorT<S> encoder_layer(const TensorT<S>& h_in, const EncoderLayerParamsT<S>& p) {
    auto attn_in = layer_norm(h_in, p.ln1_gain, p.ln1_shift);
    auto h = add(h_in, multi_head_attention(attn_in, p));
    auto ff_in = layer_norm(h, p.ln2_gain, p.ln2_shift);
    auto ff = linear(gelu(linear(ff_in, p.ff1)), p.ff2);
    return add(h, ff);
}

template <typename S>
TensorT<S> encoder_stack(const TensorT<S>& h_in, const std::vector<EncoderLayerParamsT<S>>& layers) {
    if (layers.empty()) throw ConfigError("encoder_stack: no layers");
    TensorT<S> h = h_in;
    for (const auto& layer : layers) h = encoder_layer(h, layer);
    return h;
}

template <typename S>
std::size_t parameter_count(const EncoderLayerParamsT<S>& p) {
    return p.wq.weight.size() + p.wq.bias.size() + p.wk.weight.size() + p.wk.bias.size() +
           p.wv.weight.size() + p.wv.bias.size() + p.wo.weight.size() + p.wo.bias.size() +
           p.ff1.weight.size() + p.ff1.bias.size() + p.ff2.weight.size() + p.ff2.bias.size() +
           p.ln1_gain.size() + p.ln1_shift.size() + p.ln2_gain.size() + p.ln2_shift.size();
}

}  // namespace mmfuse::nn
