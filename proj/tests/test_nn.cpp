#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mmfuse/nn.hpp"
#include "support/testutil.hpp"

using mmfuse::Shape;
using mmfuse::TensorT;
using D = TensorT<double>;
namespace nn = mmfuse::nn;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("positional encoding closed form") {
    auto pe = nn::positional_encoding<double>(8, 6);
    // position 0: sines vanish, cosines are one
    for (std::size_t j = 0; j < 6; ++j) CHECK(pe.at({0, j}) == doctest::Approx(j % 2 ? 1.0 : 0.0));
    CHECK(pe.at({1, 0}) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));

    auto pe4 = nn::positional_encoding<double>(4, 4);
    const double expected = std::sin(3.0 / std::pow(10000.0, 2.0 * 1.0 / 4.0));
    CHECK(pe4.at({3, 2}) == doctest::Approx(expected).epsilon(1e-12));

    CHECK_THROWS_AS(nn::positional_encoding<double>(4, 5), mmfuse::ConfigError);
}

TEST_CASE("positional encoding entries stay within [-1, 1]") {
    auto pe = nn::positional_encoding<double>(64, 32);
    for (double v : pe.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_FALSE(pe.requires_grad());
}

TEST_CASE("attention with a single key returns the value exactly") {
    std::mt19937 rng(3);
    auto q = random_tensor<double>({4, 3}, rng);
    auto k = random_tensor<double>({1, 3}, rng);
    auto v = random_tensor<double>({1, 5}, rng);
    auto out = nn::attention(q, k, v);
    CHECK(out.shape() == Shape{4, 5});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(out.at({i, j}) == doctest::Approx(v.at({0, j})).epsilon(1e-14));

    auto w = nn::attention_weights(q, k);
    for (double x : w.values()) CHECK(x == doctest::Approx(1.0));
}

TEST_CASE("identical keys give uniform attention weights") {
    std::mt19937 rng(4);
    auto q = random_tensor<double>({2, 3}, rng);
    std::vector<double> krow = {0.3, -1.2, 0.8};
    std::vector<double> kdata;
    for (int i = 0; i < 5; ++i) kdata.insert(kdata.end(), krow.begin(), krow.end());
    D k({5, 3}, kdata);
    auto w = nn::attention_weights(q, k);
    for (double x : w.values()) CHECK(x == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("two-key attention weight by scalar arithmetic") {
    D q({1, 2}, {1, 0});
    D k({2, 2}, {1, 0, 0, 1});
    auto w = nn::attention_weights(q, k);
    const double s = 1.0 / std::sqrt(2.0);
    const double expected = std::exp(s) / (std::exp(s) + 1.0);
    CHECK(w.at({0, 0}) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(w.at({0, 0}) == doctest::Approx(0.6698).epsilon(1e-4));
}

TEST_CASE("attention weight rows sum to one") {
    std::mt19937 rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        auto q = random_tensor<float>({2, 6, 4}, rng, -5, 5);
        auto k = random_tensor<float>({2, 6, 4}, rng, -5, 5);
        auto w = nn::attention_weights(q, k);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 6; ++i) {
                float sum = 0;
                for (std::size_t j = 0; j < 6; ++j) {
                    float x = w.at({b, i, j});
                    CHECK(x >= 0.0f);
                    CHECK(x <= 1.0f);
                    sum += x;
                }
                CHECK(std::abs(sum - 1.0f) < 1e-6f);
            }
    }
}

TEST_CASE("single-head attention equals composed projections") {
    std::mt19937 rng(6);
    auto p = nn::make_encoder_layer<double>(8, 1, 32, rng);
    auto x = random_tensor<double>({2, 5, 8}, rng);
    auto composed = nn::linear(
        nn::attention(nn::linear(x, p.wq), nn::linear(x, p.wk), nn::linear(x, p.wv)), p.wo);
    auto mha = nn::multi_head_attention(x, p);
    CHECK(mha.values() == composed.values());
}

TEST_CASE("multi-head attention preserves shape") {
    std::mt19937 rng(7);
    auto p = nn::make_encoder_layer<double>(8, 2, 32, rng);
    auto x = random_tensor<double>({2, 5, 8}, rng);
    CHECK(nn::multi_head_attention(x, p).shape() == Shape{2, 5, 8});
}

TEST_CASE("permuting head blocks and output rows leaves attention unchanged") {
    std::mt19937 rng(8);
    auto p = nn::make_encoder_layer<double>(8, 2, 32, rng);
    auto x = random_tensor<double>({2, 5, 8}, rng);
    auto base = nn::multi_head_attention(x, p);

    const std::size_t d = 8, dk = 4;
    auto swap_cols = [&](TensorT<double>& w) {
        auto& v = w.values();
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t j = 0; j < dk; ++j) std::swap(v[r * d + j], v[r * d + dk + j]);
    };
    auto swap_vec = [&](TensorT<double>& b) {
        auto& v = b.values();
        for (std::size_t j = 0; j < dk; ++j) std::swap(v[j], v[dk + j]);
    };
    swap_cols(p.wq.weight);
    swap_vec(p.wq.bias);
    swap_cols(p.wk.weight);
    swap_vec(p.wk.bias);
    swap_cols(p.wv.weight);
    swap_vec(p.wv.bias);
    {  // rows of the output projection move with their head block
        auto& v = p.wo.weight.values();
        for (std::size_t r = 0; r < dk; ++r)
            for (std::size_t c = 0; c < d; ++c) std::swap(v[r * d + c], v[(r + dk) * d + c]);
    }
    auto permuted = nn::multi_head_attention(x, p);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(std::abs(base.values()[i] - permuted.values()[i]) < 1e-6);
}

TEST_CASE("layer norm normalizes each row") {
    std::mt19937 rng(9);
    auto x = random_tensor<double>({4, 16}, rng, -3, 3);
    auto gain = TensorT<double>::ones({16});
    auto shift = TensorT<double>::zeros({16});
    auto y = nn::layer_norm(x, gain, shift);
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 16; ++j) mean += y.at({r, j});
        mean /= 16;
        for (std::size_t j = 0; j < 16; ++j) {
            const double d = y.at({r, j}) - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("layer norm gradients match finite differences") {
    std::mt19937 rng(10);
    auto x = random_tensor<double>({3, 6}, rng, -2, 2, true);
    auto gain = random_tensor<double>({6}, rng, 0.5, 1.5, true);
    auto shift = random_tensor<double>({6}, rng, -0.5, 0.5, true);
    double err = grad_check({&x, &gain, &shift},
                            [&] { return mmfuse::sum_all(mmfuse::gelu(nn::layer_norm(x, gain, shift))); });
    CHECK(err < 1e-4);
}

TEST_CASE("zeroed residual branches make the encoder layer an identity") {
    std::mt19937 rng(11);
    auto p = nn::make_encoder_layer<double>(8, 2, 32, rng);
    std::fill(p.wo.weight.values().begin(), p.wo.weight.values().end(), 0.0);
    std::fill(p.wo.bias.values().begin(), p.wo.bias.values().end(), 0.0);
    std::fill(p.ff2.weight.values().begin(), p.ff2.weight.values().end(), 0.0);
    std::fill(p.ff2.bias.values().begin(), p.ff2.bias.values().end(), 0.0);
    auto x = random_tensor<double>({2, 5, 8}, rng);
    auto y = nn::encoder_layer(x, p);
    CHECK(y.values() == x.values());
}

TEST_CASE("gradient through a one-layer encoder matches finite differences") {
    std::mt19937 rng(12);
    auto p = nn::make_encoder_layer<double>(4, 2, 8, rng);
    auto x = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    std::vector<TensorT<double>*> leaves = {&x,
                                            &p.wq.weight, &p.wq.bias, &p.wk.weight, &p.wk.bias,
                                            &p.wv.weight, &p.wv.bias, &p.wo.weight, &p.wo.bias,
                                            &p.ff1.weight, &p.ff1.bias, &p.ff2.weight, &p.ff2.bias,
                                            &p.ln1_gain, &p.ln1_shift, &p.ln2_gain, &p.ln2_shift};
    double err = grad_check(leaves, [&] { return mmfuse::sum_all(mmfuse::softmax_lastdim(nn::encoder_layer(x, p))); });
    CHECK(err < 1e-3);
}

TEST_CASE("one-layer stack equals the layer, layer counts multiply") {
    std::mt19937 rng(13);
    auto p = nn::make_encoder_layer<double>(8, 2, 32, rng);
    auto x = random_tensor<double>({1, 4, 8}, rng);
    CHECK(nn::encoder_stack(x, {p}).values() == nn::encoder_layer(x, p).values());

    std::vector<nn::EncoderLayerParamsT<double>> layers;
    for (int i = 0; i < 3; ++i) layers.push_back(nn::make_encoder_layer<double>(8, 2, 32, rng));
    std::size_t total = 0;
    for (const auto& l : layers) total += nn::parameter_count(l);
    CHECK(total == 3 * nn::parameter_count(layers[0]));

    CHECK_THROWS_AS(nn::encoder_stack(x, std::vector<nn::EncoderLayerParamsT<double>>{}), mmfuse::ConfigError);
}

TEST_CASE("encoder stacks are deterministic under a fixed seed") {
    auto run = [] {
        std::mt19937 rng(21);
        std::vector<nn::EncoderLayerParamsT<float>> layers;
        for (int i = 0; i < 2; ++i) layers.push_back(nn::make_encoder_layer<float>(8, 2, 32, rng));
        auto x = random_tensor<float>({2, 5, 8}, rng);
        return nn::encoder_stack(x, layers).values();
    };
    CHECK(run() == run());
}

TEST_CASE("bad head counts are rejected") {
    std::mt19937 rng(14);
    CHECK_THROWS_AS(nn::make_encoder_layer<double>(8, 3, 32, rng), mmfuse::ConfigError);
    CHECK_THROWS_AS(nn::make_encoder_layer<double>(8, 0, 32, rng), mmfuse::ConfigError);
}

TEST_CASE("end-to-end gradient check on a two-layer two-head stack") {
    std::mt19937 rng(15);
    std::vector<nn::EncoderLayerParamsT<double>> layers;
    for (int i = 0; i < 2; ++i) layers.push_back(nn::make_encoder_layer<double>(8, 2, 16, rng));
    auto x = random_tensor<double>({1, 3, 8}, rng, -1, 1, true);
    std::vector<TensorT<double>*> leaves = {&x};
    for (auto& l : layers) {
        leaves.push_back(&l.wq.weight);
        leaves.push_back(&l.wv.weight);
        leaves.push_back(&l.ff1.weight);
        leaves.push_back(&l.ln1_gain);
    }
    double err = grad_check(leaves, [&] { return mmfuse::sum_all(mmfuse::softmax_lastdim(nn::encoder_stack(x, layers))); });
    CHECK(err < 1e-3);
}
