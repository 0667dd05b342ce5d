#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmfuse/tensor.hpp"
#include "support/testutil.hpp"

using mmfuse::Shape;
using mmfuse::TensorT;
using D = TensorT<double>;
using F = TensorT<float>;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("matmul identity and hand arithmetic") {
    D eye({2, 2}, {1, 0, 0, 1});
    D a({2, 2}, {1, 2, 3, 4});
    auto r = mmfuse::matmul(eye, a);
    CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

    D row({1, 2}, {1, 2});
    D col({2, 1}, {3, 4});
    CHECK(mmfuse::matmul(row, col).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul batched against per-slice products") {
    std::mt19937 rng(11);
    auto a = random_tensor<double>({3, 2, 4}, rng);
    auto b = random_tensor<double>({3, 4, 5}, rng);
    auto full = mmfuse::matmul(a, b);
    for (std::size_t s = 0; s < 3; ++s) {
        D as({2, 4}, std::vector<double>(a.values().begin() + s * 8, a.values().begin() + (s + 1) * 8));
        D bs({4, 5}, std::vector<double>(b.values().begin() + s * 20, b.values().begin() + (s + 1) * 20));
        auto part = mmfuse::matmul(as, bs);
        for (std::size_t i = 0; i < 10; ++i)
            CHECK(full.values()[s * 10 + i] == doctest::Approx(part.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape errors name both shapes") {
    D a({2, 3}, std::vector<double>(6, 1.0));
    D b({4, 2}, std::vector<double>(8, 1.0));
    try {
        mmfuse::matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const mmfuse::DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    std::mt19937 rng(42);
    auto a = random_tensor<double>({3, 3}, rng, -2, 2, true);
    auto b = random_tensor<double>({3, 3}, rng, -2, 2, true);
    double err = grad_check({&a, &b}, [&] { return mmfuse::sum_all(mmfuse::matmul(a, b)); });
    CHECK(err < 1e-4);
}

TEST_CASE("matmul broadcast gradients match finite differences") {
    std::mt19937 rng(43);
    auto a = random_tensor<double>({2, 3, 4}, rng, -2, 2, true);
    auto w = random_tensor<double>({4, 5}, rng, -2, 2, true);
    double err = grad_check({&a, &w}, [&] { return mmfuse::sum_all(mmfuse::matmul(a, w)); });
    CHECK(err < 1e-4);

    auto lhs2 = random_tensor<double>({3, 4}, rng, -2, 2, true);
    auto rhs3 = random_tensor<double>({2, 4, 5}, rng, -2, 2, true);
    err = grad_check({&lhs2, &rhs3}, [&] { return mmfuse::sum_all(mmfuse::matmul(lhs2, rhs3)); });
    CHECK(err < 1e-4);
}

TEST_CASE("softmax symmetry and overflow stability") {
    D x({2}, {0, 0});
    auto p = mmfuse::softmax_lastdim(x);
    CHECK(p.values()[0] == doctest::Approx(0.5).epsilon(1e-12));

    D big({2}, {1000, 0});
    auto pb = mmfuse::softmax_lastdim(big);
    CHECK(std::abs(pb.values()[0] - 1.0) < 1e-12);
    CHECK(std::abs(pb.values()[1]) < 1e-12);
}

TEST_CASE("softmax rows sum to one and stay nonnegative") {
    std::mt19937 rng(7);
    for (int it = 0; it < 50; ++it) {
        auto x = random_tensor<float>({4, 6}, rng, -30, 30);
        auto p = mmfuse::softmax_lastdim(x);
        for (std::size_t r = 0; r < 4; ++r) {
            float sum = 0;
            for (std::size_t j = 0; j < 6; ++j) {
                float v = p.at({r, j});
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0f) < 1e-6f);
        }
    }
}

TEST_CASE("softmax Jacobian matches finite differences") {
    // One finite-difference check per output component.
    for (std::size_t out = 0; out < 3; ++out) {
        D x({3}, {0.3, -0.7, 1.1}, true);
        std::vector<double> pick(3, 0.0);
        pick[out] = 1.0;
        D sel({3}, pick);
        double err = grad_check({&x}, [&] { return mmfuse::sum_all(mmfuse::mul(mmfuse::softmax_lastdim(x), sel)); });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("elementwise hand values") {
    D a({2}, {1, 2});
    D b({2}, {3, 4});
    CHECK(mmfuse::add(a, b).values() == std::vector<double>{4, 6});
    CHECK(mmfuse::sub(b, a).values() == std::vector<double>{2, 2});
    CHECK(mmfuse::mul(a, b).values() == std::vector<double>{3, 8});
    CHECK(mmfuse::scale(a, 2.5).values() == std::vector<double>{2.5, 5});

    D m({2, 2}, {2, 4, 6, 8});
    CHECK(mmfuse::mean_axis(m, 0).values() == std::vector<double>{4, 6});
    CHECK(mmfuse::mean_axis(m, 1).values() == std::vector<double>{3, 7});
}

TEST_CASE("elementwise shape mismatch raises dimension error") {
    D a({2}, {1, 2});
    D b({3}, {1, 2, 3});
    CHECK_THROWS_AS(mmfuse::add(a, b), mmfuse::DimensionError);
    CHECK_THROWS_AS(mmfuse::mul(a, b), mmfuse::DimensionError);
}

TEST_CASE("gelu gradient at half matches finite differences") {
    D x({1}, {0.5}, true);
    double err = grad_check({&x}, [&] { return mmfuse::sum_all(mmfuse::gelu(x)); });
    CHECK(err < 1e-4);
}

TEST_CASE("every differentiable primitive passes a finite-difference sweep") {
    std::mt19937 rng(123);
    auto scalar_wrap = [](TensorT<double> t) { return mmfuse::sum_all(std::move(t)); };

    for (int rep = 0; rep < 3; ++rep) {
        auto a = random_tensor<double>({2, 3}, rng, -2, 2, true);
        auto b = random_tensor<double>({2, 3}, rng, -2, 2, true);
        CHECK(grad_check({&a, &b}, [&] { return scalar_wrap(mmfuse::add(a, b)); }) < 1e-4);
        CHECK(grad_check({&a, &b}, [&] { return scalar_wrap(mmfuse::sub(a, b)); }) < 1e-4);
        CHECK(grad_check({&a, &b}, [&] { return scalar_wrap(mmfuse::mul(a, b)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::scale(a, -1.7)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::mean_axis(a, 1)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::transpose_last2(a)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::reshape(a, {6})); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::repeat0(a, 3)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::slice_axis(a, 1, 1, 2)); }) < 1e-4);
        CHECK(grad_check({&a, &b}, [&] {
                  return scalar_wrap(mmfuse::concat_axis({a, b}, 0));
              }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::softmax_lastdim(a)); }) < 1e-4);
        CHECK(grad_check({&a}, [&] { return scalar_wrap(mmfuse::gelu(a)); }) < 1e-4);

        auto bias = random_tensor<double>({3}, rng, -2, 2, true);
        CHECK(grad_check({&a, &bias}, [&] { return scalar_wrap(mmfuse::add_bias(a, bias)); }) < 1e-4);

        // kink-sensitive ops need inputs away from their kinks
        auto pos = random_tensor<double>({2, 3}, rng, 0.1, 2.0, true);
        CHECK(grad_check({&pos}, [&] { return scalar_wrap(mmfuse::log_eps(pos)); }) < 1e-4);
        auto off = random_tensor<double>({2, 3}, rng, 0.01, 2.0, true);
        for (auto& v : off.values())
            if (rng() & 1) v = -v;
        CHECK(grad_check({&off}, [&] { return scalar_wrap(mmfuse::relu(off)); }) < 1e-4);
    }
}

TEST_CASE("rearrangement hand cases") {
    D x({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = mmfuse::transpose_last2(x);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 0}) == 1);
    CHECK(t.at({0, 1}) == 4);
    CHECK(t.at({2, 1}) == 6);

    D one({1, 1}, {1});
    D two({1, 1}, {2});
    auto c = mmfuse::concat_axis({one, two}, 1);
    CHECK(c.shape() == Shape{1, 2});
    CHECK(c.values() == std::vector<double>{1, 2});
}

TEST_CASE("slice then concat roundtrips exactly") {
    std::mt19937 rng(5);
    auto x = random_tensor<double>({3, 5, 2}, rng);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        std::size_t ext = x.shape()[axis];
        std::size_t cut = ext / 2 + (ext == 1 ? 0 : 1);
        cut = std::min(cut, ext - 1);
        if (cut == 0) continue;
        auto left = mmfuse::slice_axis(x, axis, 0, cut);
        auto right = mmfuse::slice_axis(x, axis, cut, ext - cut);
        auto back = mmfuse::concat_axis({left, right}, axis);
        CHECK(back.shape() == x.shape());
        CHECK(back.values() == x.values());
    }
}

TEST_CASE("slice out of range raises bounds error") {
    D x({2, 3}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(mmfuse::slice_axis(x, 1, 2, 2), mmfuse::BoundsError);
    CHECK_THROWS_AS(mmfuse::slice_axis(x, 5, 0, 1), mmfuse::BoundsError);
}

TEST_CASE("backward of a plain sum yields ones") {
    D w({4}, {0.5, -1, 2, 3}, true);
    mmfuse::TapeT<double> tape;
    auto loss = mmfuse::sum_all(w);
    mmfuse::backward(loss);
    CHECK(w.grad() == std::vector<double>(4, 1.0));
}

TEST_CASE("backward through softmax of a sum conserves mass") {
    D w({5}, {0.3, -0.2, 1.4, 0.0, -2.0}, true);
    mmfuse::TapeT<double> tape;
    auto loss = mmfuse::sum_all(mmfuse::softmax_lastdim(w));
    mmfuse::backward(loss);
    for (double g : w.grad()) CHECK(std::abs(g) < 1e-9);
}

TEST_CASE("backward demands a scalar loss and a nonempty record") {
    D w({2}, {1, 2}, true);
    {
        mmfuse::TapeT<double> tape;
        auto y = mmfuse::scale(w, 2.0);
        CHECK_THROWS_AS(mmfuse::backward(y), mmfuse::ContractError);
    }
    {
        mmfuse::TapeT<double> tape;
        D loss({1}, {1.0}, true);
        CHECK_THROWS_AS(mmfuse::backward(loss), mmfuse::ContractError);
    }
    CHECK_THROWS_AS(mmfuse::backward(D({1}, {1.0}, true)), mmfuse::ContractError);
}

TEST_CASE("replaying a consumed record is rejected") {
    D w({2}, {1, 2}, true);
    mmfuse::TapeT<double> tape;
    auto loss = mmfuse::sum_all(w);
    mmfuse::backward(loss);
    CHECK_THROWS_AS(mmfuse::backward(loss), mmfuse::ContractError);
}

TEST_CASE("second backward without zero_grad is rejected, with it accepted") {
    D w({2}, {1, 2}, true);
    {
        mmfuse::TapeT<double> tape;
        mmfuse::backward(mmfuse::sum_all(w));
    }
    {
        mmfuse::TapeT<double> tape;
        auto loss = mmfuse::sum_all(w);
        CHECK_THROWS_AS(mmfuse::backward(loss), mmfuse::ContractError);
    }
    w.zero_grad();
    {
        mmfuse::TapeT<double> tape;
        mmfuse::backward(mmfuse::sum_all(w));
        CHECK(w.grad() == std::vector<double>(2, 1.0));
    }
}

TEST_CASE("a leaf used twice accumulates within one pass") {
    D w({2}, {1, 2}, true);
    mmfuse::TapeT<double> tape;
    auto loss = mmfuse::sum_all(mmfuse::add(w, w));
    mmfuse::backward(loss);
    CHECK(w.grad() == std::vector<double>(2, 2.0));
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [] {
        std::mt19937 rng(99);
        auto a = random_tensor<double>({4, 4}, rng, -2, 2, true);
        auto b = random_tensor<double>({4, 4}, rng, -2, 2, true);
        mmfuse::TapeT<double> tape;
        auto loss = mmfuse::sum_all(mmfuse::softmax_lastdim(mmfuse::matmul(a, mmfuse::gelu(b))));
        mmfuse::backward(loss);
        auto g = a.grad();
        g.insert(g.end(), b.grad().begin(), b.grad().end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("finiteness audit rejects NaN and overflow") {
    CHECK(mmfuse::finite_audit_enabled());
    CHECK_THROWS_AS(D({1}, {std::nan("")}), mmfuse::NumericError);

    F big({2}, {1e30f, 1e30f});
    try {
        mmfuse::mul(big, big);
        FAIL("expected NumericError");
    } catch (const mmfuse::NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("no-grad guard suppresses recording") {
    D w({2}, {1, 2}, true);
    mmfuse::TapeT<double> tape;
    {
        mmfuse::NoGradGuard guard;
        auto y = mmfuse::scale(w, 3.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(tape.op_count() == 0);
}

TEST_CASE("tensor invariants at construction") {
    CHECK_THROWS_AS(D({2, 3}, {1, 2}), mmfuse::DimensionError);
    CHECK_THROWS_AS(D({0}, {}), mmfuse::DimensionError);
    CHECK_THROWS_AS(D(Shape{}, {1.0}), mmfuse::DimensionError);
}
