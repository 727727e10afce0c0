#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "choose/rng.hpp"
#include "choose/tensor.hpp"
#include "test_support.hpp"

using choose::Tape;
using choose::Tensor;
namespace ts = test_support;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("matmul identity and hand-expanded 2x2") {
    auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
    auto ib = choose::matmul(eye, b);
    CHECK(ib.value() == std::vector<double>{5, 6, 7, 8});

    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto ab = choose::matmul(a, b);
    CHECK(ab.value() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul matches the triple-loop reference") {
    choose::Rng rng(11);
    auto a = ts::random_tensor<float>({5, 4}, rng);
    auto b = ts::random_tensor<float>({4, 3}, rng);
    auto c = choose::matmul(a, b);
    auto ref = ts::matmul_reference(a.value(), b.value(), 5, 4, 3);
    CHECK(ts::max_abs_diff(c.value(), ref) < 1e-6);
}

TEST_CASE("matmul random shapes up to 64 agree with reference") {
    choose::Rng rng(12);
    for (int trial = 0; trial < 8; ++trial) {
        const int m = 1 + rng.uniform_int(64);
        const int k = 1 + rng.uniform_int(64);
        const int n = 1 + rng.uniform_int(64);
        auto a = ts::random_tensor<float>({m, k}, rng);
        auto b = ts::random_tensor<float>({k, n}, rng);
        auto c = choose::matmul(a, b);
        auto ref = ts::matmul_reference(a.value(), b.value(), m, k, n);
        double max_rel = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const double denom = std::max(1.0, std::abs(static_cast<double>(ref[i])));
            max_rel = std::max(max_rel, std::abs(c.value()[i] - ref[i]) / denom);
        }
        CHECK(max_rel < 1e-6);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({4, 2});
    CHECK_THROWS_WITH_AS(choose::matmul(a, b),
                         "matmul: inner dimensions disagree: [2x3] vs [4x2]",
                         std::invalid_argument);
}

TEST_CASE("masked_softmax uniform over equal scores") {
    auto x = Tensor<double>::zeros({1, 4});
    auto mask = Tensor<double>::zeros({1, 4});
    auto p = choose::masked_softmax(x, mask);
    for (double v : p.value()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("masked_softmax single unmasked entry") {
    auto x = Tensor<double>::zeros({1, 3});
    auto mask = Tensor<double>::from({1, 3}, {0.0, -kInf, -kInf});
    auto p = choose::masked_softmax(x, mask);
    CHECK(p.value()[0] == 1.0);
    CHECK(p.value()[1] == 0.0);
    CHECK(p.value()[2] == 0.0);
}

TEST_CASE("masked_softmax matches the exp/sum reference") {
    choose::Rng rng(13);
    auto x = ts::random_tensor<double>({1, 9}, rng, 3.0);
    auto mask = Tensor<double>::zeros({1, 9});
    auto p = choose::masked_softmax(x, mask);
    double denom = 0.0;
    for (double v : x.value()) denom += std::exp(v);
    for (int j = 0; j < 9; ++j)
        CHECK(p.value()[static_cast<std::size_t>(j)] ==
              doctest::Approx(std::exp(x.value()[static_cast<std::size_t>(j)]) / denom)
                  .epsilon(1e-7));
}

TEST_CASE("masked_softmax rows sum to one and masked entries carry zero weight") {
    choose::Rng rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + rng.uniform_int(12);
        auto x = ts::random_tensor<float>({3, n}, rng, 5.0);
        auto mask = Tensor<float>::zeros({3, n});
        for (auto& m : mask.value())
            if (rng.uniform() < 0.4) m = -std::numeric_limits<float>::infinity();
        // keep at least one open entry per row
        for (int i = 0; i < 3; ++i) mask.value()[static_cast<std::size_t>(i) * n] = 0.0f;
        auto p = choose::masked_softmax(x, mask);
        for (int i = 0; i < 3; ++i) {
            double row = 0.0;
            for (int j = 0; j < n; ++j) {
                const float w = p.value()[static_cast<std::size_t>(i) * n + j];
                row += w;
                if (std::isinf(mask.value()[static_cast<std::size_t>(i) * n + j])) CHECK(w == 0.0f);
            }
            CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("masked_softmax rejects a fully masked row") {
    auto x = Tensor<double>::zeros({1, 3});
    auto mask = Tensor<double>::from({1, 3}, {-kInf, -kInf, -kInf});
    CHECK_THROWS_AS(choose::masked_softmax(x, mask), std::invalid_argument);
}

TEST_CASE("layer_norm constant row collapses to zero") {
    auto x = Tensor<double>::from({1, 6}, std::vector<double>(6, 3.7));
    auto g = Tensor<double>::full({6}, 1.0);
    auto b = Tensor<double>::zeros({6});
    auto y = choose::layer_norm(x, g, b, 1e-5);
    for (double v : y.value()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("layer_norm leaves a standardized row fixed as eps vanishes") {
    auto x = Tensor<double>::from({1, 2}, {1.0, -1.0});
    auto g = Tensor<double>::full({2}, 1.0);
    auto b = Tensor<double>::zeros({2});
    auto y = choose::layer_norm(x, g, b, 1e-12);
    CHECK(y.value()[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(y.value()[1] == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm output moments") {
    choose::Rng rng(15);
    auto x = ts::random_tensor<double>({1, 32}, rng, 2.0);
    auto g = Tensor<double>::full({32}, 1.0);
    auto b = Tensor<double>::zeros({32});
    auto y = choose::layer_norm(x, g, b, 1e-5);
    double mean = 0.0;
    for (double v : y.value()) mean += v;
    mean /= 32.0;
    CHECK(std::abs(mean) <= 1e-6);
    double var = 0.0;
    for (double v : y.value()) var += (v - mean) * (v - mean);
    var /= 32.0;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("gelu fixed points and asymptotes") {
    auto x = Tensor<double>::from({3}, {0.0, 10.0, -10.0});
    auto y = choose::gelu(x);
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == doctest::Approx(10.0).epsilon(1e-4));
    CHECK(std::abs(y.value()[2]) < 1e-4);
}

TEST_CASE("backward: square at x=3 gives gradient 6") {
    auto x = Tensor<double>::leaf({1}, {3.0});
    Tape<double> tape;
    auto loss = choose::mul(x, x, &tape);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward: sum(A*B) gradients match finite differences") {
    choose::Rng rng(16);
    auto a = ts::random_tensor<double>({3, 4}, rng);
    auto b = ts::random_tensor<double>({4, 2}, rng);
    const double err = choose::grad_check(
        [](Tape<double>& tape, std::vector<Tensor<double>>& in) {
            return choose::sum_all(choose::matmul(in[0], in[1], &tape), &tape);
        },
        {a, b});
    CHECK(err <= 1e-8);
}

TEST_CASE("backward: non-scalar loss is rejected") {
    auto x = Tensor<double>::leaf({2, 2}, {1, 2, 3, 4});
    Tape<double> tape;
    auto y = choose::scale(x, 2.0, &tape);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: leaf used twice accumulates") {
    auto x = Tensor<double>::leaf({1}, {1.0});
    Tape<double> tape;
    auto loss = choose::add(x, x, &tape);
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("gradient accumulation scales exactly with reuse count") {
    for (int reps : {2, 3, 7}) {
        auto x = Tensor<double>::leaf({1}, {0.5});
        Tape<double> tape;
        Tensor<double> acc = choose::scale(x, 1.0, &tape);
        for (int i = 1; i < reps; ++i) acc = choose::add(acc, x, &tape);
        tape.backward(acc);
        CHECK(x.grad()[0] == static_cast<double>(reps));
    }
}

TEST_CASE("grad_check: linear function is exact to rounding") {
    choose::Rng rng(17);
    auto w = ts::random_tensor<double>({1, 8}, rng);
    auto x = ts::random_tensor<double>({8, 1}, rng);
    const double err = choose::grad_check(
        [](Tape<double>& tape, std::vector<Tensor<double>>& in) {
            return choose::sum_all(choose::matmul(in[0], in[1], &tape), &tape);
        },
        {w, x});
    CHECK(err <= 1e-9);
}

TEST_CASE("grad_check: two-layer MLP with gelu") {
    choose::Rng rng(18);
    auto x = ts::random_tensor<double>({2, 6}, rng);
    auto w1 = ts::random_tensor<double>({6, 8}, rng, 0.5);
    auto b1 = ts::random_tensor<double>({8}, rng, 0.1);
    auto w2 = ts::random_tensor<double>({8, 3}, rng, 0.5);
    auto b2 = ts::random_tensor<double>({3}, rng, 0.1);
    const double err = choose::grad_check(
        [](Tape<double>& tape, std::vector<Tensor<double>>& in) {
            auto h = choose::gelu(choose::add_bias(choose::matmul(in[0], in[1], &tape), in[2], &tape),
                                  &tape);
            auto o = choose::add_bias(choose::matmul(h, in[3], &tape), in[4], &tape);
            return choose::sum_all(choose::mul(o, o, &tape), &tape);
        },
        {x, w1, b1, w2, b2});
    CHECK(err <= 1e-4);
}

TEST_CASE("backward on composed graphs matches finite differences across seeds") {
    for (int seed = 0; seed < 20; ++seed) {
        choose::Rng rng(100 + static_cast<std::uint64_t>(seed));
        auto x = ts::random_tensor<double>({3, 5}, rng);
        auto w = ts::random_tensor<double>({5, 5}, rng, 0.6);
        auto g = ts::random_tensor<double>({5}, rng, 0.3);
        auto b = ts::random_tensor<double>({5}, rng, 0.3);
        // mix of norm, attention-style softmax, nonlinearities and reuse
        const double err = choose::grad_check(
            [](Tape<double>& tape, std::vector<Tensor<double>>& in) {
                auto h = choose::layer_norm(in[0], in[2], in[3], 1e-5, &tape);
                auto q = choose::matmul(h, in[1], &tape);
                auto s = choose::scale(choose::matmul_nt(q, h, &tape), 0.4, &tape);
                auto mask = Tensor<double>::zeros({3, 3});
                for (int i = 0; i < 3; ++i)
                    for (int j = i + 1; j < 3; ++j)
                        mask.value()[static_cast<std::size_t>(i) * 3 + j] = -kInf;
                auto a = choose::masked_softmax(s, mask, &tape);
                auto o = choose::gelu(choose::matmul(a, q, &tape), &tape);
                auto r = choose::add(o, q, &tape);  // reuse q through two paths
                return choose::sum_all(choose::mul(r, r, &tape), &tape);
            },
            {x, w, g, b});
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("slice, concat, gather and set_rows round trips with gradients") {
    choose::Rng rng(19);
    auto x = ts::random_tensor<double>({4, 6}, rng);
    auto rows = ts::random_tensor<double>({2, 6}, rng);
    const double err = choose::grad_check(
        [](Tape<double>& tape, std::vector<Tensor<double>>& in) {
            auto left = choose::slice_cols(in[0], 0, 3, &tape);
            auto right = choose::slice_cols(in[0], 3, 6, &tape);
            auto back = choose::concat_cols({left, right}, &tape);
            auto repl = choose::set_rows(back, {1, 3}, in[1], &tape);
            auto picked = choose::gather_rows(repl, {0, 1, 1, 2, 3}, &tape);
            return choose::sum_all(choose::mul(picked, picked, &tape), &tape);
        },
        {x, rows});
    CHECK(err <= 1e-6);
}
