// Tensor, tape and op semantics beyond pure gradient values.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "t2i/ops.hpp"
#include "t2i/ops_image.hpp"
#include "t2i/rng.hpp"

using t2i::Tape;
using t2i::Tensor;

TEST_CASE("tensor basics") {
    Tensor a = Tensor::zeros({2, 3});
    CHECK(a.numel() == 6);
    CHECK(a.rank() == 2);
    CHECK(a.dim(-1) == 3);
    CHECK_THROWS_AS(Tensor::from({1.0f, 2.0f}, {3}), t2i::dim_error);
    CHECK_THROWS_AS((void)a.item(), t2i::dim_error);

    Tensor b = a;  // shared handle
    b.data()[0] = 5.0f;
    CHECK(a.data()[0] == 5.0f);
    Tensor c = a.clone();
    c.data()[0] = 7.0f;
    CHECK(a.data()[0] == 5.0f);
}

TEST_CASE("frozen hand-computed values") {
    // softmax([0, ln 2]) = [1/3, 2/3]
    Tensor x = Tensor::from({0.0f, std::log(2.0f)}, {1, 2});
    Tensor y = t2i::softmax(nullptr, x);
    CHECK(y.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(y.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));

    // layer_norm([1, 3]): mean 2, population var 1
    Tensor z = t2i::layer_norm(nullptr, Tensor::from({1.0f, 3.0f}, {1, 2}));
    CHECK(z.data()[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-6));
    CHECK(z.data()[1] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-6));

    // silu(1) = 1 * sigmoid(1)
    Tensor s = t2i::silu(nullptr, Tensor::from({1.0f}, {1}));
    CHECK(s.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-6));

    // matmul 2x2 by hand: [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
    Tensor m = t2i::matmul(nullptr, Tensor::from({1, 2, 3, 4}, {2, 2}),
                           Tensor::from({5, 6, 7, 8}, {2, 2}));
    CHECK(m.data()[0] == doctest::Approx(19.0));
    CHECK(m.data()[1] == doctest::Approx(22.0));
    CHECK(m.data()[2] == doctest::Approx(43.0));
    CHECK(m.data()[3] == doctest::Approx(50.0));
}

TEST_CASE("gradient accumulation within one backward") {
    // y = x + x -> dy/dx = 2
    Tensor x = Tensor::from({3.0f}, {1}, true);
    Tape tape;
    Tensor y = t2i::add(&tape, x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
}

TEST_CASE("repeated backward is bit-identical") {
    t2i::Rng rng(42);
    Tensor x = Tensor::randn(rng, {4, 5}, 1.0f, true);
    Tensor w = Tensor::randn(rng, {5, 3}, 1.0f, true);
    Tape tape;
    Tensor h = t2i::silu(&tape, t2i::matmul(&tape, x, w));
    Tensor loss = t2i::mean_all(&tape, t2i::mul(&tape, h, h));
    tape.backward(loss);
    std::vector<float> gx(x.grad(), x.grad() + x.numel());
    std::vector<float> gw(w.grad(), w.grad() + w.numel());
    tape.backward(loss);
    for (int64_t i = 0; i < x.numel(); i++) CHECK(x.grad()[i] == gx[static_cast<size_t>(i)]);
    for (int64_t i = 0; i < w.numel(); i++) CHECK(w.grad()[i] == gw[static_cast<size_t>(i)]);
}

TEST_CASE("no tape means no recording") {
    Tensor x = Tensor::from({1.0f, 2.0f}, {2}, true);
    Tensor y = t2i::silu(nullptr, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("frozen inputs get no gradient") {
    Tensor x = Tensor::from({1.0f, 2.0f}, {1, 2}, false);
    Tensor w = Tensor::from({1.0f, 0.0f, 0.0f, 1.0f}, {2, 2}, true);
    Tape tape;
    Tensor y = t2i::matmul(&tape, x, w);
    Tensor loss = t2i::sum_all(&tape, y);
    tape.backward(loss);
    CHECK_FALSE(x.has_grad());
    CHECK(w.has_grad());
}

TEST_CASE("shape errors throw") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(t2i::matmul(nullptr, a, b), t2i::dim_error);
    CHECK_THROWS_AS(t2i::add(nullptr, a, b), t2i::dim_error);
    CHECK_THROWS_AS(t2i::mse(nullptr, a, b), t2i::dim_error);
    CHECK_THROWS_AS(t2i::conv3x3(nullptr, Tensor::zeros({1, 4, 4, 2}), Tensor::zeros({9, 3}), {}, 1),
                    t2i::dim_error);
    CHECK_THROWS_AS(t2i::embedding(nullptr, Tensor::zeros({4, 2}), {5}, {1}), t2i::index_error);
}

TEST_CASE("broadcast add matches explicit expansion") {
    t2i::Rng rng(7);
    Tensor x = Tensor::randn(rng, {2, 3, 3, 4});
    Tensor t = Tensor::randn(rng, {2, 1, 1, 4});
    Tensor y = t2i::add(nullptr, x, t);
    for (int64_t b = 0; b < 2; b++)
        for (int64_t i = 0; i < 9; i++)
            for (int64_t c = 0; c < 4; c++) {
                float want = x.data()[(b * 9 + i) * 4 + c] + t.data()[b * 4 + c];
                CHECK(y.data()[(b * 9 + i) * 4 + c] == want);
            }
}

TEST_CASE("attention causality is exact") {
    // Mutating a suffix position must leave earlier outputs bit-identical.
    t2i::Rng rng(11);
    Tensor q = Tensor::randn(rng, {1, 6, 8});
    Tensor k = Tensor::randn(rng, {1, 6, 8});
    Tensor v = Tensor::randn(rng, {1, 6, 8});
    Tensor y0 = t2i::attention(nullptr, q, k, v, 2, t2i::AttnMask::Causal);
    // Perturb the last position of k and v.
    for (int64_t c = 0; c < 8; c++) {
        k.data()[5 * 8 + c] += 100.0f;
        v.data()[5 * 8 + c] -= 3.0f;
    }
    Tensor y1 = t2i::attention(nullptr, q, k, v, 2, t2i::AttnMask::Causal);
    for (int64_t i = 0; i < 5 * 8; i++) CHECK(y0.data()[i] == y1.data()[i]);
    // And the final position must differ.
    bool changed = false;
    for (int64_t c = 0; c < 8; c++) changed |= (y0.data()[5 * 8 + c] != y1.data()[5 * 8 + c]);
    CHECK(changed);
}

TEST_CASE("conv3x3 stride 2 halves even spatial dims") {
    Tensor x = Tensor::zeros({1, 32, 32, 3});
    Tensor w = Tensor::zeros({27, 5});
    Tensor y = t2i::conv3x3(nullptr, x, w, {}, 2);
    CHECK(y.shape() == t2i::Shape{1, 16, 16, 5});
}
