// Finite-difference gradient tests for every differentiable primitive, five
// input shapes per op. Analytic f32 gradients from the tape are compared to
// central differences of the f64 reference ops.

#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "t2i/ops.hpp"
#include "t2i/ops_image.hpp"

using gradcheck::Case;
using gradcheck::run_case;
using gradcheck::uniform_tensor;
using t2i::Shape;
using t2i::Tensor;

namespace {

t2i::Rng rng_for(const char* op, int i) {
    return t2i::Rng(t2i::fnv1a64(op) + static_cast<uint64_t>(i));
}

void check_binary(const char* name, t2i::opdet::BinOp op, int refmode) {
    // Shape pairs cover same-shape, channel bias, middle broadcast, scalar
    // and a generic strided case.
    const std::vector<std::pair<Shape, Shape>> shapes = {
        {{3, 4}, {3, 4}},
        {{2, 5, 6}, {6}},
        {{2, 3, 3, 4}, {2, 1, 1, 4}},
        {{4, 3}, {1}},
        {{2, 1, 5}, {3, 1}},
    };
    for (int i = 0; i < static_cast<int>(shapes.size()); i++) {
        auto rng = rng_for(name, i);
        Case cs;
        cs.name = std::string(name) + " #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i].first), uniform_tensor(rng, shapes[i].second)};
        cs.fwd = [op](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::binary_op(t, in[0], in[1], op);
        };
        cs.ref = [refmode](const std::vector<refops::Arr>& in) {
            return refops::binary(in[0], in[1], refmode);
        };
        run_case(cs);
    }
}

}  // namespace

TEST_CASE("grad: add") { check_binary("add", t2i::opdet::BinOp::Add, 0); }
TEST_CASE("grad: sub") { check_binary("sub", t2i::opdet::BinOp::Sub, 1); }
TEST_CASE("grad: mul") { check_binary("mul", t2i::opdet::BinOp::Mul, 2); }

TEST_CASE("grad: scale") {
    const std::vector<Shape> shapes = {{1}, {7}, {3, 4}, {2, 3, 5}, {2, 2, 2, 3}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("scale", i);
        Case cs;
        cs.name = "scale #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i])};
        float c = rng.uniform(-2.0f, 2.0f);
        cs.fwd = [c](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::scale(t, in[0], c); };
        cs.ref = [c](const std::vector<refops::Arr>& in) {
            return refops::scale(in[0], static_cast<double>(c));
        };
        run_case(cs);
    }
}

TEST_CASE("grad: silu") {
    const std::vector<Shape> shapes = {{1}, {9}, {4, 5}, {2, 3, 4}, {2, 2, 3, 3}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("silu", i);
        Case cs;
        cs.name = "silu #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i], -3.0f, 3.0f)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::silu(t, in[0]); };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::silu(in[0]); };
        run_case(cs);
    }
}

TEST_CASE("grad: gelu") {
    const std::vector<Shape> shapes = {{1}, {9}, {4, 5}, {2, 3, 4}, {2, 2, 3, 3}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("gelu", i);
        Case cs;
        cs.name = "gelu #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i], -3.0f, 3.0f)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::gelu(t, in[0]); };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::gelu(in[0]); };
        run_case(cs);
    }
}

TEST_CASE("grad: softmax") {
    const std::vector<Shape> shapes = {{1, 4}, {5, 3}, {2, 3, 6}, {8}, {2, 2, 2, 5}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("softmax", i);
        Case cs;
        cs.name = "softmax #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i], -4.0f, 4.0f)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::softmax(t, in[0]); };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::softmax(in[0]); };
        run_case(cs);
    }
}

TEST_CASE("grad: layer_norm plain") {
    const std::vector<Shape> shapes = {{1, 4}, {5, 3}, {2, 3, 6}, {8}, {2, 2, 10}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("layer_norm", i);
        Case cs;
        cs.name = "layer_norm #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i], -2.0f, 2.0f)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::layer_norm(t, in[0]);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) {
            return refops::layer_norm(in[0], nullptr, nullptr);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: layer_norm affine") {
    const std::vector<Shape> shapes = {{1, 4}, {5, 3}, {2, 3, 6}, {8}, {2, 2, 10}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("layer_norm_affine", i);
        Case cs;
        int64_t d = shapes[i].back();
        cs.name = "layer_norm affine #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i], -2.0f, 2.0f),
                     uniform_tensor(rng, {d}, 0.5f, 1.5f), uniform_tensor(rng, {d})};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::layer_norm(t, in[0], in[1], in[2]);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) {
            return refops::layer_norm(in[0], &in[1], &in[2]);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: group_norm") {
    struct S { Shape x; int64_t groups; };
    const std::vector<S> shapes = {
        {{1, 2, 2, 4}, 2}, {{2, 3, 3, 4}, 4}, {{1, 4, 4, 6}, 3}, {{2, 2, 2, 8}, 2}, {{1, 3, 2, 4}, 1},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("group_norm", i);
        Case cs;
        int64_t c = shapes[i].x.back(), g = shapes[i].groups;
        cs.name = "group_norm #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i].x, -2.0f, 2.0f),
                     uniform_tensor(rng, {c}, 0.5f, 1.5f), uniform_tensor(rng, {c})};
        cs.fwd = [g](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::group_norm(t, in[0], g, in[1], in[2]);
        };
        cs.ref = [g](const std::vector<refops::Arr>& in) {
            return refops::group_norm(in[0], g, in[1], in[2]);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: linear and matmul") {
    struct S { Shape x; Shape w; };
    const std::vector<S> shapes = {
        {{3, 4}, {4, 5}}, {{1, 2}, {2, 1}}, {{2, 3, 4}, {4, 3}}, {{6, 1}, {1, 7}}, {{2, 2, 2, 3}, {3, 4}},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("linear", i);
        Case cs;
        cs.name = "linear #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i].x), uniform_tensor(rng, shapes[i].w)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            if (in[0].rank() == 2) return t2i::matmul(t, in[0], in[1]);
            return t2i::linear(t, in[0], in[1]);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::linear(in[0], in[1]); };
        run_case(cs);
    }
}

TEST_CASE("grad: embedding") {
    struct S { int64_t v, d; Shape ids_shape; };
    const std::vector<S> shapes = {
        {5, 3, {4}}, {7, 2, {2, 3}}, {3, 6, {5}}, {10, 4, {2, 2}}, {4, 3, {1}},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("embedding", i);
        const S& s = shapes[i];
        std::vector<int32_t> ids(static_cast<size_t>(t2i::shape_numel(s.ids_shape)));
        for (auto& id : ids) id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(s.v)));
        // Repeats exercise gradient accumulation into one row.
        if (ids.size() >= 2) ids[1] = ids[0];
        Case cs;
        cs.name = "embedding #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, {s.v, s.d})};
        cs.fwd = [ids, s](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::embedding(t, in[0], ids, s.ids_shape);
        };
        cs.ref = [ids, s](const std::vector<refops::Arr>& in) {
            return refops::embedding(in[0], ids, s.ids_shape);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: conv3x3 stride 1") {
    struct S { Shape x; int64_t co; };
    const std::vector<S> shapes = {
        {{1, 3, 3, 2}, 3}, {{2, 4, 4, 3}, 2}, {{1, 5, 5, 1}, 4}, {{1, 2, 6, 2}, 2}, {{2, 3, 5, 2}, 3},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("conv1", i);
        const S& s = shapes[i];
        int64_t cin = s.x.back();
        Case cs;
        cs.name = "conv3x3 s1 #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, s.x), uniform_tensor(rng, {9 * cin, s.co}),
                     uniform_tensor(rng, {s.co})};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::conv3x3(t, in[0], in[1], in[2], 1);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) {
            return refops::conv3x3(in[0], in[1], &in[2], 1);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: conv3x3 stride 2") {
    struct S { Shape x; int64_t co; };
    const std::vector<S> shapes = {
        {{1, 4, 4, 2}, 3}, {{2, 6, 6, 1}, 2}, {{1, 5, 5, 2}, 2}, {{1, 8, 4, 1}, 3}, {{2, 4, 6, 2}, 2},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("conv2", i);
        const S& s = shapes[i];
        int64_t cin = s.x.back();
        Case cs;
        cs.name = "conv3x3 s2 #" + std::to_string(i);
        // Odd case: no bias on one variant.
        bool with_bias = (i % 2 == 0);
        cs.inputs = {uniform_tensor(rng, s.x), uniform_tensor(rng, {9 * cin, s.co})};
        if (with_bias) cs.inputs.push_back(uniform_tensor(rng, {s.co}));
        cs.fwd = [with_bias](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::conv3x3(t, in[0], in[1], with_bias ? in[2] : Tensor{}, 2);
        };
        cs.ref = [with_bias](const std::vector<refops::Arr>& in) {
            return refops::conv3x3(in[0], in[1], with_bias ? &in[2] : nullptr, 2);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: upsample_nearest2x") {
    const std::vector<Shape> shapes = {
        {1, 2, 2, 3}, {2, 3, 3, 2}, {1, 1, 4, 2}, {1, 4, 1, 3}, {2, 2, 3, 1},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("upsample", i);
        Case cs;
        cs.name = "upsample #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i])};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::upsample_nearest2x(t, in[0]);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::upsample2x(in[0]); };
        run_case(cs);
    }
}

TEST_CASE("grad: concat_last") {
    struct S { Shape a; Shape b; };
    const std::vector<S> shapes = {
        {{2, 3}, {2, 2}}, {{1, 2, 2, 3}, {1, 2, 2, 1}}, {{3, 1}, {3, 4}}, {{2, 2, 5}, {2, 2, 5}}, {{4}, {3}},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("concat", i);
        Case cs;
        cs.name = "concat #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i].a), uniform_tensor(rng, shapes[i].b)};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::concat_last(t, in[0], in[1]);
        };
        cs.ref = [](const std::vector<refops::Arr>& in) {
            return refops::concat_last(in[0], in[1]);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: reductions and losses") {
    const std::vector<Shape> shapes = {{1}, {6}, {3, 4}, {2, 3, 2}, {2, 2, 2, 2}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("reduce", i);
        Case cs;
        cs.name = "mean_all #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i])};
        cs.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::mean_all(t, in[0]); };
        cs.ref = [](const std::vector<refops::Arr>& in) { return refops::mean_all(in[0]); };
        run_case(cs);

        Case cs2;
        cs2.name = "sum_all #" + std::to_string(i);
        cs2.inputs = {uniform_tensor(rng, shapes[i])};
        cs2.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) { return t2i::sum_all(t, in[0]); };
        cs2.ref = [](const std::vector<refops::Arr>& in) { return refops::sum_all(in[0]); };
        run_case(cs2);

        Case cs3;
        cs3.name = "mse #" + std::to_string(i);
        cs3.inputs = {uniform_tensor(rng, shapes[i]), uniform_tensor(rng, shapes[i])};
        cs3.fwd = [](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::mse(t, in[0], in[1]);
        };
        cs3.ref = [](const std::vector<refops::Arr>& in) { return refops::mse(in[0], in[1]); };
        run_case(cs3);
    }
}

TEST_CASE("grad: cross_entropy") {
    struct S { int64_t rows, v; };
    const std::vector<S> shapes = {{1, 4}, {5, 3}, {4, 7}, {8, 2}, {3, 10}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("ce", i);
        const S& s = shapes[i];
        std::vector<int32_t> targets(static_cast<size_t>(s.rows));
        for (auto& t : targets) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(s.v)));
        // Some rows ignored, never all.
        if (s.rows > 1) targets[0] = -1;
        Case cs;
        cs.name = "cross_entropy #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, {s.rows, s.v}, -3.0f, 3.0f)};
        cs.fwd = [targets](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::cross_entropy(t, in[0], targets, -1);
        };
        cs.ref = [targets](const std::vector<refops::Arr>& in) {
            return refops::cross_entropy(in[0], targets, -1);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: attention") {
    struct S { int64_t b, tq, tk, d, heads; t2i::AttnMask mask; };
    const std::vector<S> shapes = {
        {1, 3, 3, 4, 2, t2i::AttnMask::Causal},
        {2, 4, 4, 6, 3, t2i::AttnMask::Causal},
        {2, 3, 5, 4, 2, t2i::AttnMask::KeyLens},
        {1, 2, 4, 8, 4, t2i::AttnMask::KeyLens},
        {2, 3, 4, 4, 1, t2i::AttnMask::None},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("attention", i);
        const S& s = shapes[i];
        std::vector<int32_t> lens;
        if (s.mask == t2i::AttnMask::KeyLens)
            for (int64_t bi = 0; bi < s.b; bi++)
                lens.push_back(1 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(s.tk))));
        Case cs;
        cs.name = "attention #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, {s.b, s.tq, s.d}), uniform_tensor(rng, {s.b, s.tk, s.d}),
                     uniform_tensor(rng, {s.b, s.tk, s.d})};
        cs.fwd = [s, lens](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::attention(t, in[0], in[1], in[2], s.heads, s.mask, lens);
        };
        cs.ref = [s, lens](const std::vector<refops::Arr>& in) {
            int mode = s.mask == t2i::AttnMask::Causal ? 0 : s.mask == t2i::AttnMask::KeyLens ? 1 : 2;
            return refops::attention(in[0], in[1], in[2], s.heads, mode, lens);
        };
        run_case(cs);
    }
}

TEST_CASE("grad: token pooling") {
    struct S { int64_t b, t, d; };
    const std::vector<S> shapes = {{1, 3, 4}, {2, 5, 3}, {3, 2, 6}, {2, 4, 2}, {1, 6, 5}};
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("pool", i);
        const S& s = shapes[i];
        std::vector<int32_t> lens;
        for (int64_t bi = 0; bi < s.b; bi++)
            lens.push_back(1 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(s.t))));
        Case cs;
        cs.name = "masked_mean_tokens #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, {s.b, s.t, s.d})};
        cs.fwd = [lens](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::masked_mean_tokens(t, in[0], lens);
        };
        cs.ref = [lens](const std::vector<refops::Arr>& in) {
            return refops::masked_mean_tokens(in[0], lens);
        };
        run_case(cs);

        Case cs2;
        cs2.name = "last_token #" + std::to_string(i);
        cs2.inputs = {uniform_tensor(rng, {s.b, s.t, s.d})};
        cs2.fwd = [lens](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::last_token(t, in[0], lens);
        };
        cs2.ref = [lens](const std::vector<refops::Arr>& in) {
            return refops::last_token(in[0], lens);
        };
        run_case(cs2);
    }
}

TEST_CASE("grad: reshape and transpose") {
    struct S { Shape in; Shape out; std::vector<int> perm; };
    const std::vector<S> shapes = {
        {{2, 3}, {6}, {1, 0}},
        {{2, 3, 4}, {6, 4}, {2, 0, 1}},
        {{4}, {2, 2}, {0}},
        {{2, 2, 2, 2}, {4, 4}, {3, 2, 1, 0}},
        {{3, 5}, {5, 3}, {1, 0}},
    };
    for (int i = 0; i < 5; i++) {
        auto rng = rng_for("reshape", i);
        Case cs;
        cs.name = "reshape #" + std::to_string(i);
        cs.inputs = {uniform_tensor(rng, shapes[i].in)};
        Shape target = shapes[i].out;
        cs.fwd = [target](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::reshape(t, in[0], target);
        };
        cs.ref = [target](const std::vector<refops::Arr>& in) {
            refops::Arr out = in[0];
            out.shape = target;
            return out;
        };
        run_case(cs);

        Case cs2;
        cs2.name = "transpose #" + std::to_string(i);
        cs2.inputs = {uniform_tensor(rng, shapes[i].in)};
        std::vector<int> perm = shapes[i].perm;
        cs2.fwd = [perm](t2i::Tape* t, const std::vector<Tensor>& in) {
            return t2i::transpose(t, in[0], perm);
        };
        cs2.ref = [perm](const std::vector<refops::Arr>& in) {
            return refops::transpose(in[0], perm);
        };
        run_case(cs2);
    }
}
