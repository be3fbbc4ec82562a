#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "t2i/blas.hpp"
#include "t2i/common.hpp"
#include "t2i/tape.hpp"
#include "t2i/tensor.hpp"

namespace t2i {

inline bool grad_wanted(Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

namespace opdet {

// Broadcast plan for binary elementwise ops, numpy alignment on trailing
// dims. Most real uses collapse to an (outer, mid, inner) pattern where one
// operand repeats along mid; anything else goes through the generic strided
// walk, which is kept simple rather than fast.
struct Bcast {
    Shape out;
    // Per out-dim strides in elements; 0 where an operand broadcasts.
    std::vector<int64_t> sa, sb;
    bool same = false;           // a and b have identical shapes
    bool fast_b = false;         // a full, b repeats as (outer, mid, inner)
    int64_t outer = 1, mid = 1, inner = 1;
};

inline Bcast plan_bcast(const Shape& a, const Shape& b) {
    Bcast p;
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    std::vector<int64_t> da(r, 1), db(r, 1);
    for (size_t i = 0; i < r; i++) {
        if (i >= r - ra) da[i] = a[i - (r - ra)];
        if (i >= r - rb) db[i] = b[i - (r - rb)];
        if (da[i] == db[i]) p.out[i] = da[i];
        else if (da[i] == 1) p.out[i] = db[i];
        else if (db[i] == 1) p.out[i] = da[i];
        else throw dim_error("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    int64_t stra = 1, strb = 1;
    for (size_t i = r; i-- > 0;) {
        p.sa[i] = (da[i] == 1 && p.out[i] != 1) ? 0 : stra;
        p.sb[i] = (db[i] == 1 && p.out[i] != 1) ? 0 : strb;
        stra *= da[i];
        strb *= db[i];
    }
    p.same = (a == b);
    if (p.same) return p;
    if (shape_numel(p.out) == shape_numel(Shape(a))) {
        // b pattern: trailing dims equal (inner), leading dims equal (outer),
        // everything between equal to 1.
        size_t lo = 0, hi = r;
        while (hi > lo && db[hi - 1] == p.out[hi - 1]) hi--;
        while (lo < hi && db[lo] == p.out[lo]) lo++;
        bool mid_ones = true;
        for (size_t i = lo; i < hi; i++) mid_ones &= (db[i] == 1);
        if (mid_ones) {
            p.fast_b = true;
            for (size_t i = 0; i < lo; i++) p.outer *= p.out[i];
            for (size_t i = lo; i < hi; i++) p.mid *= p.out[i];
            for (size_t i = hi; i < r; i++) p.inner *= p.out[i];
        }
    }
    return p;
}

inline int64_t bcast_offset(const Bcast& p, const std::vector<int64_t>& strides, int64_t idx) {
    int64_t off = 0;
    for (size_t i = p.out.size(); i-- > 0;) {
        int64_t d = p.out[i];
        off += (idx % d) * strides[i];
        idx /= d;
    }
    return off;
}

enum class BinOp { Add, Sub, Mul };

}  // namespace opdet

inline Tensor binary_op(Tape* tape, const Tensor& a, const Tensor& b, opdet::BinOp op) {
    using opdet::BinOp;
    opdet::Bcast p = opdet::plan_bcast(a.shape(), b.shape());
    bool rg = grad_wanted(tape, {&a, &b});
    Tensor out = Tensor::uninit(p.out, rg);
    int64_t n = out.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    auto apply = [op](float x, float y) {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            default: return x * y;
        }
    };
    if (p.same) {
        parallel_for(n, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; i++) po[i] = apply(pa[i], pb[i]);
        });
    } else if (p.fast_b) {
        parallel_for(p.outer * p.mid, [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; r++) {
                int64_t o = r / p.mid;
                const float* ra = pa + r * p.inner;
                const float* rb = pb + o * p.inner;
                float* ro = po + r * p.inner;
                for (int64_t i = 0; i < p.inner; i++) ro[i] = apply(ra[i], rb[i]);
            }
        });
    } else {
        for (int64_t i = 0; i < n; i++)
            po[i] = apply(pa[bcast_offset(p, p.sa, i)], pb[bcast_offset(p, p.sb, i)]);
    }
    if (rg) {
        tape->touch(a); tape->touch(b); tape->touch(out);
        Tensor ta = a, tb = b, to = out;
        tape->record([ta, tb, to, p, op]() mutable {
            using opdet::BinOp;
            const float* g = to.grad();
            int64_t n = to.numel();
            bool wa = ta.requires_grad(), wb = tb.requires_grad();
            float* ga = wa ? ta.grad() : nullptr;
            float* gb = wb ? tb.grad() : nullptr;
            const float* pa = ta.data();
            const float* pb = tb.data();
            if (p.same) {
                if (wa) {
                    if (op == BinOp::Mul) for (int64_t i = 0; i < n; i++) ga[i] += g[i] * pb[i];
                    else for (int64_t i = 0; i < n; i++) ga[i] += g[i];
                }
                if (wb) {
                    if (op == BinOp::Mul) for (int64_t i = 0; i < n; i++) gb[i] += g[i] * pa[i];
                    else if (op == BinOp::Sub) for (int64_t i = 0; i < n; i++) gb[i] -= g[i];
                    else for (int64_t i = 0; i < n; i++) gb[i] += g[i];
                }
                return;
            }
            if (p.fast_b) {
                // a covers the output densely; b's gradient reduces over mid
                // one resident row at a time.
                if (wa) {
                    if (op == BinOp::Mul) {
                        for (int64_t r = 0; r < p.outer * p.mid; r++) {
                            const float* rb = pb + (r / p.mid) * p.inner;
                            const float* rgo = g + r * p.inner;
                            float* rga = ga + r * p.inner;
                            for (int64_t i = 0; i < p.inner; i++) rga[i] += rgo[i] * rb[i];
                        }
                    } else {
                        for (int64_t i = 0; i < n; i++) ga[i] += g[i];
                    }
                }
                if (wb) {
                    for (int64_t r = 0; r < p.outer * p.mid; r++) {
                        const float* rgo = g + r * p.inner;
                        float* rgb = gb + (r / p.mid) * p.inner;
                        if (op == BinOp::Mul) {
                            const float* rpa = pa + r * p.inner;
                            for (int64_t i = 0; i < p.inner; i++) rgb[i] += rgo[i] * rpa[i];
                        } else if (op == BinOp::Sub) {
                            for (int64_t i = 0; i < p.inner; i++) rgb[i] -= rgo[i];
                        } else {
                            for (int64_t i = 0; i < p.inner; i++) rgb[i] += rgo[i];
                        }
                    }
                }
                return;
            }
            for (int64_t i = 0; i < n; i++) {
                int64_t ia = bcast_offset(p, p.sa, i);
                int64_t ib = bcast_offset(p, p.sb, i);
                float gi = g[i];
                switch (op) {
                    case BinOp::Add:
                        if (wa) ga[ia] += gi;
                        if (wb) gb[ib] += gi;
                        break;
                    case BinOp::Sub:
                        if (wa) ga[ia] += gi;
                        if (wb) gb[ib] -= gi;
                        break;
                    case BinOp::Mul:
                        if (wa) ga[ia] += gi * pb[ib];
                        if (wb) gb[ib] += gi * pa[ia];
                        break;
                }
            }
        });
    }
    return out;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, opdet::BinOp::Add); }
inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, opdet::BinOp::Sub); }
inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, opdet::BinOp::Mul); }

inline Tensor scale(Tape* tape, const Tensor& a, float c) {
    bool rg = grad_wanted(tape, {&a});
    Tensor out = Tensor::uninit(a.shape(), rg);
    int64_t n = a.numel();
    const float* pa = a.data();
    float* po = out.data();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; i++) po[i] = c * pa[i];
    });
    if (rg) {
        tape->touch(a); tape->touch(out);
        Tensor ta = a, to = out;
        tape->record([ta, to, c]() mutable {
            const float* g = to.grad();
            float* ga = ta.grad();
            int64_t n = ta.numel();
            for (int64_t i = 0; i < n; i++) ga[i] += c * g[i];
        });
    }
    return out;
}

inline Tensor silu(Tape* tape, const Tensor& x) {
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::uninit(x.shape(), rg);
    int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    if (!rg) {
        parallel_for(n, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; i++) {
                float s = 1.0f / (1.0f + std::exp(-px[i]));
                po[i] = px[i] * s;
            }
        });
        return out;
    }
    // The sigmoid is kept for the backward pass; recomputing exp there costs
    // more than the extra read.
    auto sig = std::make_shared<FloatBuf>();
    sig->resize(static_cast<size_t>(n));
    float* ps = sig->data();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; i++) {
            float s = 1.0f / (1.0f + std::exp(-px[i]));
            ps[i] = s;
            po[i] = px[i] * s;
        }
    });
    tape->touch(x); tape->touch(out);
    Tensor tx = x, to = out;
    tape->record([tx, to, sig]() mutable {
        const float* g = to.grad();
        const float* px = tx.data();
        const float* ps = sig->data();
        float* gx = tx.grad();
        int64_t n = tx.numel();
        for (int64_t i = 0; i < n; i++) {
            float s = ps[i];
            gx[i] += g[i] * s * (1.0f + px[i] * (1.0f - s));
        }
    });
    return out;
}

inline constexpr float kInvSqrt2 = 0.7071067811865475f;
inline constexpr float kInvSqrt2Pi = 0.3989422804014327f;

inline Tensor gelu(Tape* tape, const Tensor& x) {
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::uninit(x.shape(), rg);
    int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; i++) {
            float cdf = 0.5f * (1.0f + std::erf(px[i] * kInvSqrt2));
            po[i] = px[i] * cdf;
        }
    });
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to]() mutable {
            const float* g = to.grad();
            const float* px = tx.data();
            float* gx = tx.grad();
            int64_t n = tx.numel();
            for (int64_t i = 0; i < n; i++) {
                float v = px[i];
                float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
                float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Softmax over the last dimension, max-subtracted for stability.
inline Tensor softmax(Tape* tape, const Tensor& x) {
    check_dim(x.rank() >= 1, "softmax needs rank >= 1");
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::uninit(x.shape(), rg);
    const float* px = x.data();
    float* po = out.data();
    parallel_for(rows, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; r++) {
            const float* xr = px + r * d;
            float* orow = po + r * d;
            float mx = xr[0];
            for (int64_t i = 1; i < d; i++) mx = std::max(mx, xr[i]);
            float sum = 0.0f;
            for (int64_t i = 0; i < d; i++) {
                orow[i] = std::exp(xr[i] - mx);
                sum += orow[i];
            }
            float inv = 1.0f / sum;
            for (int64_t i = 0; i < d; i++) orow[i] *= inv;
        }
    });
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to, rows, d]() mutable {
            const float* g = to.grad();
            const float* y = to.data();
            float* gx = tx.grad();
            for (int64_t r = 0; r < rows; r++) {
                const float* yr = y + r * d;
                const float* gr = g + r * d;
                float* gxr = gx + r * d;
                float dot = 0.0f;
                for (int64_t i = 0; i < d; i++) dot += gr[i] * yr[i];
                for (int64_t i = 0; i < d; i++) gxr[i] += yr[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

// Layer norm over the last dimension with population variance. gamma/beta are
// optional; pass undefined Tensors for the plain standardizing form.
inline Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma = {},
                         const Tensor& beta = {}, float eps = 1e-5f) {
    check_dim(x.rank() >= 1, "layer_norm needs rank >= 1");
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    bool affine = gamma.defined();
    if (affine) {
        check_dim(beta.defined(), "layer_norm: gamma without beta");
        check_dim(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
    }
    bool rg = grad_wanted(tape, {&x, &gamma, &beta});
    Tensor out = Tensor::uninit(x.shape(), rg);
    Tensor stats = Tensor::zeros({rows, 2});  // mean, inv std per row
    const float* px = x.data();
    float* po = out.data();
    float* ps = stats.data();
    const float* pg = affine ? gamma.data() : nullptr;
    const float* pb = affine ? beta.data() : nullptr;
    parallel_for(rows, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; r++) {
            const float* xr = px + r * d;
            float* orow = po + r * d;
            float mean = 0.0f;
            for (int64_t i = 0; i < d; i++) mean += xr[i];
            mean /= static_cast<float>(d);
            float var = 0.0f;
            for (int64_t i = 0; i < d; i++) {
                float c = xr[i] - mean;
                var += c * c;
            }
            var /= static_cast<float>(d);
            float inv = 1.0f / std::sqrt(var + eps);
            ps[r * 2] = mean;
            ps[r * 2 + 1] = inv;
            for (int64_t i = 0; i < d; i++) {
                float xh = (xr[i] - mean) * inv;
                orow[i] = affine ? xh * pg[i] + pb[i] : xh;
            }
        }
    });
    if (rg) {
        tape->touch(x); tape->touch(out);
        if (affine) { tape->touch(gamma); tape->touch(beta); }
        Tensor tx = x, to = out, tg = gamma, tb = beta;
        tape->record([tx, to, tg, tb, stats, rows, d, affine]() mutable {
            const float* g = to.grad();
            const float* px = tx.data();
            const float* ps = stats.data();
            const float* pg = affine ? tg.data() : nullptr;
            bool wx = tx.requires_grad();
            bool wg = affine && tg.requires_grad();
            bool wb = affine && tb.requires_grad();
            float* gx = wx ? tx.grad() : nullptr;
            float* gg = wg ? tg.grad() : nullptr;
            float* gb = wb ? tb.grad() : nullptr;
            for (int64_t r = 0; r < rows; r++) {
                const float* xr = px + r * d;
                const float* gr = g + r * d;
                float mean = ps[r * 2], inv = ps[r * 2 + 1];
                if (wg || wb) {
                    for (int64_t i = 0; i < d; i++) {
                        float xh = (xr[i] - mean) * inv;
                        if (wg) gg[i] += gr[i] * xh;
                        if (wb) gb[i] += gr[i];
                    }
                }
                if (!wx) continue;
                float sum_dxh = 0.0f, sum_dxh_xh = 0.0f;
                for (int64_t i = 0; i < d; i++) {
                    float dxh = affine ? gr[i] * pg[i] : gr[i];
                    float xh = (xr[i] - mean) * inv;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                float invd = 1.0f / static_cast<float>(d);
                float* gxr = gx + r * d;
                for (int64_t i = 0; i < d; i++) {
                    float dxh = affine ? gr[i] * pg[i] : gr[i];
                    float xh = (xr[i] - mean) * inv;
                    gxr[i] += inv * (dxh - invd * sum_dxh - xh * invd * sum_dxh_xh);
                }
            }
        });
    }
    return out;
}

// x[..., K] times W[K, N]. Leading dims are flattened into the GEMM M.
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w) {
    check_dim(x.rank() >= 1 && w.rank() == 2, "linear: need x rank >= 1, w rank 2");
    int64_t k = x.dim(-1), n = w.dim(1);
    check_dim(w.dim(0) == k, "linear: inner dims differ: x " + shape_str(x.shape()) +
                                 " w " + shape_str(w.shape()));
    int64_t m = x.numel() / k;
    Shape oshape(x.shape());
    oshape.back() = n;
    bool rg = grad_wanted(tape, {&x, &w});
    Tensor out = Tensor::uninit(oshape, rg);
    sgemm(false, false, m, n, k, 1.0f, x.data(), k, w.data(), n, 0.0f, out.data(), n);
    if (rg) {
        tape->touch(x); tape->touch(w); tape->touch(out);
        Tensor tx = x, tw = w, to = out;
        tape->record([tx, tw, to, m, n, k]() mutable {
            const float* g = to.grad();
            if (tx.requires_grad())
                sgemm(false, true, m, k, n, 1.0f, g, n, tw.data(), n, 1.0f, tx.grad(), k);
            if (tw.requires_grad())
                sgemm(true, false, k, n, m, 1.0f, tx.data(), k, g, n, 1.0f, tw.grad(), n);
        });
    }
    return out;
}

// Strict 2D matrix product, a[m,k] * b[k,n].
inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    check_dim(a.rank() == 2 && b.rank() == 2, "matmul: both operands must be rank 2");
    return linear(tape, a, b);
}

// Rows of `table` gathered by id. Output shape = ids_shape + [D].
inline Tensor embedding(Tape* tape, const Tensor& table, const std::vector<int32_t>& ids,
                        Shape ids_shape) {
    check_dim(table.rank() == 2, "embedding: table must be rank 2");
    check_dim(static_cast<int64_t>(ids.size()) == shape_numel(ids_shape),
              "embedding: ids do not match shape");
    int64_t v = table.dim(0), dd = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || id >= v) throw index_error("embedding: id out of range");
    Shape oshape = ids_shape;
    oshape.push_back(dd);
    bool rg = grad_wanted(tape, {&table});
    Tensor out = Tensor::uninit(oshape, rg);
    const float* pt = table.data();
    float* po = out.data();
    int64_t n = static_cast<int64_t>(ids.size());
    for (int64_t i = 0; i < n; i++)
        std::copy(pt + ids[i] * dd, pt + (ids[i] + 1) * dd, po + i * dd);
    if (rg) {
        tape->touch(table); tape->touch(out);
        Tensor tt = table, to = out;
        tape->record([tt, to, ids, dd]() mutable {
            const float* g = to.grad();
            float* gt = tt.grad();
            int64_t n = static_cast<int64_t>(ids.size());
            for (int64_t i = 0; i < n; i++) {
                float* dst = gt + ids[i] * dd;
                const float* src = g + i * dd;
                for (int64_t j = 0; j < dd; j++) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline Tensor reshape(Tape* tape, const Tensor& x, Shape shape) {
    bool rg = grad_wanted(tape, {&x});
    Tensor out = x.reshaped(std::move(shape));
    out.set_requires_grad(rg);
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to]() mutable {
            const float* g = to.grad();
            float* gx = tx.grad();
            int64_t n = tx.numel();
            for (int64_t i = 0; i < n; i++) gx[i] += g[i];
        });
    }
    return out;
}

// Permutes dimensions; perm[i] names the source dim of output dim i.
inline Tensor transpose(Tape* tape, const Tensor& x, const std::vector<int>& perm) {
    int64_t r = x.rank();
    check_dim(static_cast<int64_t>(perm.size()) == r, "transpose: perm rank mismatch");
    Shape oshape(r);
    std::vector<int64_t> xstr(r, 1), ostr(r, 1);
    for (int64_t i = r - 2; i >= 0; i--) xstr[i] = xstr[i + 1] * x.dim(i + 1);
    for (int64_t i = 0; i < r; i++) oshape[i] = x.dim(perm[i]);
    for (int64_t i = r - 2; i >= 0; i--) ostr[i] = ostr[i + 1] * oshape[i + 1];
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::uninit(oshape, rg);
    int64_t n = x.numel();
    const float* px = x.data();
    float* po = out.data();
    auto src_index = [r, ostr, oshape, xstr, perm](int64_t oi) {
        int64_t xi = 0;
        for (int64_t i = 0; i < r; i++) {
            int64_t c = (oi / ostr[i]) % oshape[i];
            xi += c * xstr[perm[i]];
        }
        return xi;
    };
    for (int64_t i = 0; i < n; i++) po[i] = px[src_index(i)];
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to, src_index, n]() mutable {
            const float* g = to.grad();
            float* gx = tx.grad();
            for (int64_t i = 0; i < n; i++) gx[src_index(i)] += g[i];
        });
    }
    return out;
}

inline Tensor sum_all(Tape* tape, const Tensor& x) {
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::zeros({1}, rg);
    const float* px = x.data();
    double acc = 0.0;
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; i++) acc += px[i];
    out.data()[0] = static_cast<float>(acc);
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to]() mutable {
            float g = to.grad()[0];
            float* gx = tx.grad();
            int64_t n = tx.numel();
            for (int64_t i = 0; i < n; i++) gx[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(Tape* tape, const Tensor& x) {
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::zeros({1}, rg);
    const float* px = x.data();
    double acc = 0.0;
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; i++) acc += px[i];
    out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to]() mutable {
            float g = to.grad()[0] / static_cast<float>(tx.numel());
            float* gx = tx.grad();
            int64_t n = tx.numel();
            for (int64_t i = 0; i < n; i++) gx[i] += g;
        });
    }
    return out;
}

// Mean squared error over all elements of two same-shape tensors.
inline Tensor mse(Tape* tape, const Tensor& a, const Tensor& b) {
    check_dim(a.shape() == b.shape(), "mse: shape mismatch");
    bool rg = grad_wanted(tape, {&a, &b});
    Tensor out = Tensor::zeros({1}, rg);
    const float* pa = a.data();
    const float* pb = b.data();
    int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; i++) {
        double c = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
        acc += c * c;
    }
    out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    if (rg) {
        tape->touch(a); tape->touch(b); tape->touch(out);
        Tensor ta = a, tb = b, to = out;
        tape->record([ta, tb, to]() mutable {
            int64_t n = ta.numel();
            float g = to.grad()[0] * 2.0f / static_cast<float>(n);
            const float* pa = ta.data();
            const float* pb = tb.data();
            bool wa = ta.requires_grad(), wb = tb.requires_grad();
            float* ga = wa ? ta.grad() : nullptr;
            float* gb = wb ? tb.grad() : nullptr;
            for (int64_t i = 0; i < n; i++) {
                float c = g * (pa[i] - pb[i]);
                if (wa) ga[i] += c;
                if (wb) gb[i] -= c;
            }
        });
    }
    return out;
}

// Mean token cross-entropy with fused log-softmax. Rows whose target equals
// ignore_index contribute nothing to the loss or the gradient.
inline Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int32_t>& targets,
                            int32_t ignore_index = -1) {
    check_dim(logits.rank() == 2, "cross_entropy: logits must be [rows, vocab]");
    int64_t rows = logits.dim(0), v = logits.dim(1);
    check_dim(static_cast<int64_t>(targets.size()) == rows, "cross_entropy: target count mismatch");
    int64_t counted = 0;
    for (int32_t t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || t >= v) throw index_error("cross_entropy: target out of range");
        counted++;
    }
    check(counted > 0, "cross_entropy: no counted targets");
    bool rg = grad_wanted(tape, {&logits});
    Tensor out = Tensor::zeros({1}, rg);
    // Log-normalizers are saved so backward can rebuild the softmax.
    Tensor norm = Tensor::zeros({rows, 2});  // max, log sum exp
    const float* pl = logits.data();
    float* pn = norm.data();
    double acc = 0.0;
    for (int64_t r = 0; r < rows; r++) {
        const float* lr = pl + r * v;
        float mx = lr[0];
        for (int64_t i = 1; i < v; i++) mx = std::max(mx, lr[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < v; i++) sum += std::exp(static_cast<double>(lr[i] - mx));
        float lse = static_cast<float>(std::log(sum));
        pn[r * 2] = mx;
        pn[r * 2 + 1] = lse;
        if (targets[r] != ignore_index) acc += static_cast<double>(mx + lse - lr[targets[r]]);
    }
    out.data()[0] = static_cast<float>(acc / static_cast<double>(counted));
    if (rg) {
        tape->touch(logits); tape->touch(out);
        Tensor tl = logits, to = out;
        tape->record([tl, to, norm, targets, ignore_index, rows, v, counted]() mutable {
            float g = to.grad()[0] / static_cast<float>(counted);
            const float* pl = tl.data();
            const float* pn = norm.data();
            float* gl = tl.grad();
            for (int64_t r = 0; r < rows; r++) {
                if (targets[r] == ignore_index) continue;
                const float* lr = pl + r * v;
                float* gr = gl + r * v;
                float mx = pn[r * 2], lse = pn[r * 2 + 1];
                for (int64_t i = 0; i < v; i++) {
                    float p = std::exp(lr[i] - mx - lse);
                    gr[i] += g * (p - (i == targets[r] ? 1.0f : 0.0f));
                }
            }
        });
    }
    return out;
}

enum class AttnMask {
    Causal,   // query i attends keys 0..i; key_lens ignored
    KeyLens,  // query attends keys 0..len[b]-1
    None,     // full attention
};

// Multi-head scaled dot-product attention over projected q/k/v. Masking is
// done by loop bounds, not additive penalties, so positions outside the mask
// cannot leak into the output even at f32 precision.
inline Tensor attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        int64_t heads, AttnMask mask, const std::vector<int32_t>& key_lens = {},
                        Tensor* probs_out = nullptr) {
    check_dim(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: q/k/v must be [B,T,D]");
    int64_t b = q.dim(0), tq = q.dim(1), dq = q.dim(2);
    int64_t tk = k.dim(1), dk = k.dim(2);
    check_dim(k.dim(0) == b && v.dim(0) == b, "attention: batch mismatch");
    check_dim(v.dim(1) == tk && dk == dq && v.dim(2) == dq, "attention: k/v shape mismatch");
    check_dim(dq % heads == 0, "attention: head count must divide model dim");
    if (mask == AttnMask::Causal) check_dim(tq == tk, "attention: causal needs square scores");
    if (mask == AttnMask::KeyLens) {
        check_dim(static_cast<int64_t>(key_lens.size()) == b, "attention: key_lens size mismatch");
        for (int32_t l : key_lens) check_dim(l >= 1 && l <= tk, "attention: key len out of range");
    }
    int64_t dh = dq / heads;
    float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    bool rg = grad_wanted(tape, {&q, &k, &v});
    Tensor out = Tensor::uninit({b, tq, dq}, rg);
    Tensor probs = Tensor::zeros({b, heads, tq, tk});
    const float* pq = q.data();
    const float* pk = k.data();
    const float* pv = v.data();
    float* po = out.data();
    float* pp = probs.data();
    auto kmax = [&](int64_t bi, int64_t i) -> int64_t {
        switch (mask) {
            case AttnMask::Causal: return i + 1;
            case AttnMask::KeyLens: return key_lens[bi];
            default: return tk;
        }
    };
    parallel_for(b * heads, [&](int64_t w0, int64_t w1) {
        std::vector<float> srow(static_cast<size_t>(tk));
        for (int64_t w = w0; w < w1; w++) {
            int64_t bi = w / heads, h = w % heads;
            const float* qb = pq + (bi * tq) * dq + h * dh;
            const float* kb = pk + (bi * tk) * dq + h * dh;
            const float* vb = pv + (bi * tk) * dq + h * dh;
            float* ob = po + (bi * tq) * dq + h * dh;
            float* pb = pp + (w * tq) * tk;
            for (int64_t i = 0; i < tq; i++) {
                int64_t km = kmax(bi, i);
                const float* qi = qb + i * dq;
                float mx = -std::numeric_limits<float>::infinity();
                for (int64_t j = 0; j < km; j++) {
                    float s = 0.0f;
                    const float* kj = kb + j * dq;
                    for (int64_t c = 0; c < dh; c++) s += qi[c] * kj[c];
                    srow[static_cast<size_t>(j)] = s * sc;
                    mx = std::max(mx, srow[static_cast<size_t>(j)]);
                }
                float sum = 0.0f;
                for (int64_t j = 0; j < km; j++) {
                    float e = std::exp(srow[static_cast<size_t>(j)] - mx);
                    srow[static_cast<size_t>(j)] = e;
                    sum += e;
                }
                float inv = 1.0f / sum;
                float* prow = pb + i * tk;
                for (int64_t j = 0; j < km; j++) prow[j] = srow[static_cast<size_t>(j)] * inv;
                float* oi = ob + i * dq;
                for (int64_t c = 0; c < dh; c++) oi[c] = 0.0f;
                for (int64_t j = 0; j < km; j++) {
                    float p = prow[j];
                    const float* vj = vb + j * dq;
                    for (int64_t c = 0; c < dh; c++) oi[c] += p * vj[c];
                }
            }
        }
    });
    if (probs_out) *probs_out = probs;
    if (rg) {
        tape->touch(q); tape->touch(k); tape->touch(v); tape->touch(out);
        Tensor tQ = q, tK = k, tV = v, tO = out;
        tape->record([tQ, tK, tV, tO, probs, heads, mask, key_lens, b, tq, tk, dh, sc]() mutable {
            int64_t dq = tQ.dim(2);
            const float* g = tO.grad();
            const float* pq = tQ.data();
            const float* pk = tK.data();
            const float* pv = tV.data();
            const float* pp = probs.data();
            bool wq = tQ.requires_grad(), wk = tK.requires_grad(), wv = tV.requires_grad();
            float* gq = wq ? tQ.grad() : nullptr;
            float* gk = wk ? tK.grad() : nullptr;
            float* gv = wv ? tV.grad() : nullptr;
            auto kmax = [&](int64_t bi, int64_t i) -> int64_t {
                switch (mask) {
                    case AttnMask::Causal: return i + 1;
                    case AttnMask::KeyLens: return key_lens[bi];
                    default: return tk;
                }
            };
            std::vector<float> dp(static_cast<size_t>(tk));
            for (int64_t w = 0; w < b * heads; w++) {
                int64_t bi = w / heads, h = w % heads;
                const float* qb = pq + (bi * tq) * dq + h * dh;
                const float* kb = pk + (bi * tk) * dq + h * dh;
                const float* vb = pv + (bi * tk) * dq + h * dh;
                const float* gb = g + (bi * tq) * dq + h * dh;
                const float* pb = pp + (w * tq) * tk;
                float* gqb = wq ? gq + (bi * tq) * dq + h * dh : nullptr;
                float* gkb = wk ? gk + (bi * tk) * dq + h * dh : nullptr;
                float* gvb = wv ? gv + (bi * tk) * dq + h * dh : nullptr;
                for (int64_t i = 0; i < tq; i++) {
                    int64_t km = kmax(bi, i);
                    const float* gi = gb + i * dq;
                    const float* prow = pb + i * tk;
                    float dot = 0.0f;
                    for (int64_t j = 0; j < km; j++) {
                        const float* vj = vb + j * dq;
                        float dpj = 0.0f;
                        for (int64_t c = 0; c < dh; c++) dpj += gi[c] * vj[c];
                        dp[static_cast<size_t>(j)] = dpj;
                        dot += prow[j] * dpj;
                        if (wv) {
                            float* gvj = gvb + j * dq;
                            float p = prow[j];
                            for (int64_t c = 0; c < dh; c++) gvj[c] += p * gi[c];
                        }
                    }
                    if (!wq && !wk) continue;
                    const float* qi = qb + i * dq;
                    float* gqi = wq ? gqb + i * dq : nullptr;
                    for (int64_t j = 0; j < km; j++) {
                        float ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * sc;
                        const float* kj = kb + j * dq;
                        if (wq)
                            for (int64_t c = 0; c < dh; c++) gqi[c] += ds * kj[c];
                        if (wk) {
                            float* gkj = gkb + j * dq;
                            for (int64_t c = 0; c < dh; c++) gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Mean over the first lens[b] token rows of x[B,T,D].
inline Tensor masked_mean_tokens(Tape* tape, const Tensor& x, const std::vector<int32_t>& lens) {
    check_dim(x.rank() == 3, "masked_mean_tokens: x must be [B,T,D]");
    int64_t b = x.dim(0), t = x.dim(1), dd = x.dim(2);
    check_dim(static_cast<int64_t>(lens.size()) == b, "masked_mean_tokens: lens size mismatch");
    for (int32_t l : lens) check_dim(l >= 1 && l <= t, "masked_mean_tokens: len out of range");
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::zeros({b, dd}, rg);
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < b; i++) {
        float inv = 1.0f / static_cast<float>(lens[i]);
        float* orow = po + i * dd;
        for (int64_t r = 0; r < lens[i]; r++) {
            const float* xr = px + (i * t + r) * dd;
            for (int64_t c = 0; c < dd; c++) orow[c] += xr[c];
        }
        for (int64_t c = 0; c < dd; c++) orow[c] *= inv;
    }
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to, lens, b, t, dd]() mutable {
            const float* g = to.grad();
            float* gx = tx.grad();
            for (int64_t i = 0; i < b; i++) {
                float inv = 1.0f / static_cast<float>(lens[i]);
                const float* grow = g + i * dd;
                for (int64_t r = 0; r < lens[i]; r++) {
                    float* gxr = gx + (i * t + r) * dd;
                    for (int64_t c = 0; c < dd; c++) gxr[c] += grow[c] * inv;
                }
            }
        });
    }
    return out;
}

// Row lens[b]-1 of x[B,T,D] per batch entry.
inline Tensor last_token(Tape* tape, const Tensor& x, const std::vector<int32_t>& lens) {
    check_dim(x.rank() == 3, "last_token: x must be [B,T,D]");
    int64_t b = x.dim(0), t = x.dim(1), dd = x.dim(2);
    check_dim(static_cast<int64_t>(lens.size()) == b, "last_token: lens size mismatch");
    for (int32_t l : lens) check_dim(l >= 1 && l <= t, "last_token: len out of range");
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::zeros({b, dd}, rg);
    const float* px = x.data();
    float* po = out.data();
    for (int64_t i = 0; i < b; i++)
        std::copy(px + (i * t + lens[i] - 1) * dd, px + (i * t + lens[i]) * dd, po + i * dd);
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to, lens, t, dd, b]() mutable {
            const float* g = to.grad();
            float* gx = tx.grad();
            for (int64_t i = 0; i < b; i++) {
                float* dst = gx + (i * t + lens[i] - 1) * dd;
                const float* src = g + i * dd;
                for (int64_t c = 0; c < dd; c++) dst[c] += src[c];
            }
        });
    }
    return out;
}

}  // namespace t2i
