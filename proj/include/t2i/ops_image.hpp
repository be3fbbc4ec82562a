#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "t2i/ops.hpp"

namespace t2i {

// Image tensors are NHWC: [B, H, W, C], channels contiguous. This makes the
// im2col matrix tall (rows = output positions) and the GEMM well shaped even
// at small channel counts.

namespace opdet {

// col[m, 9*Cin] for 3x3 kernels, pad 1, stride s; m = B*Ho*Wo.
// Column order is (ky, kx, ci), matching weight row order.
inline void im2col3x3(const float* x, int64_t b, int64_t h, int64_t w, int64_t c,
                      int64_t stride, int64_t ho, int64_t wo, float* col) {
    int64_t k = 9 * c;
    parallel_for(b * ho, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; r++) {
            int64_t bi = r / ho, oy = r % ho;
            for (int64_t ox = 0; ox < wo; ox++) {
                float* crow = col + ((bi * ho + oy) * wo + ox) * k;
                int64_t iy0 = oy * stride - 1, ix0 = ox * stride - 1;
                for (int64_t ky = 0; ky < 3; ky++) {
                    int64_t iy = iy0 + ky;
                    for (int64_t kx = 0; kx < 3; kx++) {
                        int64_t ix = ix0 + kx;
                        float* dst = crow + (ky * 3 + kx) * c;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            for (int64_t ci = 0; ci < c; ci++) dst[ci] = 0.0f;
                        } else {
                            const float* src = x + ((bi * h + iy) * w + ix) * c;
                            for (int64_t ci = 0; ci < c; ci++) dst[ci] = src[ci];
                        }
                    }
                }
            }
        }
    });
}

// Scatter-add of col gradients back to image layout. Parallel over batch:
// rows of one sample never touch another sample's pixels.
inline void col2im3x3(const float* col, int64_t b, int64_t h, int64_t w, int64_t c,
                      int64_t stride, int64_t ho, int64_t wo, float* gx) {
    int64_t k = 9 * c;
    parallel_for(b, [&](int64_t b0, int64_t b1) {
        for (int64_t bi = b0; bi < b1; bi++) {
            for (int64_t oy = 0; oy < ho; oy++) {
                for (int64_t ox = 0; ox < wo; ox++) {
                    const float* crow = col + ((bi * ho + oy) * wo + ox) * k;
                    int64_t iy0 = oy * stride - 1, ix0 = ox * stride - 1;
                    for (int64_t ky = 0; ky < 3; ky++) {
                        int64_t iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < 3; kx++) {
                            int64_t ix = ix0 + kx;
                            if (ix < 0 || ix >= w) continue;
                            const float* src = crow + (ky * 3 + kx) * c;
                            float* dst = gx + ((bi * h + iy) * w + ix) * c;
                            for (int64_t ci = 0; ci < c; ci++) dst[ci] += src[ci];
                        }
                    }
                }
            }
        }
    });
}

// One warm scratch buffer per thread for im2col matrices; growing it is the
// only allocation it ever repeats.
inline float* col_scratch(int64_t n) {
    static thread_local std::vector<float> buf;
    if (static_cast<int64_t>(buf.size()) < n) buf.resize(static_cast<size_t>(n));
    return buf.data();
}

}  // namespace opdet

// 3x3 convolution, pad 1, stride 1 or 2. x: [B,H,W,Cin], w: [9*Cin, Cout],
// bias: [Cout] or undefined. The im2col buffer is rebuilt in backward rather
// than kept alive on the tape.
inline Tensor conv3x3(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
                      int64_t stride = 1) {
    check_dim(x.rank() == 4, "conv3x3: x must be [B,H,W,C]");
    check_dim(w.rank() == 2 && w.dim(0) % 9 == 0, "conv3x3: w must be [9*Cin, Cout]");
    check_dim(stride == 1 || stride == 2, "conv3x3: stride must be 1 or 2");
    int64_t b = x.dim(0), h = x.dim(1), ww = x.dim(2), c = x.dim(3);
    check_dim(w.dim(0) == 9 * c, "conv3x3: Cin mismatch");
    int64_t co = w.dim(1);
    if (bias.defined()) check_dim(bias.numel() == co, "conv3x3: bias size mismatch");
    int64_t ho = (h + 2 - 3) / stride + 1;
    int64_t wo = (ww + 2 - 3) / stride + 1;
    int64_t m = b * ho * wo, k = 9 * c;
    bool rg = grad_wanted(tape, {&x, &w, &bias});
    Tensor out = Tensor::uninit({b, ho, wo, co}, rg);
    {
        float* col = opdet::col_scratch(m * k);
        opdet::im2col3x3(x.data(), b, h, ww, c, stride, ho, wo, col);
        sgemm(false, false, m, co, k, 1.0f, col, k, w.data(), co, 0.0f, out.data(), co);
    }
    if (bias.defined()) {
        const float* pb = bias.data();
        float* po = out.data();
        parallel_for(m, [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; r++) {
                float* row = po + r * co;
                for (int64_t j = 0; j < co; j++) row[j] += pb[j];
            }
        });
    }
    if (rg) {
        tape->touch(x); tape->touch(w); tape->touch(out);
        if (bias.defined()) tape->touch(bias);
        Tensor tx = x, tw = w, tb = bias, to = out;
        tape->record([tx, tw, tb, to, b, h, ww, c, stride, ho, wo, m, k, co]() mutable {
            const float* g = to.grad();
            if (tb.defined() && tb.requires_grad()) {
                float* gb = tb.grad();
                for (int64_t r = 0; r < m; r++) {
                    const float* row = g + r * co;
                    for (int64_t j = 0; j < co; j++) gb[j] += row[j];
                }
            }
            bool wx = tx.requires_grad(), wwt = tw.requires_grad();
            if (!wx && !wwt) return;
            float* col = opdet::col_scratch(m * k);
            if (wwt) {
                opdet::im2col3x3(tx.data(), b, h, ww, c, stride, ho, wo, col);
                sgemm(true, false, k, co, m, 1.0f, col, k, g, co, 1.0f, tw.grad(), co);
            }
            if (wx) {
                sgemm(false, true, m, k, co, 1.0f, g, co, tw.data(), co, 0.0f, col, k);
                opdet::col2im3x3(col, b, h, ww, c, stride, ho, wo, tx.grad());
            }
        });
    }
    return out;
}

inline Tensor upsample_nearest2x(Tape* tape, const Tensor& x) {
    check_dim(x.rank() == 4, "upsample_nearest2x: x must be [B,H,W,C]");
    int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    bool rg = grad_wanted(tape, {&x});
    Tensor out = Tensor::uninit({b, 2 * h, 2 * w, c}, rg);
    const float* px = x.data();
    float* po = out.data();
    parallel_for(b * h, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; r++) {
            int64_t bi = r / h, y = r % h;
            for (int64_t xx = 0; xx < w; xx++) {
                const float* src = px + ((bi * h + y) * w + xx) * c;
                for (int64_t dy = 0; dy < 2; dy++) {
                    for (int64_t dx = 0; dx < 2; dx++) {
                        float* dst = po + ((bi * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx) * c;
                        for (int64_t ci = 0; ci < c; ci++) dst[ci] = src[ci];
                    }
                }
            }
        }
    });
    if (rg) {
        tape->touch(x); tape->touch(out);
        Tensor tx = x, to = out;
        tape->record([tx, to, b, h, w, c]() mutable {
            const float* g = to.grad();
            float* gx = tx.grad();
            for (int64_t bi = 0; bi < b; bi++) {
                for (int64_t y = 0; y < h; y++) {
                    for (int64_t xx = 0; xx < w; xx++) {
                        float* dst = gx + ((bi * h + y) * w + xx) * c;
                        for (int64_t dy = 0; dy < 2; dy++) {
                            for (int64_t dx = 0; dx < 2; dx++) {
                                const float* src =
                                    g + ((bi * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx) * c;
                                for (int64_t ci = 0; ci < c; ci++) dst[ci] += src[ci];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Group norm over [H, W, C/G] per (batch, group), NHWC layout, affine over C.
inline Tensor group_norm(Tape* tape, const Tensor& x, int64_t groups, const Tensor& gamma,
                         const Tensor& beta, float eps = 1e-5f) {
    check_dim(x.rank() == 4, "group_norm: x must be [B,H,W,C]");
    int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    check_dim(groups >= 1 && c % groups == 0, "group_norm: groups must divide channels");
    check_dim(gamma.defined() && beta.defined(), "group_norm: affine params required");
    check_dim(gamma.numel() == c && beta.numel() == c, "group_norm: affine size mismatch");
    int64_t cg = c / groups;
    int64_t hw = h * w;
    int64_t n = hw * cg;  // population per (b, g)
    bool rg = grad_wanted(tape, {&x, &gamma, &beta});
    Tensor out = Tensor::uninit(x.shape(), rg);
    Tensor stats = Tensor::zeros({b * groups, 2});
    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    float* ps = stats.data();
    parallel_for(b * groups, [&](int64_t w0, int64_t w1) {
        for (int64_t wi = w0; wi < w1; wi++) {
            int64_t bi = wi / groups, gi = wi % groups;
            const float* xb = px + bi * hw * c + gi * cg;
            double mean = 0.0;
            for (int64_t p = 0; p < hw; p++) {
                const float* xp = xb + p * c;
                for (int64_t ci = 0; ci < cg; ci++) mean += xp[ci];
            }
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (int64_t p = 0; p < hw; p++) {
                const float* xp = xb + p * c;
                for (int64_t ci = 0; ci < cg; ci++) {
                    double d = xp[ci] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(n);
            float fm = static_cast<float>(mean);
            float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
            ps[wi * 2] = fm;
            ps[wi * 2 + 1] = inv;
            float* ob = po + bi * hw * c + gi * cg;
            for (int64_t p = 0; p < hw; p++) {
                const float* xp = xb + p * c;
                float* op = ob + p * c;
                for (int64_t ci = 0; ci < cg; ci++) {
                    float xh = (xp[ci] - fm) * inv;
                    op[ci] = xh * pg[gi * cg + ci] + pb[gi * cg + ci];
                }
            }
        }
    });
    if (rg) {
        tape->touch(x); tape->touch(gamma); tape->touch(beta); tape->touch(out);
        Tensor tx = x, tg = gamma, tb = beta, to = out;
        tape->record([tx, tg, tb, to, stats, b, groups, cg, hw, c, n]() mutable {
            const float* g = to.grad();
            const float* px = tx.data();
            const float* pg = tg.data();
            const float* ps = stats.data();
            bool wx = tx.requires_grad();
            bool wg = tg.requires_grad();
            bool wb = tb.requires_grad();
            float* gx = wx ? tx.grad() : nullptr;
            float* gg = wg ? tg.grad() : nullptr;
            float* gb = wb ? tb.grad() : nullptr;
            for (int64_t wi = 0; wi < b * groups; wi++) {
                int64_t bi = wi / groups, gi = wi % groups;
                const float* xb = px + bi * hw * c + gi * cg;
                const float* ob = g + bi * hw * c + gi * cg;
                float mean = ps[wi * 2], inv = ps[wi * 2 + 1];
                if (wg || wb) {
                    for (int64_t p = 0; p < hw; p++) {
                        const float* xp = xb + p * c;
                        const float* gp = ob + p * c;
                        for (int64_t ci = 0; ci < cg; ci++) {
                            float xh = (xp[ci] - mean) * inv;
                            if (wg) gg[gi * cg + ci] += gp[ci] * xh;
                            if (wb) gb[gi * cg + ci] += gp[ci];
                        }
                    }
                }
                if (!wx) continue;
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int64_t p = 0; p < hw; p++) {
                    const float* xp = xb + p * c;
                    const float* gp = ob + p * c;
                    for (int64_t ci = 0; ci < cg; ci++) {
                        float dxh = gp[ci] * pg[gi * cg + ci];
                        float xh = (xp[ci] - mean) * inv;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                }
                float m1 = static_cast<float>(sum_dxh / static_cast<double>(n));
                float m2 = static_cast<float>(sum_dxh_xh / static_cast<double>(n));
                float* gxb = gx + bi * hw * c + gi * cg;
                for (int64_t p = 0; p < hw; p++) {
                    const float* xp = xb + p * c;
                    const float* gp = ob + p * c;
                    float* gxp = gxb + p * c;
                    for (int64_t ci = 0; ci < cg; ci++) {
                        float dxh = gp[ci] * pg[gi * cg + ci];
                        float xh = (xp[ci] - mean) * inv;
                        gxp[ci] += inv * (dxh - m1 - xh * m2);
                    }
                }
            }
        });
    }
    return out;
}

// Concatenation along the last (channel) dimension.
inline Tensor concat_last(Tape* tape, const Tensor& a, const Tensor& b) {
    check_dim(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
    for (int64_t i = 0; i + 1 < a.rank(); i++)
        check_dim(a.dim(i) == b.dim(i), "concat_last: leading dims differ");
    int64_t ca = a.dim(-1), cb = b.dim(-1);
    int64_t rows = a.numel() / ca;
    Shape oshape = a.shape();
    oshape.back() = ca + cb;
    bool rg = grad_wanted(tape, {&a, &b});
    Tensor out = Tensor::uninit(oshape, rg);
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    parallel_for(rows, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; r++) {
            std::copy(pa + r * ca, pa + (r + 1) * ca, po + r * (ca + cb));
            std::copy(pb + r * cb, pb + (r + 1) * cb, po + r * (ca + cb) + ca);
        }
    });
    if (rg) {
        tape->touch(a); tape->touch(b); tape->touch(out);
        Tensor ta = a, tb = b, to = out;
        tape->record([ta, tb, to, rows, ca, cb]() mutable {
            const float* g = to.grad();
            bool wa = ta.requires_grad(), wb = tb.requires_grad();
            float* ga = wa ? ta.grad() : nullptr;
            float* gb = wb ? tb.grad() : nullptr;
            for (int64_t r = 0; r < rows; r++) {
                const float* gr = g + r * (ca + cb);
                if (wa)
                    for (int64_t i = 0; i < ca; i++) ga[r * ca + i] += gr[i];
                if (wb)
                    for (int64_t i = 0; i < cb; i++) gb[r * cb + i] += gr[ca + i];
            }
        });
    }
    return out;
}

}  // namespace t2i
