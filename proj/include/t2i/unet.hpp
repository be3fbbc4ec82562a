#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "t2i/extraction.hpp"
#include "t2i/ops.hpp"
#include "t2i/ops_image.hpp"
#include "t2i/rng.hpp"

namespace t2i {

struct UNetConfig {
    int64_t image_size = 32;
    int64_t in_channels = 3;
    int64_t base = 32;
    std::vector<int64_t> mults = {1, 2, 4};
    std::vector<int64_t> attn_res = {16, 8};  // resolutions carrying cross-attention
    int64_t heads = 4;
    int64_t d_c = 64;   // conditioning width after projection
    int64_t d_t = 128;  // timestep embedding width
    int64_t gn_groups = 8;
    bool pooled = false;

    int64_t levels() const { return static_cast<int64_t>(mults.size()); }
    int64_t channels(int64_t level) const { return base * mults[static_cast<size_t>(level)]; }
    int64_t resolution(int64_t level) const { return image_size >> level; }

    bool attn_at(int64_t level) const {
        for (int64_t r : attn_res)
            if (r == resolution(level)) return true;
        return false;
    }

    void validate() const {
        if (levels() < 1) throw config_error("unet needs at least one level");
        if (image_size % (1ll << (levels() - 1)) != 0)
            throw config_error("image size must be divisible by 2^(levels-1)");
        if (d_t % 2 != 0) throw config_error("timestep width must be even");
        if (base % gn_groups != 0)
            throw config_error("base channels must be divisible by the norm group count");
        for (int64_t r : attn_res) {
            bool found = false;
            for (int64_t l = 0; l < levels(); l++) found = found || resolution(l) == r;
            if (!found) throw config_error("attention resolution " + std::to_string(r) +
                                           " is not a level resolution");
            for (int64_t l = 0; l < levels(); l++)
                if (resolution(l) == r && channels(l) % heads != 0)
                    throw config_error("head count must divide channels at attention sites");
        }
    }

    std::string digest() const {
        std::string s = "unet|s" + std::to_string(image_size) + "|b" + std::to_string(base) + "|m";
        for (int64_t m : mults) s += std::to_string(m) + ",";
        s += "|a";
        for (int64_t r : attn_res) s += std::to_string(r) + ",";
        s += "|h" + std::to_string(heads) + "|dc" + std::to_string(d_c) + "|dt" +
             std::to_string(d_t) + "|g" + std::to_string(gn_groups) + (pooled ? "|pool" : "");
        return s;
    }

    std::string to_text() const {
        auto list = [](const std::vector<int64_t>& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); i++) s += (i ? "," : "") + std::to_string(v[i]);
            return s;
        };
        return "size=" + std::to_string(image_size) + " ch=" + std::to_string(in_channels) +
               " base=" + std::to_string(base) + " mults=" + list(mults) + " attn=" +
               list(attn_res) + " heads=" + std::to_string(heads) + " dc=" + std::to_string(d_c) +
               " dt=" + std::to_string(d_t) + " groups=" + std::to_string(gn_groups) +
               " pooled=" + (pooled ? "1" : "0");
    }

    static UNetConfig from_text(const std::string& line) {
        auto ints = [](const std::string& s) {
            std::vector<int64_t> v;
            size_t p = 0;
            while (p < s.size()) {
                size_t q = s.find(',', p);
                if (q == std::string::npos) q = s.size();
                v.push_back(std::stoll(s.substr(p, q - p)));
                p = q + 1;
            }
            return v;
        };
        UNetConfig cfg;
        std::istringstream in(line);
        std::string tok;
        while (in >> tok) {
            size_t eq = tok.find('=');
            if (eq == std::string::npos) throw parse_error("bad unet config token: " + tok);
            std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "size") cfg.image_size = std::stoll(val);
            else if (key == "ch") cfg.in_channels = std::stoll(val);
            else if (key == "base") cfg.base = std::stoll(val);
            else if (key == "mults") cfg.mults = ints(val);
            else if (key == "attn") cfg.attn_res = ints(val);
            else if (key == "heads") cfg.heads = std::stoll(val);
            else if (key == "dc") cfg.d_c = std::stoll(val);
            else if (key == "dt") cfg.d_t = std::stoll(val);
            else if (key == "groups") cfg.gn_groups = std::stoll(val);
            else if (key == "pooled") cfg.pooled = val == "1";
            else throw parse_error("unknown unet config key: " + key);
        }
        cfg.validate();
        return cfg;
    }
};

// One captured cross-attention site: head-averaged probabilities, one row per
// spatial position, one column per context token.
struct AttentionRecord {
    int64_t timestep = 0;
    int64_t res = 0;  // spatial side length at the site
    Tensor probs;     // (res*res, T)
};

namespace unetdet {

inline Tensor param(Rng& rng, Shape shape, float std) {
    return std > 0.0f ? Tensor::randn(rng, shape, std, true) : Tensor::zeros(shape, true);
}

inline float fan_std(int64_t fan_in) { return std::sqrt(1.0f / static_cast<float>(fan_in)); }

// silu(gn(x)) -> conv -> +t-emb -> silu(gn) -> conv, around a skip. The
// second conv starts at zero so the block begins as the identity map.
struct ResBlock {
    Tensor gn1_g, gn1_b, conv1_w, conv1_b;
    Tensor temb_w, temb_b;
    Tensor gn2_g, gn2_b, conv2_w, conv2_b;
    Tensor skip_w;  // 1x1 channel map, undefined when cin == cout

    static ResBlock init(Rng& rng, int64_t cin, int64_t cout, int64_t d_t) {
        ResBlock r;
        r.gn1_g = Tensor::full({cin}, 1.0f, true);
        r.gn1_b = Tensor::zeros({cin}, true);
        r.conv1_w = param(rng, {9 * cin, cout}, fan_std(9 * cin));
        r.conv1_b = Tensor::zeros({cout}, true);
        r.temb_w = param(rng, {d_t, cout}, fan_std(d_t));
        r.temb_b = Tensor::zeros({cout}, true);
        r.gn2_g = Tensor::full({cout}, 1.0f, true);
        r.gn2_b = Tensor::zeros({cout}, true);
        r.conv2_w = Tensor::zeros({9 * cout, cout}, true);
        r.conv2_b = Tensor::zeros({cout}, true);
        if (cin != cout) r.skip_w = param(rng, {cin, cout}, fan_std(cin));
        return r;
    }

    Tensor forward(Tape* tape, const Tensor& x, const Tensor& temb, int64_t groups) const {
        int64_t b = x.dim(0), cout = conv1_w.dim(1);
        Tensor h = group_norm(tape, x, groups, gn1_g, gn1_b);
        h = silu(tape, h);
        h = conv3x3(tape, h, conv1_w, conv1_b);
        Tensor tc = add(tape, linear(tape, silu(tape, temb), temb_w), temb_b);
        h = add(tape, h, reshape(tape, tc, {b, 1, 1, cout}));
        h = group_norm(tape, h, groups, gn2_g, gn2_b);
        h = silu(tape, h);
        h = conv3x3(tape, h, conv2_w, conv2_b);
        Tensor s = skip_w.defined() ? linear(tape, x, skip_w) : x;
        return add(tape, h, s);
    }

    void collect(const std::string& p, std::vector<std::pair<std::string, Tensor>>& out) const {
        out.emplace_back(p + ".gn1.g", gn1_g);
        out.emplace_back(p + ".gn1.b", gn1_b);
        out.emplace_back(p + ".conv1.w", conv1_w);
        out.emplace_back(p + ".conv1.b", conv1_b);
        out.emplace_back(p + ".temb.w", temb_w);
        out.emplace_back(p + ".temb.b", temb_b);
        out.emplace_back(p + ".gn2.g", gn2_g);
        out.emplace_back(p + ".gn2.b", gn2_b);
        out.emplace_back(p + ".conv2.w", conv2_w);
        out.emplace_back(p + ".conv2.b", conv2_b);
        if (skip_w.defined()) out.emplace_back(p + ".skip.w", skip_w);
    }
};

// Image positions attend over context tokens. The output projection starts
// at zero so conditioning fades in rather than perturbing a fresh model.
struct CrossAttn {
    Tensor gn_g, gn_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static CrossAttn init(Rng& rng, int64_t c, int64_t d_c) {
        CrossAttn a;
        a.gn_g = Tensor::full({c}, 1.0f, true);
        a.gn_b = Tensor::zeros({c}, true);
        a.wq = param(rng, {c, c}, fan_std(c));
        a.bq = Tensor::zeros({c}, true);
        a.wk = param(rng, {d_c, c}, fan_std(d_c));
        a.bk = Tensor::zeros({c}, true);
        a.wv = param(rng, {d_c, c}, fan_std(d_c));
        a.bv = Tensor::zeros({c}, true);
        a.wo = Tensor::zeros({c, c}, true);
        a.bo = Tensor::zeros({c}, true);
        return a;
    }

    Tensor forward(Tape* tape, const Tensor& x, const CondBatch& cond, int64_t heads,
                   int64_t groups, Tensor* probs_out = nullptr) const {
        int64_t b = x.dim(0), hh = x.dim(1), ww = x.dim(2), c = x.dim(3);
        Tensor h = group_norm(tape, x, groups, gn_g, gn_b);
        Tensor q = add(tape, linear(tape, reshape(tape, h, {b, hh * ww, c}), wq), bq);
        Tensor k = add(tape, linear(tape, cond.tokens, wk), bk);
        Tensor v = add(tape, linear(tape, cond.tokens, wv), bv);
        Tensor a = attention(tape, q, k, v, heads, AttnMask::KeyLens, cond.lens, probs_out);
        Tensor o = add(tape, linear(tape, a, wo), bo);
        return add(tape, x, reshape(tape, o, {b, hh, ww, c}));
    }

    void collect(const std::string& p, std::vector<std::pair<std::string, Tensor>>& out) const {
        out.emplace_back(p + ".gn.g", gn_g);
        out.emplace_back(p + ".gn.b", gn_b);
        out.emplace_back(p + ".wq", wq);
        out.emplace_back(p + ".bq", bq);
        out.emplace_back(p + ".wk", wk);
        out.emplace_back(p + ".bk", bk);
        out.emplace_back(p + ".wv", wv);
        out.emplace_back(p + ".bv", bv);
        out.emplace_back(p + ".wo", wo);
        out.emplace_back(p + ".bo", bo);
    }
};

// Spatial positions attend over each other within one feature map, giving
// the layout a global view at the attention resolutions. The output
// projection starts at zero so the block begins as the identity map.
struct SelfAttn {
    Tensor gn_g, gn_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static SelfAttn init(Rng& rng, int64_t c) {
        SelfAttn a;
        a.gn_g = Tensor::full({c}, 1.0f, true);
        a.gn_b = Tensor::zeros({c}, true);
        a.wq = param(rng, {c, c}, fan_std(c));
        a.bq = Tensor::zeros({c}, true);
        a.wk = param(rng, {c, c}, fan_std(c));
        a.bk = Tensor::zeros({c}, true);
        a.wv = param(rng, {c, c}, fan_std(c));
        a.bv = Tensor::zeros({c}, true);
        a.wo = Tensor::zeros({c, c}, true);
        a.bo = Tensor::zeros({c}, true);
        return a;
    }

    Tensor forward(Tape* tape, const Tensor& x, int64_t heads, int64_t groups) const {
        int64_t b = x.dim(0), hh = x.dim(1), ww = x.dim(2), c = x.dim(3);
        Tensor h = reshape(tape, group_norm(tape, x, groups, gn_g, gn_b), {b, hh * ww, c});
        Tensor q = add(tape, linear(tape, h, wq), bq);
        Tensor k = add(tape, linear(tape, h, wk), bk);
        Tensor v = add(tape, linear(tape, h, wv), bv);
        Tensor a = attention(tape, q, k, v, heads, AttnMask::None);
        Tensor o = add(tape, linear(tape, a, wo), bo);
        return add(tape, x, reshape(tape, o, {b, hh, ww, c}));
    }

    void collect(const std::string& p, std::vector<std::pair<std::string, Tensor>>& out) const {
        out.emplace_back(p + ".gn.g", gn_g);
        out.emplace_back(p + ".gn.b", gn_b);
        out.emplace_back(p + ".wq", wq);
        out.emplace_back(p + ".bq", bq);
        out.emplace_back(p + ".wk", wk);
        out.emplace_back(p + ".bk", bk);
        out.emplace_back(p + ".wv", wv);
        out.emplace_back(p + ".bv", bv);
        out.emplace_back(p + ".wo", wo);
        out.emplace_back(p + ".bo", bo);
    }
};

}  // namespace unetdet

// Noise-prediction U-Net over channels-last images: per-level residual
// blocks with timestep modulation, cross-attention at the configured
// resolutions on both paths and at the bottleneck, skip concatenation, and
// a zero-initialized output head.
struct UNet {
    UNetConfig cfg;
    Tensor conv_in_w, conv_in_b;
    Tensor tm1_w, tm1_b, tm2_w, tm2_b;
    Tensor pool_w;  // pooled -> d_t map, zero-initialized; defined only when cfg.pooled
    std::vector<unetdet::ResBlock> down_res;
    std::vector<unetdet::SelfAttn> down_self;   // aligned with levels, unused slots undefined
    std::vector<unetdet::CrossAttn> down_attn;  // aligned with levels, unused slots undefined
    std::vector<Tensor> down_w, down_b;         // stride-2 convs between levels
    unetdet::ResBlock mid1, mid2;
    unetdet::SelfAttn mid_self;
    unetdet::CrossAttn mid_attn;
    std::vector<unetdet::ResBlock> up_res;
    std::vector<unetdet::SelfAttn> up_self;
    std::vector<unetdet::CrossAttn> up_attn;
    std::vector<Tensor> up_w, up_b;  // post-upsample channel maps
    Tensor out_gn_g, out_gn_b, out_w, out_b;

    static UNet init(const UNetConfig& cfg, uint64_t seed) {
        cfg.validate();
        using unetdet::CrossAttn;
        using unetdet::ResBlock;
        using unetdet::SelfAttn;
        using unetdet::fan_std;
        using unetdet::param;
        Rng rng = substream(seed, "unet-init");
        UNet m;
        m.cfg = cfg;
        int64_t levels = cfg.levels();
        int64_t c0 = cfg.channels(0);
        m.conv_in_w = param(rng, {9 * cfg.in_channels, c0}, fan_std(9 * cfg.in_channels));
        m.conv_in_b = Tensor::zeros({c0}, true);
        m.tm1_w = param(rng, {cfg.d_t, cfg.d_t}, fan_std(cfg.d_t));
        m.tm1_b = Tensor::zeros({cfg.d_t}, true);
        m.tm2_w = param(rng, {cfg.d_t, cfg.d_t}, fan_std(cfg.d_t));
        m.tm2_b = Tensor::zeros({cfg.d_t}, true);
        if (cfg.pooled) m.pool_w = Tensor::zeros({cfg.d_c, cfg.d_t}, true);
        m.down_res.resize(static_cast<size_t>(levels));
        m.down_self.resize(static_cast<size_t>(levels));
        m.down_attn.resize(static_cast<size_t>(levels));
        m.up_res.resize(static_cast<size_t>(levels));
        m.up_self.resize(static_cast<size_t>(levels));
        m.up_attn.resize(static_cast<size_t>(levels));
        for (int64_t i = 0; i < levels; i++) {
            int64_t cin = i == 0 ? c0 : cfg.channels(i - 1);
            int64_t ci = cfg.channels(i);
            m.down_res[static_cast<size_t>(i)] = ResBlock::init(rng, cin, ci, cfg.d_t);
            if (cfg.attn_at(i)) {
                m.down_self[static_cast<size_t>(i)] = SelfAttn::init(rng, ci);
                m.down_attn[static_cast<size_t>(i)] = CrossAttn::init(rng, ci, cfg.d_c);
            }
            if (i + 1 < levels) {
                m.down_w.push_back(param(rng, {9 * ci, ci}, fan_std(9 * ci)));
                m.down_b.push_back(Tensor::zeros({ci}, true));
            }
        }
        int64_t ctop = cfg.channels(levels - 1);
        m.mid1 = ResBlock::init(rng, ctop, ctop, cfg.d_t);
        if (cfg.attn_at(levels - 1)) {
            m.mid_self = SelfAttn::init(rng, ctop);
            m.mid_attn = CrossAttn::init(rng, ctop, cfg.d_c);
        }
        m.mid2 = ResBlock::init(rng, ctop, ctop, cfg.d_t);
        for (int64_t i = levels - 1; i >= 0; i--) {
            int64_t ci = cfg.channels(i);
            m.up_res[static_cast<size_t>(i)] = ResBlock::init(rng, 2 * ci, ci, cfg.d_t);
            if (cfg.attn_at(i)) {
                m.up_self[static_cast<size_t>(i)] = SelfAttn::init(rng, ci);
                m.up_attn[static_cast<size_t>(i)] = CrossAttn::init(rng, ci, cfg.d_c);
            }
            if (i > 0) {
                int64_t cprev = cfg.channels(i - 1);
                m.up_w.push_back(param(rng, {9 * ci, cprev}, fan_std(9 * ci)));
                m.up_b.push_back(Tensor::zeros({cprev}, true));
            }
        }
        m.out_gn_g = Tensor::full({c0}, 1.0f, true);
        m.out_gn_b = Tensor::zeros({c0}, true);
        m.out_w = Tensor::zeros({9 * c0, cfg.in_channels}, true);
        m.out_b = Tensor::zeros({cfg.in_channels}, true);
        return m;
    }

    // Sinusoidal position code for integer timesteps, width d_t.
    static void timestep_code(int64_t t, float* out, int64_t d) {
        int64_t half = d / 2;
        for (int64_t i = 0; i < half; i++) {
            double f = half == 1 ? 1.0
                                 : std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                            static_cast<double>(half - 1));
            out[i] = static_cast<float>(std::sin(static_cast<double>(t) * f));
            out[half + i] = static_cast<float>(std::cos(static_cast<double>(t) * f));
        }
    }

    // Pooled conditioning enters as an additive shift on the timestep
    // embedding through a trainable map that starts at zero.
    Tensor inject_pooled(Tape* tape, const Tensor& pooled, const Tensor& temb) const {
        if (!cfg.pooled) throw config_error("pooled conditioning is disabled in this model");
        return add(tape, temb, linear(tape, pooled, pool_w));
    }

    Tensor forward(Tape* tape, const Tensor& x, const std::vector<int64_t>& t_ids,
                   const CondBatch& cond, std::vector<AttentionRecord>* capture = nullptr) const {
        check_dim(x.rank() == 4 && x.dim(1) == cfg.image_size && x.dim(2) == cfg.image_size &&
                      x.dim(3) == cfg.in_channels,
                  "unet: x must be [B, size, size, C]");
        int64_t b = x.dim(0);
        check_dim(static_cast<int64_t>(t_ids.size()) == b, "unet: one timestep per sample");
        check_dim(cond.tokens.rank() == 3 && cond.tokens.dim(0) == b &&
                      cond.tokens.dim(2) == cfg.d_c,
                  "unet: conditioning tokens must be [B, T, d_c]");
        check_dim(static_cast<int64_t>(cond.lens.size()) == b, "unet: one length per sample");
        if (cond.pooled.defined() && !cfg.pooled)
            throw config_error("pooled conditioning supplied to a model without the pooled flag");
        if (!cond.pooled.defined() && cfg.pooled)
            throw config_error("this model requires pooled conditioning");

        Tensor code = Tensor::zeros({b, cfg.d_t});
        for (int64_t i = 0; i < b; i++)
            timestep_code(t_ids[static_cast<size_t>(i)], code.data() + i * cfg.d_t, cfg.d_t);
        Tensor temb = add(tape, linear(tape, code, tm1_w), tm1_b);
        temb = add(tape, linear(tape, silu(tape, temb), tm2_w), tm2_b);
        if (cfg.pooled) temb = inject_pooled(tape, cond.pooled, temb);

        auto record = [&](Tensor& probs, int64_t res) {
            if (!capture) return;
            check_dim(b == 1, "attention capture expects a single-sample batch");
            int64_t heads = cfg.heads, tq = probs.dim(2), tk = probs.dim(3);
            AttentionRecord rec;
            rec.timestep = t_ids[0];
            rec.res = res;
            rec.probs = Tensor::zeros({tq, tk});
            for (int64_t h = 0; h < heads; h++)
                for (int64_t i = 0; i < tq * tk; i++)
                    rec.probs.data()[i] += probs.data()[h * tq * tk + i];
            for (int64_t i = 0; i < tq * tk; i++)
                rec.probs.data()[i] /= static_cast<float>(heads);
            capture->push_back(std::move(rec));
        };
        auto attn_site = [&](const unetdet::CrossAttn& site, Tensor h, int64_t res) {
            Tensor probs;
            Tensor out = site.forward(tape, h, cond, cfg.heads, cfg.gn_groups,
                                      capture ? &probs : nullptr);
            if (capture) record(probs, res);
            return out;
        };

        int64_t levels = cfg.levels();
        Tensor h = conv3x3(tape, x, conv_in_w, conv_in_b);
        std::vector<Tensor> skips;
        for (int64_t i = 0; i < levels; i++) {
            h = down_res[static_cast<size_t>(i)].forward(tape, h, temb, cfg.gn_groups);
            if (cfg.attn_at(i)) {
                h = down_self[static_cast<size_t>(i)].forward(tape, h, cfg.heads, cfg.gn_groups);
                h = attn_site(down_attn[static_cast<size_t>(i)], h, cfg.resolution(i));
            }
            skips.push_back(h);
            if (i + 1 < levels)
                h = conv3x3(tape, h, down_w[static_cast<size_t>(i)], down_b[static_cast<size_t>(i)], 2);
        }
        h = mid1.forward(tape, h, temb, cfg.gn_groups);
        if (cfg.attn_at(levels - 1)) {
            h = mid_self.forward(tape, h, cfg.heads, cfg.gn_groups);
            h = attn_site(mid_attn, h, cfg.resolution(levels - 1));
        }
        h = mid2.forward(tape, h, temb, cfg.gn_groups);
        for (int64_t i = levels - 1; i >= 0; i--) {
            h = concat_last(tape, h, skips[static_cast<size_t>(i)]);
            h = up_res[static_cast<size_t>(i)].forward(tape, h, temb, cfg.gn_groups);
            if (cfg.attn_at(i)) {
                h = up_self[static_cast<size_t>(i)].forward(tape, h, cfg.heads, cfg.gn_groups);
                h = attn_site(up_attn[static_cast<size_t>(i)], h, cfg.resolution(i));
            }
            if (i > 0) {
                h = upsample_nearest2x(tape, h);
                size_t j = static_cast<size_t>(levels - 1 - i);
                h = conv3x3(tape, h, up_w[j], up_b[j]);
            }
        }
        h = silu(tape, group_norm(tape, h, cfg.gn_groups, out_gn_g, out_gn_b));
        return conv3x3(tape, h, out_w, out_b);
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("conv_in.w", conv_in_w);
        out.emplace_back("conv_in.b", conv_in_b);
        out.emplace_back("time.w1", tm1_w);
        out.emplace_back("time.b1", tm1_b);
        out.emplace_back("time.w2", tm2_w);
        out.emplace_back("time.b2", tm2_b);
        if (pool_w.defined()) out.emplace_back("pool.w", pool_w);
        for (int64_t i = 0; i < cfg.levels(); i++) {
            std::string p = "down" + std::to_string(i);
            down_res[static_cast<size_t>(i)].collect(p + ".res", out);
            if (cfg.attn_at(i)) {
                down_self[static_cast<size_t>(i)].collect(p + ".self", out);
                down_attn[static_cast<size_t>(i)].collect(p + ".attn", out);
            }
            if (i + 1 < cfg.levels()) {
                out.emplace_back(p + ".down.w", down_w[static_cast<size_t>(i)]);
                out.emplace_back(p + ".down.b", down_b[static_cast<size_t>(i)]);
            }
        }
        mid1.collect("mid.res1", out);
        if (cfg.attn_at(cfg.levels() - 1)) {
            mid_self.collect("mid.self", out);
            mid_attn.collect("mid.attn", out);
        }
        mid2.collect("mid.res2", out);
        for (int64_t i = cfg.levels() - 1; i >= 0; i--) {
            std::string p = "up" + std::to_string(i);
            up_res[static_cast<size_t>(i)].collect(p + ".res", out);
            if (cfg.attn_at(i)) {
                up_self[static_cast<size_t>(i)].collect(p + ".self", out);
                up_attn[static_cast<size_t>(i)].collect(p + ".attn", out);
            }
            if (i > 0) {
                size_t j = static_cast<size_t>(cfg.levels() - 1 - i);
                out.emplace_back(p + ".up.w", up_w[j]);
                out.emplace_back(p + ".up.b", up_b[j]);
            }
        }
        out.emplace_back("out.gn.g", out_gn_g);
        out.emplace_back("out.gn.b", out_gn_b);
        out.emplace_back("out.w", out_w);
        out.emplace_back("out.b", out_b);
        return out;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t.numel();
        return n;
    }
};

}  // namespace t2i
