#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "t2i/optim.hpp"
#include "t2i/schedule.hpp"
#include "t2i/unet.hpp"

namespace t2i {

struct TrainStats {
    int64_t seen = 0;
    int64_t dropped = 0;
};

// Per-sample caption drop: dropped captions become the empty caption, which
// the conditioning pipeline serves as the null condition.
inline std::vector<std::string> apply_caption_drop(std::vector<std::string> captions,
                                                   float drop_prob, Rng& rng,
                                                   TrainStats* stats = nullptr) {
    check(drop_prob >= 0.0f && drop_prob <= 1.0f, "drop probability must be in [0, 1]");
    for (auto& c : captions) {
        bool drop = rng.uniform() < drop_prob;
        if (stats) {
            stats->seen++;
            if (drop) stats->dropped++;
        }
        if (drop) c.clear();
    }
    return captions;
}

// One optimizer step of noise-prediction training. Draw order per step:
// drop decisions, then timesteps, then noise. Gradients reach the U-Net and
// the conditioning projection; the encoder behind the pipeline is frozen.
inline float train_step(Tape& tape, const UNet& model, const ConditioningPipeline& cond,
                        const NoiseSchedule& sched, const Tensor& x0,
                        const std::vector<std::string>& captions, float drop_prob, Rng& rng,
                        AdamW& opt, TrainStats* stats = nullptr) {
    int64_t b = x0.dim(0);
    check_dim(static_cast<int64_t>(captions.size()) == b, "train_step: one caption per image");
    for (int64_t i = 0; i < x0.numel(); i++)
        if (x0.data()[i] < -1.0f || x0.data()[i] > 1.0f)
            throw data_error("train_step: images must lie in [-1, 1]");
    std::vector<std::string> used = apply_caption_drop(captions, drop_prob, rng, stats);
    std::vector<int64_t> t(static_cast<size_t>(b));
    for (auto& ti : t) ti = static_cast<int64_t>(rng.below(static_cast<uint64_t>(sched.t_diff)));
    Tensor eps = Tensor::zeros(x0.shape());
    for (int64_t i = 0; i < eps.numel(); i++) eps.data()[i] = rng.gaussian();
    Tensor xt = q_sample_batch(x0, t, eps, sched);
    tape.reset();
    CondBatch cb = cond.batch(&tape, used);
    Tensor pred = model.forward(&tape, xt, t, cb);
    Tensor loss = mse(&tape, pred, eps);
    tape.backward(loss);
    opt.step();
    return loss.item();
}

// Guided noise prediction: eps_u + w (eps_c - eps_u) from exactly two model
// evaluations, with no rescaling of the result. The w = 0 and w = 1 cases
// return the respective branch untouched.
inline Tensor cfg_predict(const UNet& model, const Tensor& x_t, int64_t t, const CondBatch& cond,
                          const CondBatch& null_cond, float w) {
    int64_t b = x_t.dim(0);
    std::vector<int64_t> ts(static_cast<size_t>(b), t);
    Tensor eu = model.forward(nullptr, x_t, ts, null_cond);
    Tensor ec = model.forward(nullptr, x_t, ts, cond);
    if (w == 0.0f) return eu;
    if (w == 1.0f) return ec;
    Tensor out = Tensor::zeros(x_t.shape());
    const float* pu = eu.data();
    const float* pc = ec.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); i++) po[i] = pu[i] + w * (pc[i] - pu[i]);
    return out;
}

// Sampling from pure noise. steps = 0 (or the full step count) runs the
// ancestral chain with posterior noise; any smaller count runs the
// deterministic strided variant. Output is the raw final prediction; nothing
// is clipped here. The observer, when given, sees (t, x_t) at every visited
// timestep before the update; it must not mutate the state.
using SampleObserver = std::function<void(int64_t, const Tensor&)>;

inline Tensor ddpm_sample(const UNet& model, const CondBatch& cond, const CondBatch& null_cond,
                          const NoiseSchedule& sched, Rng& rng, float w, int64_t steps = 0,
                          const SampleObserver* observer = nullptr) {
    if (steps < 0 || steps > sched.t_diff) throw config_error("sampler steps out of range");
    int64_t b = static_cast<int64_t>(cond.lens.size());
    Tensor x = Tensor::zeros({b, model.cfg.image_size, model.cfg.image_size,
                              model.cfg.in_channels});
    for (int64_t i = 0; i < x.numel(); i++) x.data()[i] = rng.gaussian();

    if (steps == 0 || steps == sched.t_diff) {
        for (int64_t t = sched.t_diff - 1; t >= 0; t--) {
            if (observer) (*observer)(t, x);
            Tensor eps = cfg_predict(model, x, t, cond, null_cond, w);
            double a = sched.alpha[static_cast<size_t>(t)];
            double ab = sched.alpha_bar[static_cast<size_t>(t)];
            double beta = sched.beta[static_cast<size_t>(t)];
            float c1 = static_cast<float>(1.0 / std::sqrt(a));
            float c2 = static_cast<float>(beta / std::sqrt(1.0 - ab));
            float sd = 0.0f;
            if (t > 0) {
                double ab_prev = sched.alpha_bar[static_cast<size_t>(t - 1)];
                sd = static_cast<float>(std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)));
            }
            float* px = x.data();
            const float* pe = eps.data();
            for (int64_t i = 0; i < x.numel(); i++) {
                float mean = c1 * (px[i] - c2 * pe[i]);
                px[i] = t > 0 ? mean + sd * rng.gaussian() : mean;
            }
        }
        return x;
    }

    // Evenly strided timestep subset, walked from the noisiest end.
    std::vector<int64_t> taus(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; i++) taus[static_cast<size_t>(i)] = i * sched.t_diff / steps;
    for (int64_t i = steps - 1; i >= 0; i--) {
        int64_t t = taus[static_cast<size_t>(i)];
        if (observer) (*observer)(t, x);
        Tensor eps = cfg_predict(model, x, t, cond, null_cond, w);
        double ab = sched.alpha_bar[static_cast<size_t>(t)];
        double ab_prev = i > 0 ? sched.alpha_bar[static_cast<size_t>(taus[static_cast<size_t>(i - 1)])]
                               : 1.0;
        float ca = static_cast<float>(1.0 / std::sqrt(ab));
        float cb = static_cast<float>(std::sqrt(1.0 - ab));
        float pa = static_cast<float>(std::sqrt(ab_prev));
        float pb = static_cast<float>(std::sqrt(1.0 - ab_prev));
        float* px = x.data();
        const float* pe = eps.data();
        for (int64_t j = 0; j < x.numel(); j++) {
            float x0 = ca * (px[j] - cb * pe[j]);
            px[j] = pa * x0 + pb * pe[j];
        }
    }
    return x;
}

// Cross-attention probabilities for one sample at one timestep, at every
// attention site the model carries.
inline std::vector<AttentionRecord> capture_attention(const UNet& model, const Tensor& x_t,
                                                      int64_t t, const CondBatch& cond,
                                                      int64_t token_index) {
    check_dim(x_t.dim(0) == 1, "attention capture expects a single-sample batch");
    if (token_index < 0 || token_index >= cond.lens[0])
        throw contract_error("token index is masked or out of range");
    std::vector<AttentionRecord> recs;
    model.forward(nullptr, x_t, {t}, cond, &recs);
    return recs;
}

// One token's attention column rendered at image resolution: nearest
// upsample, then per-map normalization to [0, 1].
inline Tensor heatmap_image(const AttentionRecord& rec, int64_t token_index, int64_t image_size) {
    check_dim(token_index >= 0 && token_index < rec.probs.dim(1), "token index out of range");
    check_dim(image_size % rec.res == 0, "image size must be a multiple of the site resolution");
    int64_t r = rec.res, tk = rec.probs.dim(1);
    Tensor out = Tensor::zeros({image_size, image_size});
    float mn = rec.probs.data()[token_index], mx = mn;
    for (int64_t i = 0; i < r * r; i++) {
        float v = rec.probs.data()[i * tk + token_index];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    float inv = mx > mn ? 1.0f / (mx - mn) : 0.0f;
    for (int64_t y = 0; y < image_size; y++)
        for (int64_t x = 0; x < image_size; x++) {
            int64_t sy = y * r / image_size, sx = x * r / image_size;
            float v = rec.probs.data()[(sy * r + sx) * tk + token_index];
            out.data()[y * image_size + x] = (v - mn) * inv;
        }
    return out;
}

// Diffusion checkpoints hold the U-Net and the conditioning projection; the
// first config line reconstructs the architecture, the rest is free text
// recorded by the caller (strategy, encoder digest, schedule).
inline void save_diffusion(const std::string& path, const UNet& model, const Tensor& projection,
                           const std::string& note = "") {
    Checkpoint ck;
    ck.config_text = model.cfg.to_text();
    if (!note.empty()) ck.config_text += "\n" + note;
    for (auto& [name, t] : model.named_params()) ck.tensors.emplace_back("unet." + name, t);
    ck.tensors.emplace_back("projection", projection);
    ck.save(path);
}

struct LoadedDiffusion {
    UNet model;
    Tensor projection;
    std::string note;
};

inline LoadedDiffusion load_diffusion(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    size_t nl = ck.config_text.find('\n');
    std::string cfg_line = nl == std::string::npos ? ck.config_text : ck.config_text.substr(0, nl);
    LoadedDiffusion out;
    out.note = nl == std::string::npos ? "" : ck.config_text.substr(nl + 1);
    out.model = UNet::init(UNetConfig::from_text(cfg_line), 0);
    for (auto& [name, t] : out.model.named_params()) {
        Tensor src = ck.get("unet." + name);
        check_dim(src.shape() == t.shape(), "checkpoint tensor shape mismatch: " + name);
        std::copy(src.data(), src.data() + src.numel(), t.data());
    }
    out.projection = ck.get("projection");
    out.projection.set_requires_grad(true);
    return out;
}

}  // namespace t2i
