#pragma once

#include <cmath>
#include <vector>

#include "t2i/common.hpp"
#include "t2i/tensor.hpp"

namespace t2i {

struct AdamWConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

// AdamW: decay is decoupled, applied multiplicatively to the parameter before
// the bias-corrected Adam step. Parameters without an allocated gradient are
// skipped for the Adam part but still decayed.
struct AdamW {
    AdamWConfig cfg;
    std::vector<Tensor> params;
    int64_t t = 0;

    AdamW(std::vector<Tensor> ps, AdamWConfig c = {}) : cfg(c), params(std::move(ps)) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); i++) {
            check(params[i].requires_grad(), "AdamW: parameter does not require grad");
            m_[i].assign(static_cast<size_t>(params[i].numel()), 0.0f);
            v_[i].assign(static_cast<size_t>(params[i].numel()), 0.0f);
        }
    }

    void zero_grad() {
        for (auto& p : params) p.zero_grad();
    }

    void step() {
        t++;
        float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(t));
        float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(t));
        float decay = 1.0f - cfg.lr * cfg.weight_decay;
        for (size_t pi = 0; pi < params.size(); pi++) {
            Tensor& pt = params[pi];
            float* p = pt.data();
            int64_t n = pt.numel();
            for (int64_t i = 0; i < n; i++) p[i] *= decay;
            if (!pt.has_grad()) continue;
            const float* g = pt.grad();
            float* m = m_[pi].data();
            float* v = v_[pi].data();
            for (int64_t i = 0; i < n; i++) {
                m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
                float mhat = m[i] / bc1;
                float vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }

  private:
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace t2i
