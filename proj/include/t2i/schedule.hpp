#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "t2i/tensor.hpp"

namespace t2i {

// Forward-process constants. Accumulated in double so alpha_bar keeps full
// precision down to its smallest values.
struct NoiseSchedule {
    int64_t t_diff = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
};

inline NoiseSchedule build_schedule(int64_t t_diff, double beta_start, double beta_end) {
    if (t_diff < 1) throw config_error("schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw config_error("schedule requires 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.t_diff = t_diff;
    s.beta.resize(static_cast<size_t>(t_diff));
    s.alpha.resize(static_cast<size_t>(t_diff));
    s.alpha_bar.resize(static_cast<size_t>(t_diff));
    double prod = 1.0;
    for (int64_t t = 0; t < t_diff; t++) {
        double f = t_diff == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(t_diff - 1);
        double b = beta_start + (beta_end - beta_start) * f;
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

inline NoiseSchedule default_schedule() { return build_schedule(1000, 1e-4, 0.02); }

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one t for the whole tensor.
inline Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.t_diff) throw index_error("q_sample: t out of range");
    check_dim(eps.shape() == x0.shape(), "q_sample: eps must be shaped like x0");
    double ab = s.alpha_bar[static_cast<size_t>(t)];
    float a = static_cast<float>(std::sqrt(ab));
    float b = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor out = Tensor::zeros(x0.shape());
    const float* px = x0.data();
    const float* pe = eps.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); i++) po[i] = a * px[i] + b * pe[i];
    return out;
}

// Per-sample timesteps over the leading dimension.
inline Tensor q_sample_batch(const Tensor& x0, const std::vector<int64_t>& t, const Tensor& eps,
                             const NoiseSchedule& s) {
    check_dim(eps.shape() == x0.shape(), "q_sample: eps must be shaped like x0");
    check_dim(static_cast<int64_t>(t.size()) == x0.dim(0), "q_sample: one t per sample");
    int64_t stride = x0.numel() / x0.dim(0);
    Tensor out = Tensor::zeros(x0.shape());
    for (int64_t i = 0; i < x0.dim(0); i++) {
        if (t[static_cast<size_t>(i)] < 0 || t[static_cast<size_t>(i)] >= s.t_diff)
            throw index_error("q_sample: t out of range");
        double ab = s.alpha_bar[static_cast<size_t>(t[static_cast<size_t>(i)])];
        float a = static_cast<float>(std::sqrt(ab));
        float b = static_cast<float>(std::sqrt(1.0 - ab));
        const float* px = x0.data() + i * stride;
        const float* pe = eps.data() + i * stride;
        float* po = out.data() + i * stride;
        for (int64_t j = 0; j < stride; j++) po[j] = a * px[j] + b * pe[j];
    }
    return out;
}

}  // namespace t2i
