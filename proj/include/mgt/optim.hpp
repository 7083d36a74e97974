#pragma once

// Adam with bias correction and optional global-norm gradient clipping.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mgt/errors.hpp"
#include "mgt/model.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // <= 0 disables clipping
};

struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    size_t t = 0;
};

// Single-array Adam update; `params` is modified in place.
inline void adam_update(std::vector<double>& params, const std::vector<double>& grads,
                        std::vector<double>& m, std::vector<double>& v, size_t t, const AdamConfig& cfg,
                        double grad_scale = 1.0) {
    if (m.empty()) m.assign(params.size(), 0.0);
    if (v.empty()) v.assign(params.size(), 0.0);
    double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (size_t i = 0; i < params.size(); ++i) {
        double g = grads[i] * grad_scale;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// Global L2 norm over every gradient array.
inline double global_grad_norm(const std::map<std::string, Tensor>& grads) {
    double sum = 0.0;
    for (const auto& [name, g] : grads)
        for (size_t i = 0; i < g.size(); ++i) sum += g.at(i) * g.at(i);
    return std::sqrt(sum);
}

// One optimizer step over a named parameter set. Gradients are checked for
// NaN/Inf first; a bad gradient aborts with the parameter name.
inline void adam_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                      const AdamConfig& cfg) {
    for (const auto& [name, g] : grads)
        if (!g.all_finite()) throw InstabilityError("non-finite gradient for parameter " + name);

    double scale = 1.0;
    if (cfg.grad_clip > 0.0) {
        double norm = global_grad_norm(grads);
        if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
    }

    ++state.t;
    for_each_param(params, [&](const std::string& name, Tensor& t) {
        auto it = grads.find(name);
        if (it == grads.end()) return;
        std::vector<double> data = t.vec();
        adam_update(data, it->second.vec(), state.m[name], state.v[name], state.t, cfg, scale);
        Tensor updated(t.shape(), std::move(data));
        if (!updated.all_finite()) throw InstabilityError("non-finite parameter after update: " + name);
        t = std::move(updated);
    });
}

}  // namespace mgt
