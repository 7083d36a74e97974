#pragma once

// Quantitative instruments: effective rank and its per-stack profile, the
// ablation synergy coefficient, beta-gate statistics, and task accuracy.
// Everything operates on detached traces; pure functions throughout.

#include <cmath>
#include <string>
#include <vector>

#include "mgt/errors.hpp"
#include "mgt/model.hpp"
#include "mgt/spectral.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

struct RankProfile {
    std::vector<double> per_layer;  // entry 0 is the post-embedding state
    double preservation_ratio = 0.0;  // last / first
    double decay_rate = 0.0;          // least-squares slope of ln(rank) vs layer
};

struct BetaStats {
    std::vector<double> mean;      // one entry per layer
    std::vector<double> variance;  // population variance
    std::vector<double> neg_frac;  // fraction of entries strictly below zero
};

// exp(entropy of normalized singular values) / min(S, D), in [0, 1].
// Singular values below 1e-12 * sigma_max are excluded (0 ln 0 := 0).
inline double effective_rank(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("effective_rank: expected 2-d tensor, got " + x.shape_string());
    SingularSpectrum spec = singular_values(x);
    double sigma_max = spec.values.empty() ? 0.0 : spec.values[0];
    if (sigma_max <= 0.0) throw DegenerateInputError("effective_rank: all-zero matrix");
    double total = 0.0;
    for (double s : spec.values)
        if (s >= 1e-12 * sigma_max) total += s;
    double entropy = 0.0;
    for (double s : spec.values) {
        if (s < 1e-12 * sigma_max) continue;
        double p = s / total;
        entropy -= p * std::log(p);
    }
    return std::exp(entropy) / double(std::min(spec.source_rows, spec.source_cols));
}

namespace detail {

// Least-squares slope of y over x = 0, 1, ..., n-1.
inline double ls_slope(const std::vector<double>& y) {
    size_t n = y.size();
    double xbar = double(n - 1) / 2.0;
    double ybar = 0.0;
    for (double v : y) ybar += v;
    ybar /= double(n);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < n; ++i) {
        num += (double(i) - xbar) * (y[i] - ybar);
        den += (double(i) - xbar) * (double(i) - xbar);
    }
    return den == 0.0 ? 0.0 : num / den;
}

}  // namespace detail

// Derived quantities from an already-averaged per-layer rank curve.
inline RankProfile rank_profile_from_curve(std::vector<double> per_layer) {
    if (per_layer.size() < 2) throw InvalidConfigError("rank profile needs at least 2 layers");
    RankProfile out;
    out.preservation_ratio = per_layer.back() / per_layer.front();
    std::vector<double> logs(per_layer.size());
    for (size_t i = 0; i < per_layer.size(); ++i) {
        if (per_layer[i] <= 0.0) throw DegenerateInputError("rank profile has non-positive entry");
        logs[i] = std::log(per_layer[i]);
    }
    out.decay_rate = detail::ls_slope(logs);
    out.per_layer = std::move(per_layer);
    return out;
}

// Effective rank per layer, averaged over a batch of model traces. Entry 0 is
// the post-embedding state; entries 1..2L follow the blocks.
inline RankProfile rank_profile(const std::vector<ModelTrace>& batch) {
    if (batch.empty()) throw InvalidConfigError("rank_profile: empty batch");
    size_t layers = batch[0].layers.size();
    std::vector<double> curve(layers + 1, 0.0);
    for (const ModelTrace& t : batch) {
        if (t.layers.size() != layers) throw InvalidConfigError("rank_profile: ragged trace batch");
        curve[0] += effective_rank(t.embedding_state);
        for (size_t l = 0; l < layers; ++l) curve[l + 1] += effective_rank(t.layers[l].hidden);
    }
    for (double& v : curve) v /= double(batch.size());
    return rank_profile_from_curve(std::move(curve));
}

// S = (L_base - L_mgt) - (L_base - L_mhc) - (L_base - L_ddl)
//   = L_mhc + L_ddl - L_base - L_mgt.
inline double synergy_coefficient(double loss_base, double loss_mhc, double loss_ddl, double loss_mgt) {
    for (double v : {loss_base, loss_mhc, loss_ddl, loss_mgt})
        if (!std::isfinite(v)) throw InvalidConfigError("synergy_coefficient: non-finite loss");
    return loss_mhc + loss_ddl - loss_base - loss_mgt;
}

// Per-layer moments of the beta gate over every (token, dim, batch) entry.
inline BetaStats beta_stats(const std::vector<ModelTrace>& batch) {
    if (batch.empty()) throw InvalidConfigError("beta_stats: empty batch");
    size_t layers = batch[0].layers.size();
    BetaStats out;
    out.mean.assign(layers, 0.0);
    out.variance.assign(layers, 0.0);
    out.neg_frac.assign(layers, 0.0);
    for (size_t l = 0; l < layers; ++l) {
        double sum = 0.0, sum_sq = 0.0;
        size_t count = 0, neg = 0;
        for (const ModelTrace& t : batch) {
            const Tensor& beta = t.layers.at(l).beta;
            if (beta.size() == 0)
                throw InvalidConfigError("beta_stats: layer " + std::to_string(l + 1) +
                                         " carries no beta gate (variant without DDL?)");
            for (size_t i = 0; i < beta.size(); ++i) {
                double v = beta.at(i);
                sum += v;
                sum_sq += v * v;
                if (v < 0.0) ++neg;
                ++count;
            }
        }
        out.mean[l] = sum / double(count);
        out.variance[l] = sum_sq / double(count) - out.mean[l] * out.mean[l];
        if (out.variance[l] < 0.0) out.variance[l] = 0.0;  // rounding guard
        out.neg_frac[l] = double(neg) / double(count);
    }
    return out;
}

// Fraction of masked positions whose argmax prediction hits the target.
inline double copy_accuracy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask) {
    if (logits.rank() != 2) throw DimensionError("copy_accuracy: expected 2-d logits");
    size_t N = logits.shape()[0], V = logits.shape()[1];
    if (targets.size() != N || mask.size() != N)
        throw DimensionError("copy_accuracy: targets/mask length must equal logits rows");
    size_t total = 0, hit = 0;
    for (size_t i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        ++total;
        size_t best = 0;
        for (size_t j = 1; j < V; ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        if (int(best) == targets[i]) ++hit;
    }
    if (total == 0) throw InvalidConfigError("copy_accuracy: mask selects no positions");
    return double(hit) / double(total);
}

}  // namespace mgt
