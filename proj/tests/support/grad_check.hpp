#pragma once

// Harness comparing tape gradients against the central-difference oracle for
// an arbitrary forward graph over a set of leaf tensors.

#include <functional>
#include <vector>

#include "finite_diff.hpp"
#include "mgt/tensor.hpp"

namespace testsupport {

using GraphFn = std::function<mgt::Tensor(mgt::GradTape&, const std::vector<mgt::Tensor>&)>;

// Returns the worst relative error across every entry of every leaf gradient.
inline double check_gradients(const GraphFn& build, const std::vector<mgt::Tensor>& inputs,
                              double h = 1e-5, double floor_ = 1e-6) {
    mgt::GradTape tape;
    std::vector<mgt::Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const mgt::Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    mgt::Tensor loss = build(tape, leaves);
    tape.backward(loss);

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<double> autodiff = tape.grad(leaves[i]).vec();
        auto forward = [&](const std::vector<double>& x) {
            mgt::GradTape fresh;
            std::vector<mgt::Tensor> lv;
            lv.reserve(inputs.size());
            for (size_t j = 0; j < inputs.size(); ++j) {
                mgt::Tensor base = (j == i) ? mgt::Tensor(inputs[j].shape(), x) : inputs[j];
                lv.push_back(fresh.leaf(base));
            }
            return build(fresh, lv).item();
        };
        std::vector<double> numeric = numeric_gradient(forward, inputs[i].vec(), h);
        worst = std::max(worst, max_grad_rel_err(autodiff, numeric, floor_));
    }
    return worst;
}

inline mgt::Tensor random_tensor(std::vector<size_t> shape, mgt::Rng& rng, double lo = -1.0, double hi = 1.0) {
    size_t n = mgt::Tensor::numel_of(shape);
    std::vector<double> d(n);
    for (double& v : d) v = rng.uniform(lo, hi);
    return mgt::Tensor(std::move(shape), std::move(d));
}

}  // namespace testsupport
