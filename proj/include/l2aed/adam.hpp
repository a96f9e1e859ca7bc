#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "l2aed/tensor.hpp"

namespace l2aed {

/// Moment buffers and step counter for Adam.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Zeroed moments mirroring `params`.
    static AdamState for_params(std::span<const Tensor* const> params);
};

/// One bias-corrected Adam update, in place. Throws ShapeError when the
/// parameter, gradient and moment lists disagree.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr);

}  // namespace l2aed
