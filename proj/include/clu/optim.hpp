#pragma once

#include "clu/tensor.hpp"

#include <span>
#include <vector>

namespace clu {

// Plain SGD over whatever subset of `params` currently requires grad.
// Returns the L2 norm of the applied update.
double sgd_step(std::span<Tensor> params, double lr);

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // `params` must be passed in the same order on every call. Returns the
    // L2 norm of the applied update.
    double step(std::span<Tensor> params);

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

void zero_grads(std::span<Tensor> params);

// Rescales gradients so their joint L2 norm is at most max_norm (no-op when
// max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace clu
