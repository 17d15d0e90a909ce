#include "clu/optim.hpp"

#include "clu/errors.hpp"

#include <cmath>

namespace clu {

double sgd_step(std::span<Tensor> params, double lr) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.requires_grad() || !p.has_grad()) {
            continue;
        }
        auto v = p.mutable_values();
        auto g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double delta = lr * g[i];
            v[i] -= delta;
            sq += delta * delta;
        }
    }
    return std::sqrt(sq);
}

double Adam::step(std::span<Tensor> params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].numel(), 0.0);
            v_[i].assign(params[i].numel(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw ContractError("Adam::step called with a different parameter list");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.requires_grad() || !p.has_grad()) {
            continue;
        }
        auto v = p.mutable_values();
        auto g = p.grad();
        auto& m = m_[i];
        auto& s = v_[i];
        for (std::size_t j = 0; j < v.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            s[j] = beta2_ * s[j] + (1.0 - beta2_) * g[j] * g[j];
            const double delta = lr_ * (m[j] / c1) / (std::sqrt(s[j] / c2) + eps_);
            v[j] -= delta;
            sq += delta * delta;
        }
    }
    return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (p.requires_grad() && p.has_grad()) {
            for (auto g : p.grad()) {
                sq += g * g;
            }
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& p : params) {
            if (p.requires_grad() && p.has_grad()) {
                for (auto& g : p.mutable_grad()) {
                    g *= f;
                }
            }
        }
    }
    return norm;
}

void zero_grads(std::span<Tensor> params) {
    for (auto& p : params) {
        p.zero_grad();
    }
}

}  // namespace clu
