#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "finv/array.hpp"
#include "finv/generator.hpp"

namespace finv {

/// Bias-corrected adaptive-moment gradient descent over one flat parameter
/// block. One state per block; the step counter is shared by all entries.
class Adam {
public:
    Adam() = default;
    Adam(int64_t dim, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(dim, 0.0), v_(dim, 0.0) {}

    void step(double* param, const double* grad, int64_t dim) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, t_);
        const double c2 = 1.0 - std::pow(beta2_, t_);
        for (int64_t i = 0; i < dim; ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            param[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    void step(Array& param, const Array& grad) { step(param.data(), grad.data(), param.size()); }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    int64_t steps_taken() const { return t_; }

private:
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::vector<double> m_, v_;
};

namespace detail {

/// Adam over one MLP's layers, fed from a backward pass's leaf-gradient map.
struct MlpAdamState {
    std::vector<Adam> w, b;
    MlpAdamState(const MlpParams& p, double lr) {
        for (const auto& wm : p.weights) w.emplace_back(wm.size(), lr);
        for (const auto& bm : p.biases) b.emplace_back(bm.size(), lr);
    }
    void step(MlpParams& p, const std::map<int, Array>& grads, const std::vector<int>& w_leaves,
              const std::vector<int>& b_leaves) {
        for (size_t l = 0; l < w_leaves.size(); ++l) {
            w[l].step(p.weights[l], grads.at(w_leaves[l]));
            b[l].step(p.biases[l], grads.at(b_leaves[l]));
        }
    }
    void set_lr(double lr) {
        for (auto& a : w) a.set_lr(lr);
        for (auto& a : b) a.set_lr(lr);
    }
};

}  // namespace detail

}  // namespace finv
