#pragma once

#include <cmath>
#include <vector>

#include "vag/error.hpp"
#include "vag/tensor.hpp"

namespace vag {

// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
class Adam {
public:
    explicit Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const Tensor* p : params_) {
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }

    double learning_rate() const { return lr_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor* p = params_[i];
            const auto& g = p->grad();
            auto& val = p->values();
            for (std::size_t j = 0; j < val.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (Tensor* p : params_) p->zero_grad();
    }

private:
    std::vector<Tensor*> params_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace vag
