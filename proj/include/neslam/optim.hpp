#pragma once

#include "neslam/tape.hpp"

#include <cmath>
#include <unordered_map>

namespace neslam {

/// Adaptive-moment gradient descent, moments (0.9, 0.999). State is keyed by
/// parameter address and survives across steps; different parameter groups
/// pass their own learning rates.
class Adam {
 public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update from p.grad; the gradient buffer is left untouched so the
    /// caller controls zeroing/accumulation.
    void step(Parameter& p, double lr) {
        if (!p.trainable || p.grad.size() != p.value.size()) return;
        State& s = state_[&p];
        if (s.m.size() != p.value.size()) {
            s.m.assign(p.value.size(), 0.0);
            s.v.assign(p.value.size(), 0.0);
            s.t = 0;
        }
        ++s.t;
        const double bc1 = 1.0 - std::pow(beta1_, s.t);
        const double bc2 = 1.0 - std::pow(beta2_, s.t);
        for (size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            s.m[i] = beta1_ * s.m[i] + (1 - beta1_) * g;
            s.v[i] = beta2_ * s.v[i] + (1 - beta2_) * g * g;
            p.value[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
        }
    }

    void reset() { state_.clear(); }

 private:
    struct State {
        std::vector<double> m, v;
        long t = 0;
    };
    double beta1_, beta2_, eps_;
    std::unordered_map<const Parameter*, State> state_;
};

}  // namespace neslam
