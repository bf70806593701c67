// Copyright 2026-present the irgen project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace irgen {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.96;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Adam with decoupled weight decay. `decay_mask[i] == 0` exempts parameter i
/// (biases, norms, embeddings) from the decay term.
template <class T>
class AdamW {
public:
    AdamW(std::size_t size, AdamWConfig cfg, std::vector<unsigned char> decay_mask = {})
        : cfg_(cfg), m_(size, 0.0), v_(size, 0.0), mask_(std::move(decay_mask)) {
        if (mask_.empty()) mask_.assign(size, 1);
    }

    void step(std::span<T> params, std::span<const T> grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grads[i]);
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            double p = static_cast<double>(params[i]);
            if (mask_[i]) p -= lr * cfg_.weight_decay * p;
            p -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            params[i] = static_cast<T>(p);
        }
    }

    void step(std::span<T> params, std::span<const T> grads) { step(params, grads, cfg_.learning_rate); }

    [[nodiscard]] const AdamWConfig& config() const noexcept { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::vector<unsigned char> mask_;
    std::size_t t_ = 0;
};

/// Cosine decay from `base` to zero over `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
    if (total <= 1) return base;
    const double progress = static_cast<double>(step) / static_cast<double>(total);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace irgen
