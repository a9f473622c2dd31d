#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maeclip/errors.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Learning rate schedule: linear warmup to base_lr, then cosine decay to 0.
// --------------------------------------------------------------------------

struct ScheduleConfig {
    int64_t steps = 400;
    int64_t warmup_steps = 20;
    double base_lr = 5e-4;
};

inline double lr_schedule(int64_t step, const ScheduleConfig& cfg) {
    if (step < 0 || step > cfg.steps) throw ConfigError("lr_schedule: step outside [0, steps]");
    if (step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    const double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.steps - cfg.warmup_steps);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// --------------------------------------------------------------------------
// AdamW with decoupled weight decay
// --------------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.1;
};

/// One optimizable tensor. `no_decay` exempts it from weight decay
/// (layernorm gains/biases, temperature); `lr_scale` supports layer-wise
/// learning-rate decay during finetuning.
struct ParamSlot {
    std::string name;
    Tensor tensor;
    bool no_decay = false;
    double lr_scale = 1.0;
};

class AdamW {
public:
    AdamW(std::vector<ParamSlot> slots, AdamWConfig cfg) : cfg_(cfg), slots_(std::move(slots)) {
        m_.resize(slots_.size());
        v_.resize(slots_.size());
        for (size_t i = 0; i < slots_.size(); ++i) {
            m_[i].assign(slots_[i].tensor.numel(), 0.0);
            v_[i].assign(slots_[i].tensor.numel(), 0.0);
        }
    }

    /// One update over every slot whose gradient is populated. Slots without
    /// gradients are skipped entirely (no moment update, no decay), so
    /// parameters outside the active loss never change. Decay is decoupled:
    /// p <- p * (1 - lr*wd) applied separately from the adaptive step.
    void step(double lr) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (size_t i = 0; i < slots_.size(); ++i) {
            auto& slot = slots_[i];
            if (!slot.tensor.has_grad()) continue;
            const auto& g = slot.tensor.grad();
            auto& p = slot.tensor.mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            const double slot_lr = lr * slot.lr_scale;
            const double decay = slot.no_decay ? 1.0 : 1.0 - slot_lr * cfg_.weight_decay;
            for (size_t k = 0; k < p.size(); ++k) {
                if (!std::isfinite(g[k]))
                    throw NumericError("non-finite gradient in " + slot.name + " at optimizer step " +
                                       std::to_string(step_count_));
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p[k] = p[k] * decay - slot_lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& slot : slots_) slot.tensor.clear_grad();
    }

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }

    const std::vector<ParamSlot>& slots() const { return slots_; }
    const std::vector<double>& first_moment(size_t i) const { return m_[i]; }
    const std::vector<double>& second_moment(size_t i) const { return v_[i]; }
    std::vector<double>& first_moment(size_t i) { return m_[i]; }
    std::vector<double>& second_moment(size_t i) { return v_[i]; }

private:
    AdamWConfig cfg_;
    std::vector<ParamSlot> slots_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    int64_t step_count_ = 0;
};

}  // namespace maeclip
