#pragma once

#include <cstddef>
#include <vector>

#include "kblam/tensor.hpp"

namespace kblam {

/// AdamW with cosine decay from lr_start to lr_end over total_steps.
struct OptimizerConfig {
    double lr_start = 5e-4;
    double lr_end = 5e-6;
    std::size_t total_steps = 20000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const;
};

/// Learning rate at `step` in [0, total_steps - 1]; equals lr_start at 0 and lr_end at the last step.
double cosine_lr(const OptimizerConfig& cfg, std::size_t step);

class AdamW {
public:
    AdamW(std::vector<Tensor> params, OptimizerConfig cfg);

    /// Applies one update with the given learning rate and clears gradients.
    void step(double lr);
    std::size_t steps_taken() const noexcept { return t_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }

private:
    std::vector<Tensor> params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace kblam
