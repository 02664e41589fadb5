#include "kblam/optim.hpp"

#include <cmath>
#include <numbers>

#include "kblam/error.hpp"

namespace kblam {

void OptimizerConfig::validate() const {
    if (total_steps < 1) throw ConfigError("optimizer.total_steps: must be >= 1");
    if (!(lr_start > 0)) throw ConfigError("optimizer.lr_start: must be > 0");
    if (lr_end < 0 || lr_end > lr_start) throw ConfigError("optimizer.lr_end: must be in [0, lr_start]");
}

double cosine_lr(const OptimizerConfig& cfg, std::size_t step) {
    if (cfg.total_steps <= 1) return cfg.lr_start;
    const double t = static_cast<double>(std::min(step, cfg.total_steps - 1)) / static_cast<double>(cfg.total_steps - 1);
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<Tensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
        if (!p.requires_grad()) throw ConfigError("optimizer: parameter does not require grad");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        auto w = p.data();
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
        }
        p.zero_grad();
    }
}

} // namespace kblam
