#include "vcdm/nn/optim.hpp"

#include <algorithm>
#include <cmath>

#include "vcdm/errors.hpp"

namespace vcdm::nn {

Adam::Adam(const ParameterSet& params, AdamConfig cfg) : cfg_(cfg) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params.at(i).numel(), 0.0);
        v_[i].assign(params.at(i).numel(), 0.0);
    }
}

void Adam::step(ParameterSet& params) {
    if (params.size() != m_.size()) throw InvalidArgument("Adam: parameter set changed since construction");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Var& p = params.at(i);
        auto grad = p.grad();
        if (grad.empty()) continue;
        auto value = p.mutable_value();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
            value[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        }
    }
}

Ema::Ema(const ParameterSet& params, double decay, bool warmup)
    : decay_(decay), warmup_(warmup), shadow_(params.values()) {}

void Ema::update(const ParameterSet& params) {
    const double n = static_cast<double>(updates_++);
    const double d = warmup_ ? std::min(decay_, (1.0 + n) / (10.0 + n)) : decay_;
    for (std::size_t i = 0; i < shadow_.size(); ++i) {
        auto value = params.at(i).value();
        for (std::size_t j = 0; j < value.size(); ++j) shadow_[i][j] = d * shadow_[i][j] + (1.0 - d) * value[j];
    }
}

}  // namespace vcdm::nn
