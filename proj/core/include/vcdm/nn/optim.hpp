#pragma once

#include <vector>

#include "vcdm/nn/modules.hpp"

namespace vcdm::nn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(const ParameterSet& params, AdamConfig cfg);

    // Applies one update from the grads currently on the parameters.
    void step(ParameterSet& params);

    long steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // Moment buffers, for checkpointing.
    std::vector<std::vector<double>>& first_moment() { return m_; }
    std::vector<std::vector<double>>& second_moment() { return v_; }
    const std::vector<std::vector<double>>& first_moment() const { return m_; }
    const std::vector<std::vector<double>>& second_moment() const { return v_; }
    void set_steps_taken(long t) { t_ = t; }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Exponential moving average of parameter values. With warmup the decay
// used at update n is min(decay, (1 + n) / (10 + n)), so short runs still
// track the trained weights.
class Ema {
public:
    Ema() = default;
    Ema(const ParameterSet& params, double decay, bool warmup = false);

    void update(const ParameterSet& params);
    double decay() const { return decay_; }
    long updates() const { return updates_; }
    void set_updates(long n) { updates_ = n; }
    const std::vector<std::vector<double>>& values() const { return shadow_; }
    void set_values(std::vector<std::vector<double>> v) { shadow_ = std::move(v); }

private:
    double decay_ = 0.9999;
    bool warmup_ = false;
    long updates_ = 0;
    std::vector<std::vector<double>> shadow_;
};

}  // namespace vcdm::nn
