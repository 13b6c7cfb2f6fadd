#pragma once

#include <functional>
#include <span>
#include <vector>

#include "vcdm/nn/tensor.hpp"
#include "vcdm/random.hpp"

// Noise schedules, forward corruption, the weighted denoising objective,
// preconditioning and the stochastic Heun sampler. Shared by the embedding
// prior and the image model.
namespace vcdm::diffusion {

struct ScheduleConfig {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    int num_steps = 40;

    void validate() const;
};

struct SamplerConfig {
    int num_steps = 40;
    double s_churn = 0.0;
    double s_noise = 1.0;
    double s_tmin = 0.05;
    double s_tmax = 50.0;
    bool stochastic = false;

    void validate() const;

    // 40 steps, S_churn = 50, S_noise = 1.007, remaining knobs at defaults.
    static SamplerConfig image_default();
    // 64 deterministic Heun steps; the embedding-space default.
    static SamplerConfig embedding_default();
};

struct LossWeighting {
    double sigma_data = 0.5;
    double p_mean = -1.2;
    double p_std = 1.2;

    void validate() const;
    // (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2
    double lambda(double sigma) const;
};

struct PrecondCoefficients {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

PrecondCoefficients precondition_coefficients(double sigma, double sigma_data);

// F(c_in * x_sigma, c_noise) with one noise level per leading row.
using RawNet = std::function<nn::Var(const nn::Var& scaled_input, std::span<const double> c_noise)>;
// x_hat(x_sigma, sigma); conditioning is bound into the closure.
using Denoiser = std::function<nn::Var(const nn::Var& x_sigma, std::span<const double> sigma)>;

// x + sigma * eps.
std::vector<double> corrupt(std::span<const double> x, double sigma, std::span<const double> eps);

// ln(sigma) ~ Normal(p_mean, p_std^2).
double sample_train_sigma(const LossWeighting& weighting, Rng& rng);

// Wraps a raw network as c_skip * x_sigma + c_out * F(c_in * x_sigma, c_noise).
Denoiser precondition(RawNet raw, double sigma_data);

// Weighted squared error at explicit per-row noise levels and noise draws:
// mean_i lambda(sigma_i) * ||x_i - x_hat(x_i + sigma_i eps_i, sigma_i)||^2.
nn::Var denoising_loss_at(const Denoiser& model, const nn::Var& x, std::span<const double> sigmas,
                          std::span<const double> eps, const LossWeighting& weighting);

// One-sample Monte Carlo estimate of the objective: a fresh sigma and noise
// draw per row from rng.
nn::Var denoising_loss(const Denoiser& model, const nn::Var& x, const LossWeighting& weighting, Rng& rng);

// Descending Karras schedule of num_steps levels followed by a terminal 0.
std::vector<double> build_sigma_schedule(const ScheduleConfig& cfg);

// Stochastic Heun sampler. shape[0] is the batch size. rngs holds either one
// generator shared by every row or one generator per row; per-row streams
// make each item independent of how the batch is composed. The step count
// comes from sampler_cfg; the level range and rho from schedule_cfg.
std::vector<double> sample(const Denoiser& model, const nn::Shape& shape, const SamplerConfig& sampler_cfg,
                           const ScheduleConfig& schedule_cfg, std::span<Rng> rngs);

// RMS of the data after removing the per-coordinate mean. rows x dim.
double estimate_sigma_data(std::span<const double> data, std::size_t dim);

}  // namespace vcdm::diffusion
