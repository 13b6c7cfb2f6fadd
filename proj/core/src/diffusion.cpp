#include "vcdm/diffusion.hpp"

#include <cmath>
#include <string>

#include "vcdm/errors.hpp"
#include "vcdm/nn/ops.hpp"

namespace vcdm::diffusion {

void ScheduleConfig::validate() const {
    if (num_steps < 1) throw InvalidArgument("schedule requires num_steps >= 1");
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min)) {
        throw InvalidArgument("schedule requires 0 < sigma_min < sigma_max");
    }
    if (!(rho > 0.0)) throw InvalidArgument("schedule requires rho > 0");
}

void SamplerConfig::validate() const {
    if (num_steps < 1) throw InvalidArgument("sampler requires num_steps >= 1");
    if (s_churn < 0.0 || !(s_noise > 0.0) || s_tmin < 0.0 || !(s_tmax > s_tmin)) {
        throw InvalidArgument("sampler requires s_churn >= 0, s_noise > 0 and 0 <= s_tmin < s_tmax");
    }
}

SamplerConfig SamplerConfig::image_default() {
    SamplerConfig cfg;
    cfg.num_steps = 40;
    cfg.s_churn = 50.0;
    cfg.s_noise = 1.007;
    cfg.stochastic = true;
    return cfg;
}

SamplerConfig SamplerConfig::embedding_default() {
    SamplerConfig cfg;
    cfg.num_steps = 64;
    return cfg;
}

void LossWeighting::validate() const {
    if (!(sigma_data > 0.0)) throw InvalidArgument("sigma_data must be positive");
    if (p_std < 0.0) throw InvalidArgument("p_std must be non-negative");
}

double LossWeighting::lambda(double sigma) const {
    return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
}

PrecondCoefficients precondition_coefficients(double sigma, double sigma_data) {
    const double s2 = sigma * sigma;
    const double d2 = sigma_data * sigma_data;
    const double root = std::sqrt(s2 + d2);
    return {d2 / (s2 + d2), sigma * sigma_data / root, 1.0 / root, std::log(sigma) / 4.0};
}

std::vector<double> corrupt(std::span<const double> x, double sigma, std::span<const double> eps) {
    if (x.size() != eps.size()) {
        throw InvalidArgument("corrupt: x has " + std::to_string(x.size()) + " entries but eps has " +
                              std::to_string(eps.size()));
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sigma * eps[i];
    return out;
}

double sample_train_sigma(const LossWeighting& weighting, Rng& rng) {
    return std::exp(weighting.p_mean + weighting.p_std * rng.normal());
}

Denoiser precondition(RawNet raw, double sigma_data) {
    if (!(sigma_data > 0.0)) throw InvalidArgument("precondition: sigma_data must be positive");
    return [raw = std::move(raw), sigma_data](const nn::Var& x_sigma, std::span<const double> sigma) {
        const std::size_t rows = sigma.size();
        std::vector<double> c_skip(rows), c_out(rows), c_in(rows), c_noise(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            const auto c = precondition_coefficients(sigma[i], sigma_data);
            c_skip[i] = c.c_skip;
            c_out[i] = c.c_out;
            c_in[i] = c.c_in;
            c_noise[i] = c.c_noise;
        }
        nn::Var f = raw(nn::scale_rows(x_sigma, c_in), c_noise);
        return nn::add(nn::scale_rows(x_sigma, c_skip), nn::scale_rows(f, c_out));
    };
}

nn::Var denoising_loss_at(const Denoiser& model, const nn::Var& x, std::span<const double> sigmas,
                          std::span<const double> eps, const LossWeighting& weighting) {
    const std::size_t rows = sigmas.size();
    if (x.rank() == 0 || static_cast<std::size_t>(x.dim(0)) != rows) {
        throw InvalidArgument("denoising_loss: one sigma per batch row required");
    }
    if (eps.size() != x.numel()) throw InvalidArgument("denoising_loss: eps shape differs from x");
    const std::size_t inner = x.numel() / rows;
    std::vector<double> noisy(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < inner; ++j)
            noisy[r * inner + j] = x.value()[r * inner + j] + sigmas[r] * eps[r * inner + j];
    nn::Var x_sigma = nn::Var::constant(x.shape(), std::move(noisy));
    nn::Var pred = model(x_sigma, sigmas);
    if (pred.shape() != x.shape()) throw InvalidArgument("denoising_loss: model output shape differs from x");
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < inner; ++j)
            if (!std::isfinite(pred.value()[r * inner + j])) {
                throw NumericFailure("non-finite denoiser output", sigmas[r]);
            }
    std::vector<double> weights(rows);
    for (std::size_t r = 0; r < rows; ++r) weights[r] = weighting.lambda(sigmas[r]) / static_cast<double>(rows);
    return nn::weighted_sum_sq(nn::sub(x, pred), weights);
}

nn::Var denoising_loss(const Denoiser& model, const nn::Var& x, const LossWeighting& weighting, Rng& rng) {
    const std::size_t rows = static_cast<std::size_t>(x.dim(0));
    std::vector<double> sigmas(rows);
    for (double& s : sigmas) s = sample_train_sigma(weighting, rng);
    std::vector<double> eps = rng.normal_vector(x.numel());
    return denoising_loss_at(model, x, sigmas, eps, weighting);
}

std::vector<double> build_sigma_schedule(const ScheduleConfig& cfg) {
    cfg.validate();
    const int n = cfg.num_steps;
    std::vector<double> sigmas(static_cast<std::size_t>(n) + 1);
    const double hi = std::pow(cfg.sigma_max, 1.0 / cfg.rho);
    const double lo = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
    for (int i = 0; i < n; ++i) {
        const double frac = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        sigmas[i] = std::pow(hi + frac * (lo - hi), cfg.rho);
    }
    // Pin the endpoints against pow round-off.
    sigmas.front() = cfg.sigma_max;
    if (n > 1) sigmas[n - 1] = cfg.sigma_min;
    sigmas[n] = 0.0;
    return sigmas;
}

namespace {

void add_noise(std::vector<double>& x, std::size_t rows, double scale, std::span<Rng> rngs) {
    const std::size_t inner = x.size() / rows;
    for (std::size_t r = 0; r < rows; ++r) {
        Rng& rng = rngs.size() == 1 ? rngs[0] : rngs[r];
        for (std::size_t j = 0; j < inner; ++j) x[r * inner + j] += scale * rng.normal();
    }
}

void check_finite(const std::vector<double>& x, int step, double sigma) {
    for (double v : x)
        if (!std::isfinite(v)) throw NumericFailure("non-finite sampler state", sigma, step);
}

std::vector<double> evaluate(const Denoiser& model, const nn::Shape& shape, const std::vector<double>& x,
                             double sigma) {
    const std::vector<double> sig(static_cast<std::size_t>(shape[0]), sigma);
    nn::Var out = model(nn::Var::constant(shape, x), sig);
    return {out.value().begin(), out.value().end()};
}

}  // namespace

std::vector<double> sample(const Denoiser& model, const nn::Shape& shape, const SamplerConfig& sampler_cfg,
                           const ScheduleConfig& schedule_cfg, std::span<Rng> rngs) {
    sampler_cfg.validate();
    if (shape.empty() || shape[0] < 1) throw InvalidArgument("sample: shape must have a positive batch dimension");
    const auto rows = static_cast<std::size_t>(shape[0]);
    if (rngs.size() != 1 && rngs.size() != rows) {
        throw InvalidArgument("sample: need one generator or one per batch row");
    }
    ScheduleConfig sched = schedule_cfg;
    sched.num_steps = sampler_cfg.num_steps;
    const std::vector<double> sigmas = build_sigma_schedule(sched);
    const int n = sampler_cfg.num_steps;
    const double gamma_max =
        sampler_cfg.stochastic ? std::min(sampler_cfg.s_churn / n, std::sqrt(2.0) - 1.0) : 0.0;

    nn::NoGradGuard no_grad;
    std::vector<double> x(nn::numel(shape), 0.0);
    add_noise(x, rows, sigmas[0], rngs);

    for (int i = 0; i < n; ++i) {
        const double t_cur = sigmas[i];
        const double t_next = sigmas[i + 1];
        const bool churn = gamma_max > 0.0 && t_cur >= sampler_cfg.s_tmin && t_cur <= sampler_cfg.s_tmax;
        const double t_hat = churn ? t_cur + gamma_max * t_cur : t_cur;
        if (churn) add_noise(x, rows, std::sqrt(t_hat * t_hat - t_cur * t_cur) * sampler_cfg.s_noise, rngs);

        const std::vector<double> denoised = evaluate(model, shape, x, t_hat);
        // Euler step written as x_hat + (t_next / t_hat) * (x - x_hat); with
        // t_next = 0 this lands exactly on the denoised estimate.
        const double ratio = t_next / t_hat;
        std::vector<double> x_next(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) x_next[j] = denoised[j] + ratio * (x[j] - denoised[j]);

        if (t_next > 0.0) {
            const std::vector<double> denoised_next = evaluate(model, shape, x_next, t_next);
            const double h = t_next - t_hat;
            for (std::size_t j = 0; j < x.size(); ++j) {
                const double d_cur = (x[j] - denoised[j]) / t_hat;
                const double d_prime = (x_next[j] - denoised_next[j]) / t_next;
                x_next[j] = x[j] + h * (0.5 * d_cur + 0.5 * d_prime);
            }
        }
        x = std::move(x_next);
        check_finite(x, i, t_hat);
    }
    return x;
}

double estimate_sigma_data(std::span<const double> data, std::size_t dim) {
    if (dim == 0 || data.empty() || data.size() % dim != 0) throw InvalidArgument("estimate_sigma_data: bad shape");
    const std::size_t rows = data.size() / dim;
    std::vector<double> mean(dim, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < dim; ++j) mean[j] += data[r * dim + j];
    for (double& m : mean) m /= static_cast<double>(rows);
    double ss = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < dim; ++j) ss += (data[r * dim + j] - mean[j]) * (data[r * dim + j] - mean[j]);
    const double rms = std::sqrt(ss / static_cast<double>(data.size()));
    if (!(rms > 0.0)) throw InvalidArgument("estimate_sigma_data: data has zero spread");
    return rms;
}

}  // namespace vcdm::diffusion
