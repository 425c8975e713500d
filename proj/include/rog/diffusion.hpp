#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rog/error.hpp"

namespace rog::diffusion {

// Linear-beta DDPM schedule. Steps are 1-based: t in [1, T].
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    // alpha_bar(0) == 1.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[index(t)]; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alphas() const { return alpha_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    void check_step(int t) const {
        if (t < 1 || t > steps())
            throw InputError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }

    static NoiseSchedule from_betas(std::vector<double> betas, double beta_start, double beta_end) {
        NoiseSchedule s;
        s.beta_start_ = beta_start;
        s.beta_end_ = beta_end;
        s.beta_ = std::move(betas);
        double acc = 1.0;
        for (double b : s.beta_) {
            if (!(b > 0.0 && b < 1.0)) throw InputError("beta values must lie in (0, 1)");
            s.alpha_.push_back(1.0 - b);
            acc *= 1.0 - b;
            s.alpha_bar_.push_back(acc);
        }
        return s;
    }

private:
    std::size_t index(int t) const {
        check_step(t);
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> beta_, alpha_, alpha_bar_;
    double beta_start_ = 0.0, beta_end_ = 0.0;
};

inline constexpr int kFullSteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

inline NoiseSchedule make_linear_schedule(int steps = kFullSteps, double beta_start = kDefaultBetaStart,
                                          double beta_end = kDefaultBetaEnd) {
    if (steps < 2) throw InputError("schedule needs at least 2 steps");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw InputError("schedule requires 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k)
        betas[static_cast<std::size_t>(k)] = beta_start + (beta_end - beta_start) * k / (steps - 1);
    return NoiseSchedule::from_betas(std::move(betas), beta_start, beta_end);
}

inline nlohmann::json to_json(const NoiseSchedule& s) {
    return {{"kind", "linear"}, {"T", s.steps()}, {"beta_start", s.beta_start()}, {"beta_end", s.beta_end()}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    if (j.value("kind", "linear") != "linear") throw InputError("unsupported schedule kind");
    return make_linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
template <typename T>
void q_sample(std::span<const T> x0, int t, std::span<const T> noise, const NoiseSchedule& sched, std::span<T> out) {
    if (x0.size() != noise.size() || x0.size() != out.size()) throw ShapeError("q_sample: size mismatch");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t k = 0; k < x0.size(); ++k) out[k] = static_cast<T>(a * x0[k] + b * noise[k]);
}

template <typename T>
std::vector<T> q_sample(std::span<const T> x0, int t, std::span<const T> noise, const NoiseSchedule& sched) {
    std::vector<T> out(x0.size());
    q_sample<T>(x0, t, noise, sched, out);
    return out;
}

// Gaussian posterior q(x_{t-1} | x_t, x0) in x0-prediction form.
struct Posterior {
    double coef_x0 = 0.0;
    double coef_xt = 0.0;
    double variance = 0.0;
};

inline Posterior posterior(const NoiseSchedule& s, int t) {
    s.check_step(t);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1), beta = s.beta(t);
    return {std::sqrt(ab_prev) * beta / (1.0 - ab), std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab),
            (1.0 - ab_prev) / (1.0 - ab) * beta};
}

// mu + sqrt(var) * noise; the terminal step t = 1 returns the mean.
template <typename T>
void ddpm_reverse_step(std::span<const T> x_t, std::span<const T> x0_hat, int t, const NoiseSchedule& sched,
                       std::span<const T> noise, std::span<T> out) {
    if (x_t.size() != x0_hat.size() || x_t.size() != out.size() || (t > 1 && noise.size() != x_t.size()))
        throw ShapeError("ddpm_reverse_step: size mismatch");
    const Posterior p = posterior(sched, t);
    const double sigma = t > 1 ? std::sqrt(p.variance) : 0.0;
    for (std::size_t k = 0; k < x_t.size(); ++k) {
        double v = p.coef_x0 * x0_hat[k] + p.coef_xt * x_t[k];
        if (t > 1) v += sigma * noise[k];
        out[k] = static_cast<T>(v);
    }
}

template <typename T>
std::vector<T> ddpm_reverse_step(std::span<const T> x_t, std::span<const T> x0_hat, int t,
                                 const NoiseSchedule& sched, std::span<const T> noise) {
    std::vector<T> out(x_t.size());
    ddpm_reverse_step<T>(x_t, x0_hat, t, sched, noise, out);
    return out;
}

}  // namespace rog::diffusion
