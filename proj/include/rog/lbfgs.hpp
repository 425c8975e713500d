#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "rog/error.hpp"

namespace rog::opt {

struct LbfgsConfig {
    std::size_t history = 10;
    std::size_t max_iters = 100;
    double grad_tol = 1e-8;      // on the infinity norm
    double c1 = 1e-4;            // Armijo constant
    double backtrack = 0.5;
    std::size_t max_evals = 25;  // per line search
};

inline constexpr double kMinCurvature = 1e-12;

// Limited memory of (s, y) pairs. Pairs failing the curvature condition
// s'y > 1e-12 are dropped on insertion.
class LbfgsState {
public:
    explicit LbfgsState(std::size_t history = 10) : history_(history) {}

    bool push(std::vector<double> s, std::vector<double> y) {
        const double sy = dot(s, y);
        if (!(sy > kMinCurvature)) return false;
        pairs_.push_back({std::move(s), std::move(y), 1.0 / sy});
        if (pairs_.size() > history_) pairs_.pop_front();
        return true;
    }

    void clear() { pairs_.clear(); }
    std::size_t size() const { return pairs_.size(); }
    std::size_t history() const { return history_; }

    double curvature(std::size_t k) const { return 1.0 / pairs_[k].rho; }

    // Two-loop recursion: returns -H g with H0 = gamma I, gamma = s'y / y'y of
    // the newest pair, or `initial_scale` when the memory is empty.
    std::vector<double> direction(std::span<const double> g, double initial_scale) const {
        std::vector<double> q(g.begin(), g.end());
        std::vector<double> alpha(pairs_.size());
        for (std::size_t k = pairs_.size(); k-- > 0;) {
            const auto& p = pairs_[k];
            alpha[k] = p.rho * dot(p.s, q);
            axpy(-alpha[k], p.y, q);
        }
        double gamma = initial_scale;
        if (!pairs_.empty()) {
            const auto& last = pairs_.back();
            gamma = 1.0 / (last.rho * dot(last.y, last.y));
        }
        for (auto& v : q) v *= gamma;
        for (std::size_t k = 0; k < pairs_.size(); ++k) {
            const auto& p = pairs_[k];
            const double beta = p.rho * dot(p.y, q);
            axpy(alpha[k] - beta, p.s, q);
        }
        for (auto& v : q) v = -v;
        return q;
    }

    static double dot(std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
        return s;
    }

private:
    static void axpy(double a, std::span<const double> x, std::vector<double>& y) {
        for (std::size_t k = 0; k < y.size(); ++k) y[k] += a * x[k];
    }

    struct Pair {
        std::vector<double> s, y;
        double rho;
    };
    std::size_t history_;
    std::deque<Pair> pairs_;
};

// Objective: returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct LbfgsResult {
    std::vector<double> x;
    double f = 0.0;
    double f_initial = 0.0;
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    bool converged = false;           // gradient tolerance reached
    bool line_search_failed = false;  // stopped early; x is the best point found
};

namespace detail {
inline double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}
inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
}  // namespace detail

inline LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsConfig& cfg = {}) {
    const std::size_t n = x0.size();
    LbfgsResult r;
    r.x = std::move(x0);
    std::vector<double> g(n), g_new(n), x_new(n);
    r.f = f(r.x, g);
    r.f_initial = r.f;
    r.evaluations = 1;
    if (!std::isfinite(r.f) || !detail::all_finite(g))
        throw NumericalError("lbfgs_minimize: objective or gradient is non-finite at the starting point");

    LbfgsState mem(cfg.history);
    while (r.iterations < cfg.max_iters) {
        const double gnorm = detail::inf_norm(g);
        if (gnorm < cfg.grad_tol) {
            r.converged = true;
            break;
        }
        // Cap the very first step at unit infinity-norm length.
        const double first_scale = std::min(1.0, 1.0 / gnorm);
        auto d = mem.direction(g, first_scale);
        double slope = LbfgsState::dot(g, d);
        if (!(slope < 0.0)) {
            mem.clear();
            d = mem.direction(g, first_scale);
            slope = LbfgsState::dot(g, d);
        }

        double step = 1.0, f_new = 0.0;
        bool accepted = false;
        for (std::size_t e = 0; e < cfg.max_evals; ++e) {
            for (std::size_t k = 0; k < n; ++k) x_new[k] = r.x[k] + step * d[k];
            f_new = f(x_new, g_new);
            ++r.evaluations;
            if (std::isfinite(f_new) && detail::all_finite(g_new)) {
                if (f_new <= r.f + cfg.c1 * step * slope) {
                    accepted = true;
                    break;
                }
                // Near the optimum the sufficient decrease falls below the
                // resolution of f. Accept a step that leaves f unchanged to
                // rounding but shrinks the gradient, never above the start.
                const double noise = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(r.f));
                if (f_new <= r.f + noise && f_new <= r.f_initial && detail::inf_norm(g_new) < gnorm) {
                    accepted = true;
                    break;
                }
            }
            step *= cfg.backtrack;
        }
        if (!accepted) {
            r.line_search_failed = true;
            break;
        }
        std::vector<double> s(n), y(n);
        for (std::size_t k = 0; k < n; ++k) {
            s[k] = x_new[k] - r.x[k];
            y[k] = g_new[k] - g[k];
        }
        mem.push(std::move(s), std::move(y));
        r.x.swap(x_new);
        g.swap(g_new);
        r.f = f_new;
        ++r.iterations;
    }
    if (!r.converged && detail::inf_norm(g) < cfg.grad_tol) r.converged = true;
    return r;
}

}  // namespace rog::opt
