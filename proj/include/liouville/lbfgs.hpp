#pragma once

// Limited-memory BFGS with a strong Wolfe line search (bracketing + zoom with
// safeguarded cubic interpolation).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace liouville {

struct LbfgsOptions {
    std::size_t history = 10;
    std::size_t max_iterations = 500;
    /// Stop when max_i |g_i| falls below this.
    double gradient_tolerance = 1e-10;
    /// Stop when (f_prev - f) / max(|f_prev|, |f|, 1e-300) falls below this.
    double relative_decrease_tolerance = 1e-12;
    double c1 = 1e-4; // sufficient decrease
    double c2 = 0.9;  // curvature
    std::size_t max_line_search_evaluations = 25;
};

enum class LbfgsStatus { gradient_converged, relative_decrease, max_iterations, line_search_failed };

inline std::string to_string(LbfgsStatus s) {
    switch (s) {
    case LbfgsStatus::gradient_converged: return "gradient_converged";
    case LbfgsStatus::relative_decrease: return "relative_decrease";
    case LbfgsStatus::max_iterations: return "max_iterations";
    case LbfgsStatus::line_search_failed: return "line_search_failed";
    }
    return "unknown";
}

struct LbfgsResult {
    Eigen::VectorXd x;
    double value = 0.0;
    Eigen::VectorXd gradient;
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    LbfgsStatus status = LbfgsStatus::max_iterations;
    /// Objective after every accepted iterate, starting with the initial value.
    std::vector<double> trace;
};

/// f(x, grad) returns the objective and writes its gradient.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

namespace detail {

/// Minimizer of the cubic through (x1, f1, g1), (x2, f2, g2), clamped to
/// [lo, hi]; falls back to the midpoint when the cubic has no minimum.
inline double cubic_minimizer(double x1, double f1, double g1, double x2, double f2, double g2,
                              double lo, double hi) {
    const double d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    const double d2_sq = d1 * d1 - g1 * g2;
    if (d2_sq >= 0.0 && std::isfinite(d2_sq)) {
        const double d2 = std::sqrt(d2_sq);
        double pos;
        if (x1 <= x2) pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2));
        else pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2));
        if (std::isfinite(pos)) return std::clamp(pos, lo, hi);
    }
    return 0.5 * (lo + hi);
}

struct LinePoint {
    double alpha = 0.0;
    double f = 0.0;
    double dphi = 0.0;
    Eigen::VectorXd grad;
};

struct LineSearchOutcome {
    bool ok = false;
    LinePoint point;
    std::size_t evaluations = 0;
};

inline LineSearchOutcome strong_wolfe(const Objective& fn, const Eigen::VectorXd& x,
                                      const Eigen::VectorXd& dir, double f0, double dphi0,
                                      double alpha0, const LbfgsOptions& opt) {
    LineSearchOutcome out;
    Eigen::VectorXd trial(x.size());
    auto eval = [&](double alpha) {
        LinePoint p;
        p.alpha = alpha;
        p.grad.resize(x.size());
        trial = x + alpha * dir;
        p.f = fn(trial, p.grad);
        p.dphi = p.grad.dot(dir);
        ++out.evaluations;
        return p;
    };
    auto armijo_ok = [&](const LinePoint& p) {
        return std::isfinite(p.f) && p.f <= f0 + opt.c1 * p.alpha * dphi0;
    };
    auto curvature_ok = [&](const LinePoint& p) { return std::abs(p.dphi) <= -opt.c2 * dphi0; };

    // Best Armijo point seen, returned when the search runs out of budget.
    LinePoint best;
    bool have_best = false;
    auto note = [&](const LinePoint& p) {
        if (armijo_ok(p) && (!have_best || p.f < best.f)) {
            best = p;
            have_best = true;
        }
    };

    auto zoom = [&](LinePoint lo, LinePoint hi) -> LineSearchOutcome& {
        while (out.evaluations < opt.max_line_search_evaluations) {
            const double a = std::min(lo.alpha, hi.alpha), b = std::max(lo.alpha, hi.alpha);
            const double width = b - a;
            if (width <= std::numeric_limits<double>::epsilon() * std::max(1.0, b)) break;
            double alpha;
            if (std::isfinite(hi.f))
                alpha = cubic_minimizer(lo.alpha, lo.f, lo.dphi, hi.alpha, hi.f, hi.dphi,
                                        a + 0.1 * width, b - 0.1 * width);
            else
                alpha = 0.5 * (a + b);
            LinePoint p = eval(alpha);
            note(p);
            if (!armijo_ok(p) || p.f >= lo.f) {
                hi = std::move(p);
            } else {
                if (curvature_ok(p)) {
                    out.ok = true;
                    out.point = std::move(p);
                    return out;
                }
                if (p.dphi * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
                lo = std::move(p);
            }
        }
        if (have_best) {
            out.ok = true;
            out.point = best;
        }
        return out;
    };

    LinePoint prev{0.0, f0, dphi0, {}};
    double alpha = alpha0;
    for (std::size_t i = 0; out.evaluations < opt.max_line_search_evaluations; ++i) {
        LinePoint p = eval(alpha);
        note(p);
        if (!std::isfinite(p.f) || !p.grad.allFinite()) {
            // Overshot into a non-finite region: shrink towards the last good point.
            alpha = prev.alpha + 0.25 * (alpha - prev.alpha);
            continue;
        }
        if (!armijo_ok(p) || (i > 0 && p.f >= prev.f)) return zoom(prev, p);
        if (curvature_ok(p)) {
            out.ok = true;
            out.point = std::move(p);
            return out;
        }
        if (p.dphi >= 0.0) return zoom(p, prev);
        const double lo = p.alpha + 0.01 * (p.alpha - prev.alpha);
        const double hi = 10.0 * p.alpha;
        const double next = cubic_minimizer(prev.alpha, prev.f, prev.dphi, p.alpha, p.f, p.dphi, lo, hi);
        prev = std::move(p);
        alpha = next;
    }
    if (have_best) {
        out.ok = true;
        out.point = best;
    }
    return out;
}

} // namespace detail

/// Minimizes fn from x0. Accepted iterates satisfy the Armijo condition, so
/// the objective trace is non-increasing. A failed line search ends the run
/// with status line_search_failed and the best point so far.
inline LbfgsResult lbfgs_minimize(const Objective& fn, const Eigen::VectorXd& x0,
                                  const LbfgsOptions& opt = {}) {
    LbfgsResult res;
    res.x = x0;
    res.gradient.resize(x0.size());
    res.value = fn(res.x, res.gradient);
    res.evaluations = 1;
    res.trace.push_back(res.value);

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;
    std::vector<double> alpha_buf;

    for (;;) {
        if (res.gradient.lpNorm<Eigen::Infinity>() <= opt.gradient_tolerance) {
            res.status = LbfgsStatus::gradient_converged;
            return res;
        }
        if (res.iterations >= opt.max_iterations) {
            res.status = LbfgsStatus::max_iterations;
            return res;
        }

        // Two-loop recursion for d = -H g.
        Eigen::VectorXd dir = -res.gradient;
        const std::size_t m = s_hist.size();
        alpha_buf.assign(m, 0.0);
        for (std::size_t i = m; i-- > 0;) {
            alpha_buf[i] = rho_hist[i] * s_hist[i].dot(dir);
            dir -= alpha_buf[i] * y_hist[i];
        }
        if (m > 0) dir *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t i = 0; i < m; ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(dir);
            dir += (alpha_buf[i] - beta) * s_hist[i];
        }

        double dphi0 = res.gradient.dot(dir);
        if (!(dphi0 < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -res.gradient;
            dphi0 = -res.gradient.squaredNorm();
        }
        double alpha0 = s_hist.empty() ? std::min(1.0, 1.0 / res.gradient.lpNorm<1>()) : 1.0;

        auto ls = detail::strong_wolfe(fn, res.x, dir, res.value, dphi0, alpha0, opt);
        res.evaluations += ls.evaluations;
        if (!ls.ok && !s_hist.empty()) {
            // Retry once along steepest descent with fresh memory.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -res.gradient;
            dphi0 = -res.gradient.squaredNorm();
            alpha0 = std::min(1.0, 1.0 / res.gradient.lpNorm<1>());
            ls = detail::strong_wolfe(fn, res.x, dir, res.value, dphi0, alpha0, opt);
            res.evaluations += ls.evaluations;
        }
        if (!ls.ok) {
            res.status = LbfgsStatus::line_search_failed;
            return res;
        }

        Eigen::VectorXd s = ls.point.alpha * dir;
        Eigen::VectorXd y = ls.point.grad - res.gradient;
        const double previous = res.value;
        res.x += s;
        res.value = ls.point.f;
        res.gradient = std::move(ls.point.grad);
        ++res.iterations;
        res.trace.push_back(res.value);

        const double sy = s.dot(y);
        if (sy > 1e-12 * y.squaredNorm()) {
            if (s_hist.size() == opt.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
        }

        const double scale = std::max({std::abs(previous), std::abs(res.value), 1e-300});
        if ((previous - res.value) / scale < opt.relative_decrease_tolerance) {
            res.status = LbfgsStatus::relative_decrease;
            return res;
        }
    }
}

} // namespace liouville
