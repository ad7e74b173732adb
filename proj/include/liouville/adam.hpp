#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace liouville {

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t iterations = 5000;
    /// Learning rate is multiplied by decay_rate every decay_every iterations
    /// (0 disables the schedule).
    std::size_t decay_every = 0;
    double decay_rate = 0.5;
};

struct AdamResult {
    Eigen::VectorXd x;
    std::vector<double> trace; // objective reported at each iteration
};

/// f(x, iteration, grad) may draw a fresh minibatch per iteration; it must be
/// deterministic given the iteration index for the run to be reproducible.
using StochasticObjective =
    std::function<double(const Eigen::VectorXd& x, std::size_t iteration, Eigen::VectorXd& grad)>;

inline double adam_learning_rate(const AdamOptions& opt, std::size_t iteration) {
    if (opt.decay_every == 0) return opt.learning_rate;
    return opt.learning_rate *
           std::pow(opt.decay_rate, static_cast<double>(iteration / opt.decay_every));
}

inline AdamResult adam_minimize(const StochasticObjective& fn, const Eigen::VectorXd& x0,
                                const AdamOptions& opt = {}) {
    AdamResult res;
    res.x = x0;
    res.trace.reserve(opt.iterations);
    Eigen::VectorXd m = Eigen::VectorXd::Zero(x0.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(x0.size());
    Eigen::VectorXd g(x0.size());
    double b1t = 1.0, b2t = 1.0;
    for (std::size_t it = 0; it < opt.iterations; ++it) {
        res.trace.push_back(fn(res.x, it, g));
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseAbs2();
        b1t *= opt.beta1;
        b2t *= opt.beta2;
        const double lr = adam_learning_rate(opt, it);
        if (lr == 0.0) continue;
        const double step = lr / (1.0 - b1t);
        res.x.array() -= step * m.array() / ((v.array() / (1.0 - b2t)).sqrt() + opt.epsilon);
    }
    return res;
}

} // namespace liouville
