#pragma once

// Test-only oracles shared by the unit and acceptance suites. Nothing here
// calls into the analytic derivative code it is used to check.

#include "liouville/density_net.hpp"
#include "liouville/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace liouville::testing {

/// Central finite-difference gradient of scalar(net) over all flat parameters
/// with step 1e-6 * (1 + |theta_m|).
inline Vector fd_param_gradient(const DensityNetwork& net,
                                const std::function<double(const DensityNetwork&)>& scalar,
                                double rel_step = 1e-6) {
    DensityNetwork work = net;
    const Vector theta = net.pack();
    Vector grad(theta.size());
    for (Eigen::Index m = 0; m < theta.size(); ++m) {
        const double h = rel_step * (1.0 + std::abs(theta[m]));
        Vector tp = theta, tm = theta;
        tp[m] += h;
        tm[m] -= h;
        work.unpack(tp);
        const double fp = scalar(work);
        work.unpack(tm);
        const double fm = scalar(work);
        grad[m] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

/// Largest componentwise relative error, with components below floor times
/// the largest magnitude compared on that absolute scale.
inline double max_relative_error(const Vector& analytic, const Vector& reference,
                                 double floor = 1e-3) {
    const double scale = std::max(analytic.cwiseAbs().maxCoeff(), reference.cwiseAbs().maxCoeff());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(reference[i]), floor * scale, 1e-300});
        worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
    }
    return worst;
}

/// Random network with N(0, s^2) weights and biases.
inline DensityNetwork random_network(NetworkArchitecture arch, std::uint64_t seed, double s = 0.5) {
    DensityNetwork net(std::move(arch));
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, s);
    Vector theta(static_cast<Eigen::Index>(net.num_params()));
    for (auto& v : theta) v = n(rng);
    net.unpack(theta);
    return net;
}

} // namespace liouville::testing
