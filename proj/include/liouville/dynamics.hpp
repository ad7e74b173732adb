#pragma once

// State dynamics, initial densities and characteristic trajectories.
//
// Along a trajectory of x' = f(x) the density obeys d(log rho)/dt = -div f(x),
// so integrating the augmented state (x, log rho) from a sample of rho_0 gives
// exact density values at every visited point.

#include "errors.hpp"
#include "log.hpp"
#include "parallel.hpp"
#include "random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace liouville {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Initial density: diagonal Gaussian mixture
// ---------------------------------------------------------------------------

struct GaussianComponent {
    double weight = 1.0;
    Vector mean;
    Vector stdev;
};

class InitialDensity {
public:
    InitialDensity() = default;

    explicit InitialDensity(std::vector<GaussianComponent> components)
        : components_(std::move(components)) {
        if (components_.empty()) throw ConfigError("initial density needs at least one component");
        const auto d = components_.front().mean.size();
        if (d == 0) throw ConfigError("initial density has zero dimension");
        double total = 0.0;
        for (const auto& c : components_) {
            if (c.mean.size() != d || c.stdev.size() != d)
                throw ConfigError("initial density components have inconsistent dimensions");
            if (!(c.weight >= 0.0)) throw ConfigError("mixture weight must be nonnegative");
            if (!((c.stdev.array() > 0.0).all() && c.stdev.allFinite() && c.mean.allFinite()))
                throw ConfigError("initial density stdev entries must be positive and finite");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw ConfigError("mixture weights must sum to 1 (got " + std::to_string(total) + ")");
        for (const auto& c : components_) {
            log_norm_.push_back(std::log(c.weight) -
                                0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
                                c.stdev.array().log().sum());
        }
    }

    /// Independent normal marginals N(mean_i, stdev_i^2).
    static InitialDensity normal(Vector mean, Vector stdev) {
        return InitialDensity({GaussianComponent{1.0, std::move(mean), std::move(stdev)}});
    }

    std::size_t dim() const { return components_.empty() ? 0 : components_.front().mean.size(); }
    const std::vector<GaussianComponent>& components() const { return components_; }

    double log_pdf(const Eigen::Ref<const Vector>& x) const {
        double best = -std::numeric_limits<double>::infinity();
        std::vector<double> terms(components_.size());
        for (std::size_t k = 0; k < components_.size(); ++k) {
            const auto& c = components_[k];
            const double q = ((x - c.mean).array() / c.stdev.array()).square().sum();
            terms[k] = log_norm_[k] - 0.5 * q;
            best = std::max(best, terms[k]);
        }
        if (!std::isfinite(best)) return best;
        double s = 0.0;
        for (double t : terms) s += std::exp(t - best);
        return best + std::log(s);
    }

    double pdf(const Eigen::Ref<const Vector>& x) const { return std::exp(log_pdf(x)); }

    Vector sample(Rng& rng) const {
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::size_t k = components_.size() - 1;
        if (components_.size() > 1) {
            const double u = uniform(rng);
            double acc = 0.0;
            for (std::size_t j = 0; j < components_.size(); ++j) {
                acc += components_[j].weight;
                if (u < acc) {
                    k = j;
                    break;
                }
            }
        }
        const auto& c = components_[k];
        Vector x(c.mean.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = c.mean[i] + c.stdev[i] * normal(rng);
        return x;
    }

private:
    std::vector<GaussianComponent> components_;
    std::vector<double> log_norm_;
};

/// n i.i.d. draws from the initial density, reproducible per seed.
inline std::vector<Vector> sample_initial(const InitialDensity& density, std::size_t n,
                                          std::uint64_t seed) {
    if (n == 0) throw ConfigError("sample_initial: n must be at least 1");
    auto rng = make_rng(seed);
    std::vector<Vector> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(density.sample(rng));
    return out;
}

// ---------------------------------------------------------------------------
// System model
// ---------------------------------------------------------------------------

/// An autonomous ODE x' = f(x) with analytic divergence and an initial density.
/// Immutable after construction; safe to share across threads.
class SystemModel {
public:
    using Field = std::function<void(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx)>;
    using Divergence = std::function<double(const Eigen::Ref<const Vector>& x)>;

    SystemModel(std::string name, std::size_t dim, Field field, Divergence divergence,
                InitialDensity initial)
        : name_(std::move(name)), dim_(dim), field_(std::move(field)),
          divergence_(std::move(divergence)), initial_(std::move(initial)) {
        if (dim_ == 0) throw ConfigError("system dimension must be positive");
        if (initial_.dim() != dim_)
            throw ConfigError("initial density dimension does not match system '" + name_ + "'");
    }

    const std::string& name() const { return name_; }
    std::size_t dim() const { return dim_; }
    const InitialDensity& initial_density() const { return initial_; }

    void vector_field(const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx) const {
        field_(x, dx);
    }
    Vector vector_field(const Eigen::Ref<const Vector>& x) const {
        Vector dx(dim_);
        field_(x, dx);
        return dx;
    }
    double divergence(const Eigen::Ref<const Vector>& x) const { return divergence_(x); }

private:
    std::string name_;
    std::size_t dim_;
    Field field_;
    Divergence divergence_;
    InitialDensity initial_;
};

/// Central finite-difference divergence, used to cross-check analytic ones.
inline double finite_difference_divergence(const SystemModel& sys, const Vector& x,
                                           double step = 1e-6) {
    double div = 0.0;
    Vector xp = x, xm = x;
    for (std::size_t i = 0; i < sys.dim(); ++i) {
        const double h = step * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        div += (sys.vector_field(xp)[i] - sys.vector_field(xm)[i]) / (2.0 * h);
        xp[i] = xm[i] = x[i];
    }
    return div;
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4) integration of (x, log rho)
// ---------------------------------------------------------------------------

struct Tolerances {
    double rtol = 1e-8;
    double atol = 1e-8;
    std::size_t max_steps = 1'000'000;
};

struct Trajectory {
    std::vector<double> times;
    std::vector<Vector> states;
    std::vector<double> log_densities;
};

/// K snapshot times uniformly spaced on [0, t_final], both ends included.
inline std::vector<double> uniform_snapshots(double t_final, std::size_t count) {
    if (count == 0) throw ConfigError("snapshot count must be at least 1");
    if (count == 1) return {0.0};
    if (!(t_final > 0.0)) throw ConfigError("final time must be positive");
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k)
        out[k] = t_final * static_cast<double>(k) / static_cast<double>(count - 1);
    out.back() = t_final;
    return out;
}

namespace detail {

struct DormandPrince {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // b - b_hat, the embedded 4th-order error estimate weights.
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
};

// Right-hand side of the augmented system y = (x, log rho).
inline void augmented_rhs(const SystemModel& sys, const Vector& y, Vector& dy) {
    const auto d = static_cast<Eigen::Index>(sys.dim());
    sys.vector_field(y.head(d), dy.head(d));
    dy[d] = -sys.divergence(y.head(d));
}

inline double error_norm(const Vector& err, const Vector& y0, const Vector& y1,
                         const Tolerances& tol) {
    const auto scale = tol.atol + tol.rtol * y0.cwiseAbs().cwiseMax(y1.cwiseAbs()).array();
    return std::sqrt((err.array() / scale).square().mean());
}

} // namespace detail

/// Integrates x' = f(x), d(log rho)/dt = -div f from x0 and reports the state
/// and log-density at every snapshot. Steps adaptively and lands exactly on
/// each snapshot time.
inline Trajectory integrate_trajectory(const SystemModel& sys, const Vector& x0,
                                       const std::vector<double>& snapshots,
                                       const Tolerances& tol = {}, std::size_t trajectory_id = 0) {
    using DP = detail::DormandPrince;
    if (snapshots.empty() || snapshots.front() != 0.0)
        throw ConfigError("snapshot grid must start at t = 0");
    for (std::size_t k = 1; k < snapshots.size(); ++k)
        if (!(snapshots[k] > snapshots[k - 1]))
            throw ConfigError("snapshot grid must be strictly increasing");
    if (static_cast<std::size_t>(x0.size()) != sys.dim())
        throw ConfigError("initial state has wrong dimension");

    const auto d = static_cast<Eigen::Index>(sys.dim());
    const double log_rho0 = sys.initial_density().log_pdf(x0);
    if (!std::isfinite(log_rho0))
        throw IntegrationError(trajectory_id, 0.0, "initial density is zero at x0");

    Trajectory traj;
    traj.times = snapshots;
    traj.states.reserve(snapshots.size());
    traj.log_densities.reserve(snapshots.size());
    traj.states.push_back(x0);
    traj.log_densities.push_back(log_rho0);
    if (snapshots.size() == 1) return traj;

    const Eigen::Index n = d + 1;
    Vector y(n), y_new(n), tmp(n), err(n);
    Vector k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n);
    y.head(d) = x0;
    y[d] = log_rho0;

    detail::augmented_rhs(sys, y, k1);
    if (!k1.allFinite()) throw IntegrationError(trajectory_id, 0.0, "non-finite vector field");

    // Starting step from the local derivative scale.
    double h;
    {
        const Vector sc = (tol.atol + tol.rtol * y.cwiseAbs().array()).matrix();
        const double d0 = std::sqrt((y.array() / sc.array()).square().mean());
        const double d1 = std::sqrt((k1.array() / sc.array()).square().mean());
        h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h = std::min(h, snapshots.back());
    }

    double t = 0.0;
    std::size_t steps = 0;
    for (std::size_t k = 1; k < snapshots.size(); ++k) {
        const double target = snapshots[k];
        while (t < target) {
            if (++steps > tol.max_steps)
                throw IntegrationError(trajectory_id, t, "step budget exhausted");
            const bool last = t + h >= target;
            const double step = last ? target - t : h;
            if (step < 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t)))
                throw IntegrationError(trajectory_id, t, "step size underflow");

            tmp = y + step * DP::a21 * k1;
            detail::augmented_rhs(sys, tmp, k2);
            tmp = y + step * (DP::a31 * k1 + DP::a32 * k2);
            detail::augmented_rhs(sys, tmp, k3);
            tmp = y + step * (DP::a41 * k1 + DP::a42 * k2 + DP::a43 * k3);
            detail::augmented_rhs(sys, tmp, k4);
            tmp = y + step * (DP::a51 * k1 + DP::a52 * k2 + DP::a53 * k3 + DP::a54 * k4);
            detail::augmented_rhs(sys, tmp, k5);
            tmp = y + step * (DP::a61 * k1 + DP::a62 * k2 + DP::a63 * k3 + DP::a64 * k4 +
                              DP::a65 * k5);
            detail::augmented_rhs(sys, tmp, k6);
            y_new = y + step * (DP::b1 * k1 + DP::b3 * k3 + DP::b4 * k4 + DP::b5 * k5 +
                                DP::b6 * k6);
            detail::augmented_rhs(sys, y_new, k7);
            err = step * (DP::e1 * k1 + DP::e3 * k3 + DP::e4 * k4 + DP::e5 * k5 + DP::e6 * k6 +
                          DP::e7 * k7);

            const double en = detail::error_norm(err, y, y_new, tol);
            if (!std::isfinite(en)) {
                h = 0.1 * step;
                continue;
            }
            const double factor =
                en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
            if (en > 1.0) {
                h = step * std::min(1.0, factor);
                continue;
            }
            t = last ? target : t + step;
            y = y_new;
            k1 = k7; // first-same-as-last
            if (!y.allFinite()) throw IntegrationError(trajectory_id, t, "non-finite state");
            // A step clipped to land on a snapshot should not shrink the next one.
            h = last ? std::max(h, step * factor) : step * factor;
        }
        traj.states.push_back(y.head(d));
        traj.log_densities.push_back(y[d]);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Characteristic dataset
// ---------------------------------------------------------------------------

/// Flat table of (x, t, log rho) records with trajectory/snapshot provenance.
/// Densities are stored as log values since they can span many decades.
struct CharacteristicDataset {
    std::size_t dim = 0;
    std::vector<double> states; // row i occupies [i*dim, (i+1)*dim)
    std::vector<double> times;
    std::vector<double> log_rho;
    std::vector<std::uint32_t> traj;
    std::vector<std::uint32_t> snap;

    std::size_t size() const { return times.size(); }
    bool empty() const { return times.empty(); }

    Eigen::Map<const Vector> state(std::size_t i) const {
        return Eigen::Map<const Vector>(states.data() + i * dim, static_cast<Eigen::Index>(dim));
    }
    double rho(std::size_t i) const { return std::exp(log_rho[i]); }

    void push_back(const Eigen::Ref<const Vector>& x, double t, double lr, std::uint32_t tr,
                   std::uint32_t sn) {
        states.insert(states.end(), x.data(), x.data() + x.size());
        times.push_back(t);
        log_rho.push_back(lr);
        traj.push_back(tr);
        snap.push_back(sn);
    }

    void append(const CharacteristicDataset& other) {
        if (other.empty()) return;
        if (dim == 0) dim = other.dim;
        if (other.dim != dim) throw DataError("cannot append datasets of different dimension");
        states.insert(states.end(), other.states.begin(), other.states.end());
        times.insert(times.end(), other.times.begin(), other.times.end());
        log_rho.insert(log_rho.end(), other.log_rho.begin(), other.log_rho.end());
        traj.insert(traj.end(), other.traj.begin(), other.traj.end());
        snap.insert(snap.end(), other.snap.begin(), other.snap.end());
    }

    /// Points with t <= t_max (inclusive up to a relative 1e-12 slack).
    CharacteristicDataset restrict_time(double t_max) const {
        CharacteristicDataset out;
        out.dim = dim;
        const double limit = t_max * (1.0 + 1e-12);
        for (std::size_t i = 0; i < size(); ++i)
            if (times[i] <= limit) out.push_back(state(i), times[i], log_rho[i], traj[i], snap[i]);
        return out;
    }

    std::size_t trajectory_count() const {
        std::size_t n = 0;
        for (auto id : traj) n = std::max<std::size_t>(n, id + 1);
        return n;
    }
};

struct DatasetOptions {
    Tolerances tol{};
    /// Trajectory ids start here; lets a dataset be extended with fresh samples.
    std::size_t first_trajectory = 0;
    /// Replace trajectories whose integration fails with a fresh draw.
    bool resample_failures = true;
    std::size_t max_attempts = 32;
};

/// Samples n_traj initial states, integrates each to every snapshot and
/// flattens the result. Trajectory i draws its initial state from a stream
/// keyed on (seed, i, attempt), so the output does not depend on the thread
/// count and extending a dataset with first_trajectory = n gives the same
/// points as generating n + m trajectories at once.
inline CharacteristicDataset generate_dataset(const SystemModel& sys, std::size_t n_traj,
                                              const std::vector<double>& snapshots,
                                              std::uint64_t seed,
                                              const DatasetOptions& opts = {}) {
    if (n_traj == 0) throw ConfigError("generate_dataset: n_traj must be at least 1");
    std::vector<Trajectory> results(n_traj);
    parallel_for(n_traj, [&](std::size_t i) {
        const std::size_t id = opts.first_trajectory + i;
        for (std::size_t attempt = 0;; ++attempt) {
            auto rng = make_rng(derive_seed(seed, id, attempt));
            const Vector x0 = sys.initial_density().sample(rng);
            try {
                results[i] = integrate_trajectory(sys, x0, snapshots, opts.tol, id);
                return;
            } catch (const IntegrationError& e) {
                if (!opts.resample_failures || attempt + 1 >= opts.max_attempts) throw;
                log_warn(std::string("resampling after failed integration: ") + e.what());
            }
        }
    });
    CharacteristicDataset out;
    out.dim = sys.dim();
    const std::size_t k = snapshots.size();
    out.states.reserve(n_traj * k * sys.dim());
    for (std::size_t i = 0; i < n_traj; ++i)
        for (std::size_t s = 0; s < k; ++s)
            out.push_back(results[i].states[s], results[i].times[s], results[i].log_densities[s],
                          static_cast<std::uint32_t>(opts.first_trajectory + i),
                          static_cast<std::uint32_t>(s));
    return out;
}

} // namespace liouville
