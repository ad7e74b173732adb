#pragma once

// Validation error against characteristics data and grid evaluation of the
// learned density (marginals by trapezoidal quadrature, conditional slices).

#include "density_net.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "parallel.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace liouville {

struct ValidationReport {
    std::vector<double> snapshot_times;
    /// Empty where the reference density is zero at every point of a snapshot.
    std::vector<std::optional<double>> nrmse;
    std::vector<std::size_t> group_sizes;
    std::size_t dataset_size = 0;

    /// Mean over defined snapshots, optionally only those with t > t_min.
    double time_average(double t_min = -std::numeric_limits<double>::infinity()) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < nrmse.size(); ++k)
            if (nrmse[k] && snapshot_times[k] > t_min) {
                sum += *nrmse[k];
                ++n;
            }
        return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    }
    double max() const {
        double m = 0.0;
        for (const auto& v : nrmse)
            if (v) m = std::max(m, *v);
        return m;
    }
};

/// Per-snapshot NRMSE from predicted and reference densities:
/// sqrt(sum (pred - ref)^2 / sum ref^2) over the points of each snapshot.
inline ValidationReport nrmse_from_values(const std::vector<double>& predicted,
                                          const std::vector<double>& reference,
                                          const std::vector<double>& times,
                                          const std::vector<std::uint32_t>& snapshot) {
    const std::size_t n = predicted.size();
    if (reference.size() != n || times.size() != n || snapshot.size() != n)
        throw DataError("nrmse: input lengths differ");
    if (n == 0) throw DataError("nrmse: empty validation set");
    struct Acc {
        double t = 0.0, num = 0.0, den = 0.0;
        std::size_t count = 0;
    };
    std::map<std::uint32_t, Acc> groups;
    for (std::size_t i = 0; i < n; ++i) {
        auto& g = groups[snapshot[i]];
        if (g.count == 0) g.t = times[i];
        const double e = predicted[i] - reference[i];
        g.num += e * e;
        g.den += reference[i] * reference[i];
        ++g.count;
    }
    ValidationReport rep;
    rep.dataset_size = n;
    for (const auto& [k, g] : groups) {
        rep.snapshot_times.push_back(g.t);
        rep.group_sizes.push_back(g.count);
        if (g.den > 0.0) rep.nrmse.emplace_back(std::sqrt(g.num / g.den));
        else rep.nrmse.emplace_back(std::nullopt);
    }
    return rep;
}

inline std::vector<double> predict_density(const DensityNetwork& net, const CharacteristicDataset& data) {
    const auto d = static_cast<Eigen::Index>(data.dim);
    if (net.input_dim() != data.dim + 1) throw DataError("network and dataset dimensions differ");
    std::vector<double> out(data.size());
    const auto chunks = make_chunks(data.size(), 4096);
    parallel_for(chunks.size(), [&](std::size_t c) {
        const auto [begin, end] = chunks[c];
        Matrix in(d + 1, static_cast<Eigen::Index>(end - begin));
        for (std::size_t i = begin; i < end; ++i) {
            const auto j = static_cast<Eigen::Index>(i - begin);
            in.col(j).head(d) = data.state(i);
            in(d, j) = data.times[i];
        }
        const RowVector y = net.log_rho_batch(in);
        for (std::size_t i = begin; i < end; ++i) out[i] = std::exp(y[static_cast<Eigen::Index>(i - begin)]);
    });
    return out;
}

inline ValidationReport nrmse(const DensityNetwork& net, const CharacteristicDataset& validation) {
    std::vector<double> ref(validation.size());
    for (std::size_t i = 0; i < validation.size(); ++i) ref[i] = validation.rho(i);
    return nrmse_from_values(predict_density(net, validation), ref, validation.times, validation.snap);
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

struct AxisGrid {
    double lo = 0.0;
    double hi = 1.0;
    std::size_t n = 2;

    void validate(const std::string& what) const {
        if (n < 2 || !(hi > lo)) throw ConfigError(what + ": grid needs n >= 2 and hi > lo");
    }
    double at(std::size_t i) const {
        return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
};

/// Treatment of a state coordinate that is not a plot axis.
struct OtherCoordinate {
    enum class Mode { fixed, integrate, average };
    Mode mode = Mode::fixed;
    double value = 0.0; // fixed
    AxisGrid range;     // integrate / average

    static OtherCoordinate at(double v) { return {Mode::fixed, v, {}}; }
    static OtherCoordinate integrate(AxisGrid g) { return {Mode::integrate, 0.0, g}; }
    /// Interval average; a zero-width interval reduces to the fixed value.
    static OtherCoordinate average(double lo, double hi, std::size_t n) {
        if (hi == lo) return at(lo);
        return {Mode::average, 0.0, {lo, hi, n}};
    }
};

struct DensityGrid {
    std::size_t axis_a = 0, axis_b = 1;
    AxisGrid grid_a, grid_b;
    double t = 0.0;
    /// One entry per state coordinate; entries for the two axes are unused.
    std::vector<OtherCoordinate> others;
    std::string kind; // "marginal" or "conditional"
    Matrix values;    // grid_a.n x grid_b.n
};

struct GridLimits {
    std::size_t max_quadrature_dims = 3;
    std::size_t max_evaluations = 200'000'000;
};

/// Evaluates the density on the (axis_a, axis_b) grid at time t, treating the
/// remaining coordinates as specified (fixed, integrated or interval-averaged
/// with the trapezoid rule).
inline DensityGrid evaluate_grid(const DensityNetwork& net, std::size_t axis_a, std::size_t axis_b,
                                 const AxisGrid& grid_a, const AxisGrid& grid_b, double t,
                                 std::vector<OtherCoordinate> others, std::string kind,
                                 const GridLimits& limits = {}) {
    const std::size_t d = net.input_dim() - 1;
    if (axis_a >= d || axis_b >= d || axis_a == axis_b)
        throw ConfigError("grid axes must be two distinct state indices below " + std::to_string(d));
    if (others.size() != d) throw ConfigError("need one coordinate specification per state dimension");
    grid_a.validate("axis a");
    grid_b.validate("axis b");

    // Tensor quadrature over the non-fixed, non-axis coordinates.
    std::vector<std::size_t> qdims;
    std::size_t nodes = 1;
    for (std::size_t k = 0; k < d; ++k) {
        if (k == axis_a || k == axis_b || others[k].mode == OtherCoordinate::Mode::fixed) continue;
        others[k].range.validate("coordinate " + std::to_string(k));
        qdims.push_back(k);
        nodes *= others[k].range.n;
    }
    if (qdims.size() > limits.max_quadrature_dims)
        throw ConfigError("grid needs quadrature over " + std::to_string(qdims.size()) +
                          " dimensions (limit " + std::to_string(limits.max_quadrature_dims) +
                          "); fix more coordinates with a conditional slice instead");
    const double total = static_cast<double>(nodes) * static_cast<double>(grid_a.n * grid_b.n);
    if (total > static_cast<double>(limits.max_evaluations))
        throw ConfigError("grid needs " + std::to_string(static_cast<long long>(total)) +
                          " network evaluations (limit " + std::to_string(limits.max_evaluations) +
                          "); reduce the grid or quadrature resolution");

    Matrix qnodes(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(nodes));
    Vector qweights(static_cast<Eigen::Index>(nodes));
    for (std::size_t m = 0; m < nodes; ++m) {
        std::size_t rem = m;
        double w = 1.0;
        for (std::size_t k = 0; k < d; ++k)
            qnodes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) = others[k].value;
        for (auto k : qdims) {
            const auto& g = others[k].range;
            const std::size_t i = rem % g.n;
            rem /= g.n;
            const double h = (g.hi - g.lo) / static_cast<double>(g.n - 1);
            double wk = (i == 0 || i == g.n - 1) ? 0.5 * h : h;
            if (others[k].mode == OtherCoordinate::Mode::average) wk /= (g.hi - g.lo);
            w *= wk;
            qnodes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) = g.at(i);
        }
        qweights[static_cast<Eigen::Index>(m)] = w;
    }

    DensityGrid out{axis_a, axis_b, grid_a, grid_b, t, std::move(others), std::move(kind),
                    Matrix::Zero(static_cast<Eigen::Index>(grid_a.n), static_cast<Eigen::Index>(grid_b.n))};
    const std::size_t cells = grid_a.n * grid_b.n;
    const std::size_t per_chunk = std::max<std::size_t>(1, 8192 / nodes);
    const auto chunks = make_chunks(cells, per_chunk);
    parallel_for(chunks.size(), [&](std::size_t c) {
        const auto [begin, end] = chunks[c];
        const auto cols = static_cast<Eigen::Index>((end - begin) * nodes);
        Matrix in(static_cast<Eigen::Index>(d + 1), cols);
        for (std::size_t cell = begin; cell < end; ++cell) {
            const std::size_t i = cell / grid_b.n, j = cell % grid_b.n;
            const auto base = static_cast<Eigen::Index>((cell - begin) * nodes);
            in.block(0, base, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(nodes)) = qnodes;
            in.row(static_cast<Eigen::Index>(axis_a)).segment(base, static_cast<Eigen::Index>(nodes)).setConstant(grid_a.at(i));
            in.row(static_cast<Eigen::Index>(axis_b)).segment(base, static_cast<Eigen::Index>(nodes)).setConstant(grid_b.at(j));
            in.row(static_cast<Eigen::Index>(d)).segment(base, static_cast<Eigen::Index>(nodes)).setConstant(t);
        }
        const RowVector rho = net.log_rho_batch(in).array().exp();
        for (std::size_t cell = begin; cell < end; ++cell) {
            const auto base = static_cast<Eigen::Index>((cell - begin) * nodes);
            out.values(static_cast<Eigen::Index>(cell / grid_b.n), static_cast<Eigen::Index>(cell % grid_b.n)) =
                rho.segment(base, static_cast<Eigen::Index>(nodes)).dot(qweights);
        }
    });
    return out;
}

/// Marginal density of (x_a, x_b) at time t, integrating every other
/// coordinate over the given bounds.
inline DensityGrid marginal_grid(const DensityNetwork& net, std::size_t axis_a, std::size_t axis_b,
                                 const AxisGrid& grid_a, const AxisGrid& grid_b, double t,
                                 const std::vector<AxisGrid>& bounds, const GridLimits& limits = {}) {
    const std::size_t d = net.input_dim() - 1;
    if (bounds.size() != d) throw ConfigError("marginal needs integration bounds for every state dimension");
    std::vector<OtherCoordinate> others;
    for (const auto& b : bounds) others.push_back(OtherCoordinate::integrate(b));
    return evaluate_grid(net, axis_a, axis_b, grid_a, grid_b, t, std::move(others), "marginal", limits);
}

/// Unnormalized conditional slice: the joint density on the (x_a, x_b) grid
/// with the remaining coordinates fixed or averaged over an interval.
inline DensityGrid conditional_slice(const DensityNetwork& net, std::size_t axis_a, std::size_t axis_b,
                                     const AxisGrid& grid_a, const AxisGrid& grid_b, double t,
                                     std::vector<OtherCoordinate> others, const GridLimits& limits = {}) {
    for (const auto& o : others)
        if (o.mode == OtherCoordinate::Mode::integrate)
            throw ConfigError("conditional slices fix or average coordinates; use a marginal to integrate");
    return evaluate_grid(net, axis_a, axis_b, grid_a, grid_b, t, std::move(others), "conditional", limits);
}

/// Trapezoidal integral of the grid values over both axes.
inline double grid_mass(const DensityGrid& g) {
    const double ha = (g.grid_a.hi - g.grid_a.lo) / static_cast<double>(g.grid_a.n - 1);
    const double hb = (g.grid_b.hi - g.grid_b.lo) / static_cast<double>(g.grid_b.n - 1);
    double mass = 0.0;
    for (Eigen::Index i = 0; i < g.values.rows(); ++i)
        for (Eigen::Index j = 0; j < g.values.cols(); ++j) {
            const double wa = (i == 0 || i == g.values.rows() - 1) ? 0.5 : 1.0;
            const double wb = (j == 0 || j == g.values.cols() - 1) ? 0.5 : 1.0;
            mass += wa * wb * g.values(i, j);
        }
    return mass * ha * hb;
}

} // namespace liouville
