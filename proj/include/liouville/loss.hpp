#pragma once

// Physics-informed objective: weighted log-density regression on
// characteristic data plus the mean squared Liouville residual on
// collocation points.
//
// With psi = log rho_theta the Liouville operator is evaluated as
//   L[rho_theta] = rho_theta * (d psi/dt + grad_x psi . f + div f),
// and d psi/dt + grad_x psi . f is one directional derivative of the network
// along (f(x), 1).

#include "density_net.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "parallel.hpp"
#include "random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace liouville {

enum class WeightScheme { rho, sqrt_rho, unit };

inline std::string to_string(WeightScheme w) {
    switch (w) {
    case WeightScheme::rho: return "rho";
    case WeightScheme::sqrt_rho: return "sqrt_rho";
    case WeightScheme::unit: return "unit";
    }
    return "unit";
}

inline WeightScheme parse_weight_scheme(const std::string& s) {
    if (s == "rho") return WeightScheme::rho;
    if (s == "sqrt_rho") return WeightScheme::sqrt_rho;
    if (s == "unit") return WeightScheme::unit;
    throw ConfigError("unknown weight scheme '" + s + "' (expected rho, sqrt_rho or unit)");
}

struct LossConfig {
    double lambda = 0.5;
    WeightScheme weights = WeightScheme::rho;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw ConfigError("PDE weight lambda must be finite and nonnegative");
    }
};

// ---------------------------------------------------------------------------
// Collocation points
// ---------------------------------------------------------------------------

enum class CollocationOrigin : std::uint8_t { from_data, uniform_random };

struct CollocationSet {
    std::size_t dim = 0;
    std::vector<double> states;
    std::vector<double> times;
    std::vector<CollocationOrigin> origin;

    std::size_t size() const { return times.size(); }
    Eigen::Map<const Vector> state(std::size_t i) const {
        return Eigen::Map<const Vector>(states.data() + i * dim, static_cast<Eigen::Index>(dim));
    }
    void push_back(const Eigen::Ref<const Vector>& x, double t, CollocationOrigin o) {
        states.insert(states.end(), x.data(), x.data() + x.size());
        times.push_back(t);
        origin.push_back(o);
    }
    void append(const CollocationSet& other) {
        if (dim == 0) dim = other.dim;
        states.insert(states.end(), other.states.begin(), other.states.end());
        times.insert(times.end(), other.times.begin(), other.times.end());
        origin.insert(origin.end(), other.origin.begin(), other.origin.end());
    }
    std::size_t count(CollocationOrigin o) const {
        return static_cast<std::size_t>(std::count(origin.begin(), origin.end(), o));
    }
};

struct Box {
    Vector lo;
    Vector hi;
};

/// Axis-aligned bounding box of the dataset states, widened by a fraction of
/// the width on every side.
inline Box bounding_box(const CharacteristicDataset& data, double inflation = 0.1) {
    if (data.empty()) throw DataError("bounding box of an empty dataset");
    const auto d = static_cast<Eigen::Index>(data.dim);
    Box b{Vector::Constant(d, std::numeric_limits<double>::infinity()),
          Vector::Constant(d, -std::numeric_limits<double>::infinity())};
    for (std::size_t i = 0; i < data.size(); ++i) {
        b.lo = b.lo.cwiseMin(data.state(i));
        b.hi = b.hi.cwiseMax(data.state(i));
    }
    const Vector pad = inflation * (b.hi - b.lo);
    b.lo -= pad;
    b.hi += pad;
    return b;
}

/// n points uniform in box x [0, t_max], reproducible per seed.
inline CollocationSet sample_collocation(const Box& box, double t_max, std::size_t n,
                                         std::uint64_t seed) {
    if (n == 0) throw ConfigError("sample_collocation: n must be at least 1");
    if (box.lo.size() != box.hi.size() || !(box.hi.array() >= box.lo.array()).all())
        throw ConfigError("sample_collocation: invalid box");
    CollocationSet out;
    out.dim = static_cast<std::size_t>(box.lo.size());
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vector x(box.lo.size());
    out.states.reserve(n * out.dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < x.size(); ++k)
            x[k] = box.lo[k] + (box.hi[k] - box.lo[k]) * unit(rng);
        out.push_back(x, t_max * unit(rng), CollocationOrigin::uniform_random);
    }
    return out;
}

inline CollocationSet collocation_from_data(const CharacteristicDataset& data) {
    CollocationSet out;
    out.dim = data.dim;
    out.states = data.states;
    out.times = data.times;
    out.origin.assign(data.size(), CollocationOrigin::from_data);
    return out;
}

// ---------------------------------------------------------------------------
// Prepared batches
// ---------------------------------------------------------------------------

/// Network inputs, targets and weights for the data term.
struct DataBatch {
    Matrix inputs; // (d+1) x N
    RowVector target;
    RowVector weight;
    std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
};

inline DataBatch make_data_batch(const CharacteristicDataset& data, WeightScheme scheme) {
    if (data.empty()) throw DataError("data term needs at least one point");
    const auto d = static_cast<Eigen::Index>(data.dim);
    const auto n = static_cast<Eigen::Index>(data.size());
    DataBatch b{Matrix(d + 1, n), RowVector(n), RowVector(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const double lr = data.log_rho[idx];
        if (!std::isfinite(lr))
            throw DataError("data point " + std::to_string(idx) + " (trajectory " +
                            std::to_string(data.traj[idx]) + ", snapshot " +
                            std::to_string(data.snap[idx]) + ") has nonpositive density");
        b.inputs.col(i).head(d) = data.state(idx);
        b.inputs(d, i) = data.times[idx];
        b.target[i] = lr;
        switch (scheme) {
        case WeightScheme::rho: b.weight[i] = std::exp(lr); break;
        case WeightScheme::sqrt_rho: b.weight[i] = std::exp(0.5 * lr); break;
        case WeightScheme::unit: b.weight[i] = 1.0; break;
        }
    }
    return b;
}

/// Network inputs plus the field direction (f(x), 1) and div f per point.
struct PdeBatch {
    Matrix inputs;
    Matrix directions;
    RowVector divergence;
    std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
};

inline PdeBatch make_pde_batch(const SystemModel& sys, const CollocationSet& c) {
    if (c.size() == 0) throw DataError("PDE term needs at least one collocation point");
    if (c.dim != sys.dim()) throw DataError("collocation dimension does not match the system");
    const auto d = static_cast<Eigen::Index>(sys.dim());
    const auto n = static_cast<Eigen::Index>(c.size());
    PdeBatch b{Matrix(d + 1, n), Matrix(d + 1, n), RowVector(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto x = c.state(idx);
        b.inputs.col(i).head(d) = x;
        b.inputs(d, i) = c.times[idx];
        sys.vector_field(x, b.directions.col(i).head(d));
        b.directions(d, i) = 1.0;
        b.divergence[i] = sys.divergence(x);
    }
    if (!b.directions.allFinite() || !b.divergence.allFinite())
        throw NumericError("vector field is not finite at some collocation point");
    return b;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LossValue {
    double value = 0.0;
    Vector gradient;
};

namespace detail {

inline constexpr std::size_t loss_chunk = 512;

/// Chunked evaluation with a fixed chunk layout and in-order reduction, so
/// results are bitwise independent of the worker count.
template <typename ChunkFn>
LossValue reduce_chunks(std::size_t n, std::size_t num_params, ChunkFn&& chunk_fn) {
    const auto chunks = make_chunks(n, loss_chunk);
    std::vector<LossValue> parts(chunks.size());
    parallel_for(chunks.size(), [&](std::size_t c) {
        parts[c].gradient = Vector::Zero(static_cast<Eigen::Index>(num_params));
        parts[c].value = chunk_fn(chunks[c], parts[c].gradient);
    });
    LossValue out{0.0, Vector::Zero(static_cast<Eigen::Index>(num_params))};
    for (const auto& p : parts) {
        out.value += p.value;
        out.gradient += p.gradient;
    }
    return out;
}

// Residual pieces for one chunk: r = exp(y) (ydot + div), R = r^2.
struct ResidualChunk {
    RowVector r;
    RowVector rho;
};

inline ResidualChunk residual_chunk(const ForwardTape& tape, const RowVector& div) {
    ResidualChunk rc;
    rc.rho = tape.y.array().exp();
    rc.r = rc.rho.array() * (tape.ydot + div).array();
    return rc;
}

} // namespace detail

/// (1/N) sum_i w_i (psi_theta(x_i, t_i) - log rho_i)^2 and its exact gradient.
inline LossValue loss_data(const DensityNetwork& net, const DataBatch& batch) {
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    return detail::reduce_chunks(batch.size(), net.num_params(), [&](ChunkRange c, Vector& grad) {
        const auto b = static_cast<Eigen::Index>(c.begin), m = static_cast<Eigen::Index>(c.size());
        ForwardTape tape;
        forward(net, batch.inputs.middleCols(b, m), tape);
        const RowVector e = tape.y - batch.target.segment(b, m);
        const RowVector we = batch.weight.segment(b, m).cwiseProduct(e);
        const RowVector ybar = 2.0 * inv_n * we;
        backward(net, tape, ybar, nullptr, SumGradientSink{net, grad});
        return inv_n * we.dot(e);
    });
}

/// (1/N) sum_j (L[rho_theta](x_j, t_j))^2 and its exact gradient.
inline LossValue loss_pde(const DensityNetwork& net, const PdeBatch& batch) {
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    return detail::reduce_chunks(batch.size(), net.num_params(), [&](ChunkRange c, Vector& grad) {
        const auto b = static_cast<Eigen::Index>(c.begin), m = static_cast<Eigen::Index>(c.size());
        ForwardTape tape;
        const Matrix dirs = batch.directions.middleCols(b, m);
        forward(net, batch.inputs.middleCols(b, m), tape, &dirs);
        const auto rc = detail::residual_chunk(tape, batch.divergence.segment(b, m));
        // dR/dy = 2 r^2, dR/dydot = 2 r rho
        const RowVector ybar = 2.0 * inv_n * rc.r.cwiseAbs2();
        const RowVector ydotbar = 2.0 * inv_n * rc.r.cwiseProduct(rc.rho);
        backward(net, tape, ybar, &ydotbar, SumGradientSink{net, grad});
        return inv_n * rc.r.squaredNorm();
    });
}

/// Liouville residual rho_theta (d psi/dt + grad psi . f + div f) at one point.
inline double residual(const DensityNetwork& net, const SystemModel& sys,
                       const Eigen::Ref<const Vector>& x, double t) {
    const Matrix in = make_input(x, t);
    Matrix dir(in.rows(), 1);
    dir.col(0).head(x.size()) = sys.vector_field(x);
    dir(x.size(), 0) = 1.0;
    ForwardTape tape;
    forward(net, in, tape, &dir);
    return std::exp(tape.y[0]) * (tape.ydot[0] + sys.divergence(x));
}

/// Exact parameter gradient of the squared residual at one point.
inline Vector residual_param_gradient(const DensityNetwork& net, const SystemModel& sys,
                                      const Eigen::Ref<const Vector>& x, double t) {
    const Matrix in = make_input(x, t);
    Matrix dir(in.rows(), 1);
    dir.col(0).head(x.size()) = sys.vector_field(x);
    dir(x.size(), 0) = 1.0;
    ForwardTape tape;
    forward(net, in, tape, &dir);
    const double rho = std::exp(tape.y[0]);
    const double r = rho * (tape.ydot[0] + sys.divergence(x));
    const RowVector ybar = RowVector::Constant(1, 2.0 * r * r);
    const RowVector ydotbar = RowVector::Constant(1, 2.0 * r * rho);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(net.num_params()));
    backward(net, tape, ybar, &ydotbar, SumGradientSink{net, grad});
    return grad;
}

/// Combined objective loss_data + lambda * loss_pde, with both parts kept.
struct CompositeLoss {
    double total = 0.0;
    double data = 0.0;
    double pde = 0.0;
    Vector gradient;
    Vector data_gradient;
    Vector pde_gradient;
};

inline CompositeLoss composite_loss(const DensityNetwork& net, const DataBatch& data,
                                    const PdeBatch* pde, double lambda) {
    CompositeLoss out;
    auto ld = loss_data(net, data);
    out.data = ld.value;
    out.data_gradient = std::move(ld.gradient);
    if (pde) {
        auto lp = loss_pde(net, *pde);
        out.pde = lp.value;
        out.pde_gradient = std::move(lp.gradient);
    } else {
        out.pde_gradient = Vector::Zero(out.data_gradient.size());
    }
    out.total = out.data + lambda * out.pde;
    out.gradient = out.data_gradient + lambda * out.pde_gradient;
    return out;
}

// ---------------------------------------------------------------------------
// Per-sample gradients and the norm test
// ---------------------------------------------------------------------------

/// Per-sample gradients of the data term, column j for batch point indices[j]:
/// d/dtheta [w_i (psi_i - log rho_i)^2].
inline Matrix data_sample_gradients(const DensityNetwork& net, const DataBatch& batch,
                                    const std::vector<std::size_t>& indices) {
    const auto n = static_cast<Eigen::Index>(indices.size());
    Matrix in(batch.inputs.rows(), n);
    RowVector tgt(n), w(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto i = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(j)]);
        in.col(j) = batch.inputs.col(i);
        tgt[j] = batch.target[i];
        w[j] = batch.weight[i];
    }
    ForwardTape tape;
    forward(net, in, tape);
    const RowVector ybar = 2.0 * w.cwiseProduct(tape.y - tgt);
    Matrix grads(static_cast<Eigen::Index>(net.num_params()), n);
    backward(net, tape, ybar, nullptr, PerSampleGradientSink{net, grads});
    return grads;
}

/// Per-sample gradients of the squared residual.
inline Matrix pde_sample_gradients(const DensityNetwork& net, const PdeBatch& batch,
                                   const std::vector<std::size_t>& indices) {
    const auto n = static_cast<Eigen::Index>(indices.size());
    Matrix in(batch.inputs.rows(), n), dirs(batch.inputs.rows(), n);
    RowVector div(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto i = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(j)]);
        in.col(j) = batch.inputs.col(i);
        dirs.col(j) = batch.directions.col(i);
        div[j] = batch.divergence[i];
    }
    ForwardTape tape;
    forward(net, in, tape, &dirs);
    const auto rc = detail::residual_chunk(tape, div);
    const RowVector ybar = 2.0 * rc.r.cwiseAbs2();
    const RowVector ydotbar = 2.0 * rc.r.cwiseProduct(rc.rho);
    Matrix grads(static_cast<Eigen::Index>(net.num_params()), n);
    backward(net, tape, ybar, &ydotbar, PerSampleGradientSink{net, grads});
    return grads;
}

struct NormTestResult {
    double ratio = 0.0;
    bool passed = false;
    bool degenerate_gradient = false;
    std::size_t suggested_size = 0;
    double variance_sum = 0.0;
    double gradient_l1 = 0.0;
    std::size_t sample_count = 0;   // |D_r| or |C_r|
    std::size_t variance_samples = 0;
};

/// Decision from precomputed moments: ratio = variance_sum / (N ||g||_1),
/// pass when ratio <= eps, next size min(ceil(variance_sum / (eps ||g||_1)), s N).
inline NormTestResult norm_test_from_moments(double variance_sum, double gradient_l1,
                                             std::size_t sample_count, double eps,
                                             double growth_cap) {
    NormTestResult r;
    r.variance_sum = variance_sum;
    r.gradient_l1 = gradient_l1;
    r.sample_count = sample_count;
    const double cap = std::floor(growth_cap * static_cast<double>(sample_count));
    if (!(gradient_l1 > 0.0)) {
        r.degenerate_gradient = true;
        r.ratio = std::numeric_limits<double>::quiet_NaN();
        r.passed = true;
        r.suggested_size = sample_count;
        return r;
    }
    r.ratio = variance_sum / (static_cast<double>(sample_count) * gradient_l1);
    r.passed = r.ratio <= eps;
    const double wanted = std::ceil(variance_sum / (eps * gradient_l1));
    r.suggested_size = static_cast<std::size_t>(std::min(wanted, cap));
    return r;
}

/// Sum over parameters of the sample variance (N - 1 denominator) of the
/// columns of per_sample.
inline double gradient_variance_sum(const Matrix& per_sample) {
    const auto n = per_sample.cols();
    if (n < 2) throw DataError("norm test needs at least two samples");
    const Vector mean = per_sample.rowwise().mean();
    return (per_sample.colwise() - mean).squaredNorm() / static_cast<double>(n - 1);
}

/// Norm test on an explicit matrix of per-sample gradients (one column each).
/// The loss gradient is the column mean.
inline NormTestResult norm_test(const Matrix& per_sample, double eps, double growth_cap) {
    const double var = gradient_variance_sum(per_sample);
    const double l1 = per_sample.rowwise().mean().lpNorm<1>();
    auto r = norm_test_from_moments(var, l1, static_cast<std::size_t>(per_sample.cols()), eps,
                                    growth_cap);
    r.variance_samples = static_cast<std::size_t>(per_sample.cols());
    return r;
}

/// Deterministic subset of [0, n) of size min(n, cap), sorted ascending.
inline std::vector<std::size_t> variance_subset(std::size_t n, std::size_t cap, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n <= cap) return idx;
    auto rng = make_rng(seed);
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < cap; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Streaming variance sum over a subset, in fixed chunks (two-pass: mean
/// first, then centered squares).
template <typename GradFn>
double streamed_variance_sum(std::size_t num_params, const std::vector<std::size_t>& subset,
                             GradFn&& per_sample) {
    if (subset.size() < 2) throw DataError("norm test needs at least two samples");
    const std::size_t chunk = 256;
    std::vector<std::vector<std::size_t>> pieces;
    for (std::size_t b = 0; b < subset.size(); b += chunk)
        pieces.emplace_back(subset.begin() + static_cast<std::ptrdiff_t>(b),
                            subset.begin() + static_cast<std::ptrdiff_t>(std::min(subset.size(), b + chunk)));
    std::vector<Vector> sums(pieces.size());
    parallel_for(pieces.size(), [&](std::size_t c) { sums[c] = per_sample(pieces[c]).rowwise().sum(); });
    Vector mean = Vector::Zero(static_cast<Eigen::Index>(num_params));
    for (const auto& s : sums) mean += s;
    mean /= static_cast<double>(subset.size());
    std::vector<double> sq(pieces.size());
    parallel_for(pieces.size(), [&](std::size_t c) {
        sq[c] = (per_sample(pieces[c]).colwise() - mean).squaredNorm();
    });
    double total = 0.0;
    for (double v : sq) total += v;
    return total / static_cast<double>(subset.size() - 1);
}

} // namespace liouville
