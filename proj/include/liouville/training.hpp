#pragma once

// Multi-round characteristics-based training.
//
// For each horizon t_k the network is fit on data with t <= t_k and a
// collocation set made of those data points plus an equal number of uniform
// points. After each L-BFGS solve the gradient norm tests decide whether the
// data and collocation sets are large enough; if not, new trajectories are
// integrated and uniform points drawn, with growth capped by s_rho and s_pde.
// Parameters carry over between rounds and horizons.

#include "adam.hpp"
#include "density_net.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "lbfgs.hpp"
#include "log.hpp"
#include "loss.hpp"
#include "random.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace liouville {

struct AdaptiveConfig {
    double eps_rho = 6e-4;
    double eps_pde = 3e-4;
    double s_rho = 2.0;
    double s_pde = 2.0;
    std::size_t variance_subset_cap = 10000;
    std::size_t max_rounds = 10;

    void validate() const {
        if (!(eps_rho > 0.0 && eps_pde > 0.0)) throw ConfigError("norm test tolerances must be positive");
        if (!(s_rho > 1.0 && s_pde > 1.0)) throw ConfigError("sample growth caps must exceed 1");
        if (variance_subset_cap < 2) throw ConfigError("variance subset cap must be at least 2");
        if (max_rounds < 1) throw ConfigError("max_rounds must be at least 1");
    }
};

struct HorizonSchedule {
    std::vector<double> horizons;
    std::vector<double> lambdas;
    /// Optional per-horizon round cap; empty means AdaptiveConfig::max_rounds.
    std::vector<std::size_t> max_rounds;

    static HorizonSchedule single(double t_final, double lambda) {
        return {{t_final}, {lambda}, {}};
    }

    void validate() const {
        if (horizons.empty()) throw ConfigError("horizon schedule is empty");
        if (horizons.size() != lambdas.size())
            throw ConfigError("horizon schedule needs one lambda per horizon");
        if (!max_rounds.empty() && max_rounds.size() != horizons.size())
            throw ConfigError("per-horizon round caps must match the horizon count");
        double prev = 0.0;
        for (double t : horizons) {
            if (!(t > prev)) throw ConfigError("horizons must be positive and strictly increasing");
            prev = t;
        }
        for (double l : lambdas)
            if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambdas must be finite and nonnegative");
        for (auto r : max_rounds)
            if (r < 1) throw ConfigError("per-horizon round caps must be at least 1");
    }
};

struct RoundReport {
    std::size_t horizon_index = 0;
    double horizon = 0.0;
    double lambda = 0.0;
    std::size_t round = 0; // 1-based within the horizon
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    std::string optimizer_status;
    double loss_total = 0.0;
    double loss_data = 0.0;
    double loss_pde = 0.0;
    NormTestResult data_test;
    NormTestResult pde_test;
    std::size_t data_size = 0;
    std::size_t collocation_size = 0;
    std::size_t trajectories = 0;
    double wall_seconds = 0.0;
};

struct TrainReport {
    std::string strategy;
    std::vector<RoundReport> rounds;
    /// Horizons at which the round cap was reached with a failing test.
    std::vector<std::size_t> exhausted_horizons;
    /// Per-iteration objective trace (Adam only).
    std::vector<double> adam_trace;
    double wall_seconds = 0.0;
};

struct HorizonCheckpoint {
    std::size_t horizon_index;
    double horizon;
    const DensityNetwork& net;
    const CharacteristicDataset& data;
};

struct TrainOptions {
    std::vector<std::size_t> hidden{64, 64, 64, 64};
    WeightScheme weights = WeightScheme::rho;
    HorizonSchedule schedule;
    AdaptiveConfig adaptive;
    LbfgsOptions lbfgs;
    /// Snapshot grid used for trajectories integrated during training.
    std::vector<double> snapshots;
    DatasetOptions data;
    std::uint64_t seed = 0;
    double box_inflation = 0.1;
    /// Horizon to start from (resuming with a warm-start network).
    std::size_t start_horizon = 0;
    std::function<void(const HorizonCheckpoint&)> on_horizon_done;
};

struct TrainResult {
    DensityNetwork net;
    TrainReport report;
    CharacteristicDataset data;
    CollocationSet collocation;
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Input normalization from the data bounds: states from the observed range,
/// time from [0, t_final].
inline InputScaling scaling_for(const CharacteristicDataset& data, double t_final) {
    if (data.empty()) throw DataError("cannot normalize an empty dataset");
    const auto d = static_cast<Eigen::Index>(data.dim);
    Vector lo(d + 1), hi(d + 1);
    lo.head(d).setConstant(std::numeric_limits<double>::infinity());
    hi.head(d).setConstant(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < data.size(); ++i) {
        lo.head(d) = lo.head(d).cwiseMin(data.state(i));
        hi.head(d) = hi.head(d).cwiseMax(data.state(i));
    }
    lo[d] = 0.0;
    hi[d] = t_final;
    return InputScaling::from_bounds(lo, hi);
}

/// Glorot initialization with input normalization from the data and the
/// output bias at the mean log density.
inline DensityNetwork initial_network(const CharacteristicDataset& data,
                                      const std::vector<std::size_t>& hidden, double t_final,
                                      std::uint64_t seed) {
    double mean = 0.0;
    for (double v : data.log_rho) mean += v;
    mean /= static_cast<double>(data.size());
    return DensityNetwork::glorot(NetworkArchitecture{data.dim + 1, hidden}, seed,
                                  scaling_for(data, t_final), mean);
}

/// Uniform collocation points, redrawing any point where the vector field or
/// its divergence is not finite (e.g. at a coordinate singularity).
inline CollocationSet sample_valid_collocation(const SystemModel& sys, const Box& box, double t_max,
                                               std::size_t n, std::uint64_t seed) {
    auto pts = sample_collocation(box, t_max, n, seed);
    Vector dx(static_cast<Eigen::Index>(sys.dim()));
    std::uint64_t redraw = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        for (std::size_t attempt = 0;; ++attempt) {
            const auto x = pts.state(i);
            sys.vector_field(x, dx);
            if (dx.allFinite() && std::isfinite(sys.divergence(x))) break;
            if (attempt > 1000) throw NumericError("could not find a valid collocation point");
            const auto repl = sample_collocation(box, t_max, 1, derive_seed(seed, n + redraw++));
            std::copy(repl.states.begin(), repl.states.end(),
                      pts.states.begin() + static_cast<std::ptrdiff_t>(i * pts.dim));
            pts.times[i] = repl.times[0];
        }
    }
    return pts;
}

inline std::size_t points_per_trajectory(const std::vector<double>& snapshots, double horizon) {
    std::size_t k = 0;
    for (double t : snapshots) k += t <= horizon * (1.0 + 1e-12);
    return std::max<std::size_t>(k, 1);
}

namespace detail {

struct RoundSolve {
    LbfgsResult opt;
    CompositeLoss loss;
};

inline RoundSolve solve_round(DensityNetwork& net, const DataBatch& data, const PdeBatch& pde,
                              double lambda, const LbfgsOptions& lbfgs) {
    DensityNetwork work = net;
    Objective objective = [&](const Vector& theta, Vector& grad) {
        work.unpack(theta);
        auto l = composite_loss(work, data, &pde, lambda);
        grad = std::move(l.gradient);
        if (!std::isfinite(l.total)) return std::numeric_limits<double>::infinity();
        return l.total;
    };
    RoundSolve out;
    out.opt = lbfgs_minimize(objective, net.pack(), lbfgs);
    net.unpack(out.opt.x);
    out.loss = composite_loss(net, data, &pde, lambda);
    return out;
}

} // namespace detail

/// Norm test of the data term on the current parameters.
inline NormTestResult data_norm_test(const DensityNetwork& net, const DataBatch& batch,
                                     const Vector& data_gradient, double eps, double growth,
                                     std::size_t subset_cap, std::uint64_t subset_seed) {
    const auto subset = variance_subset(batch.size(), subset_cap, subset_seed);
    const double var = streamed_variance_sum(net.num_params(), subset, [&](const auto& idx) {
        return data_sample_gradients(net, batch, idx);
    });
    auto r = norm_test_from_moments(var, data_gradient.lpNorm<1>(), batch.size(), eps, growth);
    r.variance_samples = subset.size();
    return r;
}

inline NormTestResult pde_norm_test(const DensityNetwork& net, const PdeBatch& batch,
                                    const Vector& pde_gradient, double eps, double growth,
                                    std::size_t subset_cap, std::uint64_t subset_seed) {
    const auto subset = variance_subset(batch.size(), subset_cap, subset_seed);
    const double var = streamed_variance_sum(net.num_params(), subset, [&](const auto& idx) {
        return pde_sample_gradients(net, batch, idx);
    });
    auto r = norm_test_from_moments(var, pde_gradient.lpNorm<1>(), batch.size(), eps, growth);
    r.variance_samples = subset.size();
    return r;
}

/// Seeds used for the variance subsets of round r at horizon k, exposed so
/// the norm-test statistics can be re-evaluated independently.
inline std::uint64_t variance_subset_seed(std::uint64_t root, std::size_t horizon, std::size_t round,
                                          bool pde_term) {
    return derive_seed(derive_seed(root, pde_term ? "variance-pde" : "variance-data"),
                       horizon * 1000 + round);
}

// ---------------------------------------------------------------------------
// L-BFGS training (fixed and adaptive)
// ---------------------------------------------------------------------------

/// Trains over the horizon schedule, growing data and collocation sets
/// between rounds as dictated by the norm tests. With all round caps at 1 this
/// is single-round training on a fixed data set.
inline TrainResult train_adaptive(const SystemModel& sys, CharacteristicDataset initial,
                                  const TrainOptions& opts,
                                  std::optional<DensityNetwork> warm_start = std::nullopt) {
    using clock = std::chrono::steady_clock;
    const auto started = clock::now();
    opts.schedule.validate();
    opts.adaptive.validate();
    if (initial.empty()) throw DataError("training needs a non-empty initial dataset");
    if (initial.dim != sys.dim()) throw DataError("dataset dimension does not match the system");
    const std::vector<double> snapshots =
        opts.snapshots.empty() ? std::vector<double>{} : opts.snapshots;
    const double t_final = opts.schedule.horizons.back();

    TrainResult res;
    res.report.strategy = "lbfgs";
    res.data = std::move(initial);
    res.net = warm_start ? std::move(*warm_start)
                         : initial_network(res.data, opts.hidden, t_final, derive_seed(opts.seed, "init"));
    if (res.net.input_dim() != sys.dim() + 1)
        throw DataError("network input dimension does not match the system");
    const auto colloc_seed = derive_seed(opts.seed, "collocation");
    const auto data_seed = derive_seed(opts.seed, "data");

    for (std::size_t k = opts.start_horizon; k < opts.schedule.horizons.size(); ++k) {
        const double horizon = opts.schedule.horizons[k];
        const double lambda = opts.schedule.lambdas[k];
        const std::size_t round_cap =
            opts.schedule.max_rounds.empty() ? opts.adaptive.max_rounds : opts.schedule.max_rounds[k];

        CharacteristicDataset active = res.data.restrict_time(horizon);
        if (active.empty()) throw DataError("no data within horizon " + std::to_string(horizon));
        const Box box = bounding_box(active, opts.box_inflation);
        // Uniform half of the collocation set, re-drawn at every horizon.
        std::uint64_t uniform_draws = 0;
        CollocationSet uniform = sample_valid_collocation(
            sys, box, horizon, active.size(), derive_seed(colloc_seed, k * 1000 + uniform_draws++));

        for (std::size_t round = 1;; ++round) {
            const auto round_start = clock::now();
            CollocationSet colloc = collocation_from_data(active);
            colloc.append(uniform);
            const DataBatch data_batch = make_data_batch(active, opts.weights);
            const PdeBatch pde_batch = make_pde_batch(sys, colloc);

            auto solved = detail::solve_round(res.net, data_batch, pde_batch, lambda, opts.lbfgs);

            RoundReport rr;
            rr.horizon_index = k;
            rr.horizon = horizon;
            rr.lambda = lambda;
            rr.round = round;
            rr.iterations = solved.opt.iterations;
            rr.evaluations = solved.opt.evaluations;
            rr.optimizer_status = to_string(solved.opt.status);
            rr.loss_total = solved.loss.total;
            rr.loss_data = solved.loss.data;
            rr.loss_pde = solved.loss.pde;
            rr.data_size = active.size();
            rr.collocation_size = colloc.size();
            rr.trajectories = res.data.trajectory_count();
            rr.data_test = data_norm_test(res.net, data_batch, solved.loss.data_gradient,
                                          opts.adaptive.eps_rho, opts.adaptive.s_rho,
                                          opts.adaptive.variance_subset_cap,
                                          variance_subset_seed(opts.seed, k, round, false));
            rr.pde_test = pde_norm_test(res.net, pde_batch, solved.loss.pde_gradient,
                                        opts.adaptive.eps_pde, opts.adaptive.s_pde,
                                        opts.adaptive.variance_subset_cap,
                                        variance_subset_seed(opts.seed, k, round, true));
            rr.wall_seconds = std::chrono::duration<double>(clock::now() - round_start).count();
            log_info("horizon " + std::to_string(horizon) + " round " + std::to_string(round) +
                     ": loss " + std::to_string(rr.loss_total) + " (data " +
                     std::to_string(rr.loss_data) + ", pde " + std::to_string(rr.loss_pde) +
                     "), ratios " + std::to_string(rr.data_test.ratio) + " / " +
                     std::to_string(rr.pde_test.ratio) + ", |D| " + std::to_string(rr.data_size) +
                     ", |C| " + std::to_string(rr.collocation_size) + ", " +
                     std::to_string(rr.iterations) + " iterations");

            const bool data_ok = rr.data_test.passed;
            const bool pde_ok = rr.pde_test.passed;
            res.report.rounds.push_back(rr);
            res.collocation = std::move(colloc);
            if (data_ok && pde_ok) break;
            if (round >= round_cap) {
                res.report.exhausted_horizons.push_back(k);
                break;
            }

            const std::size_t n_data = active.size();
            const std::size_t n_colloc = res.collocation.size();
            if (!data_ok) {
                if (snapshots.empty())
                    throw ConfigError("adaptive training needs the snapshot grid to integrate new data");
                const std::size_t per_traj = points_per_trajectory(snapshots, horizon);
                const auto target = std::max(n_data, rr.data_test.suggested_size);
                const auto cap = static_cast<std::size_t>(opts.adaptive.s_rho * static_cast<double>(n_data));
                std::size_t new_traj = (target - n_data + per_traj - 1) / per_traj;
                new_traj = std::min(new_traj, (cap - n_data) / per_traj);
                if (new_traj > 0) {
                    DatasetOptions dopt = opts.data;
                    dopt.first_trajectory = res.data.trajectory_count();
                    res.data.append(generate_dataset(sys, new_traj, snapshots, data_seed, dopt));
                    active = res.data.restrict_time(horizon);
                }
            }
            // The collocation set always contains the active data; top up the
            // uniform part towards the suggested size within the growth cap.
            const auto cap_c = static_cast<std::size_t>(opts.adaptive.s_pde * static_cast<double>(n_colloc));
            const std::size_t wanted_c =
                pde_ok ? n_colloc : std::max(n_colloc, rr.pde_test.suggested_size);
            const std::size_t have_c = active.size() + uniform.size();
            const std::size_t goal_c = std::min(cap_c, wanted_c);
            if (goal_c > have_c) {
                uniform.append(sample_valid_collocation(sys, box, horizon, goal_c - have_c,
                                                        derive_seed(colloc_seed, k * 1000 + uniform_draws++)));
            }
        }
        if (opts.on_horizon_done) opts.on_horizon_done({k, horizon, res.net, res.data});
    }
    res.report.wall_seconds = std::chrono::duration<double>(clock::now() - started).count();
    return res;
}

// ---------------------------------------------------------------------------
// Adam baseline: fixed data, fresh uniform collocation minibatch per step
// ---------------------------------------------------------------------------

struct AdamTrainOptions {
    std::vector<std::size_t> hidden{64, 64, 64, 64};
    WeightScheme weights = WeightScheme::rho;
    double lambda = 0.5;
    double t_final = 1.0;
    AdamOptions adam;
    std::size_t collocation_batch = 1024;
    std::uint64_t seed = 0;
    double box_inflation = 0.1;
};

inline TrainResult train_adam(const SystemModel& sys, CharacteristicDataset data,
                              const AdamTrainOptions& opts) {
    using clock = std::chrono::steady_clock;
    const auto started = clock::now();
    if (data.empty()) throw DataError("training needs a non-empty dataset");
    if (data.dim != sys.dim()) throw DataError("dataset dimension does not match the system");
    if (opts.collocation_batch < 1) throw ConfigError("collocation batch must be at least 1");

    TrainResult res;
    res.report.strategy = "adam";
    res.data = data.restrict_time(opts.t_final);
    res.net = initial_network(res.data, opts.hidden, opts.t_final, derive_seed(opts.seed, "init"));
    const DataBatch data_batch = make_data_batch(res.data, opts.weights);
    const Box box = bounding_box(res.data, opts.box_inflation);
    const auto colloc_seed = derive_seed(opts.seed, "collocation");

    DensityNetwork work = res.net;
    StochasticObjective objective = [&](const Vector& theta, std::size_t it, Vector& grad) {
        work.unpack(theta);
        const auto c = sample_valid_collocation(sys, box, opts.t_final, opts.collocation_batch,
                                                derive_seed(colloc_seed, it));
        const PdeBatch pde = make_pde_batch(sys, c);
        auto l = composite_loss(work, data_batch, &pde, opts.lambda);
        grad = std::move(l.gradient);
        return l.total;
    };
    auto out = adam_minimize(objective, res.net.pack(), opts.adam);
    res.net.unpack(out.x);

    // Final statistics on the data plus an equally sized uniform set.
    res.collocation = collocation_from_data(res.data);
    res.collocation.append(sample_valid_collocation(sys, box, opts.t_final, res.data.size(),
                                                    derive_seed(colloc_seed, opts.adam.iterations)));
    const PdeBatch pde = make_pde_batch(sys, res.collocation);
    const auto final_loss = composite_loss(res.net, data_batch, &pde, opts.lambda);
    RoundReport rr;
    rr.horizon = opts.t_final;
    rr.lambda = opts.lambda;
    rr.round = 1;
    rr.iterations = opts.adam.iterations;
    rr.evaluations = opts.adam.iterations;
    rr.optimizer_status = "fixed_budget";
    rr.loss_total = final_loss.total;
    rr.loss_data = final_loss.data;
    rr.loss_pde = final_loss.pde;
    rr.data_size = res.data.size();
    rr.collocation_size = res.collocation.size();
    rr.trajectories = res.data.trajectory_count();
    rr.wall_seconds = std::chrono::duration<double>(clock::now() - started).count();
    res.report.rounds.push_back(rr);
    res.report.adam_trace = std::move(out.trace);
    res.report.wall_seconds = rr.wall_seconds;
    return res;
}

} // namespace liouville
