#include "liouville/systems.hpp"
#include "liouville/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace liouville;

namespace {

TrainOptions small_options(double t_final, std::size_t iterations) {
    TrainOptions o;
    o.hidden = {8, 8};
    o.schedule = HorizonSchedule::single(t_final, 0.5);
    o.lbfgs.max_iterations = iterations;
    o.snapshots = uniform_snapshots(t_final, 11);
    o.seed = 5;
    return o;
}

CharacteristicDataset linear_data(std::size_t n_traj, double t_final = 1.0) {
    return generate_dataset(linear_test(), n_traj, uniform_snapshots(t_final, 11), derive_seed(5, "data"));
}

} // namespace

TEST(HorizonSchedule, Validation) {
    EXPECT_NO_THROW((HorizonSchedule{{0.5, 1.0}, {1.0, 10.0}, {}}.validate()));
    EXPECT_THROW((HorizonSchedule{{}, {}, {}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{1.0, 0.5}, {1.0, 1.0}, {}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{0.5, 0.5}, {1.0, 1.0}, {}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{0.5, 1.0}, {1.0}, {}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{1.0}, {-1.0}, {}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{1.0}, {1.0}, {0}}.validate()), ConfigError);
    EXPECT_THROW((HorizonSchedule{{1.0}, {1.0}, {1, 2}}.validate()), ConfigError);
}

TEST(AdaptiveConfig, Validation) {
    AdaptiveConfig c;
    EXPECT_NO_THROW(c.validate());
    c.s_rho = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.eps_pde = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.max_rounds = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PointsPerTrajectory, CountsSnapshotsWithinHorizon) {
    const auto grid = uniform_snapshots(2.0, 5); // 0, .5, 1, 1.5, 2
    EXPECT_EQ(points_per_trajectory(grid, 2.0), 5u);
    EXPECT_EQ(points_per_trajectory(grid, 1.0), 3u);
    EXPECT_EQ(points_per_trajectory(grid, 0.7), 2u);
}

TEST(ValidCollocation, AvoidsNonFiniteField) {
    // Field undefined for x > 0.
    auto sys = SystemModel(
        "half-line", 1,
        [](const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx) {
            dx[0] = x[0] > 0.0 ? std::numeric_limits<double>::quiet_NaN() : -x[0];
        },
        [](const Eigen::Ref<const Vector>&) { return -1.0; },
        InitialDensity::normal(Vector::Zero(1), Vector::Ones(1)));
    Box box{Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
    const auto c = sample_valid_collocation(sys, box, 1.0, 500, 3);
    ASSERT_EQ(c.size(), 500u);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_LE(c.state(i)[0], 0.0);
    EXPECT_EQ(c.states, sample_valid_collocation(sys, box, 1.0, 500, 3).states);
}

TEST(InitialNetwork, OutputStartsAtMeanLogDensity) {
    const auto data = linear_data(10);
    const auto net = initial_network(data, {8, 8}, 1.0, 1);
    double mean = 0.0;
    for (double v : data.log_rho) mean += v;
    mean /= static_cast<double>(data.size());
    EXPECT_DOUBLE_EQ(net.bias(net.layer_count() - 1)[0], mean);
    // Normalized inputs span [-1, 1].
    const auto& sc = net.scaling();
    EXPECT_NEAR(sc.scale[1] * (1.0 - sc.shift[1]), 1.0, 1e-12);
    EXPECT_NEAR(sc.scale[1] * (0.0 - sc.shift[1]), -1.0, 1e-12);
}

TEST(TrainAdaptive, HugeToleranceGivesOneRoundWithoutNewData) {
    auto o = small_options(1.0, 30);
    o.adaptive.eps_rho = 1e6;
    o.adaptive.eps_pde = 1e6;
    const auto data = linear_data(10);
    const auto res = train_adaptive(linear_test(), data, o);
    ASSERT_EQ(res.report.rounds.size(), 1u);
    EXPECT_EQ(res.data.size(), data.size());
    EXPECT_EQ(res.report.rounds[0].collocation_size, 2 * data.size());
    EXPECT_TRUE(res.report.exhausted_horizons.empty());
    EXPECT_LT(res.report.rounds[0].loss_total, 1e3);
}

TEST(TrainAdaptive, GrowthIsMonotoneAndCapped) {
    auto o = small_options(1.0, 40);
    o.adaptive.eps_rho = 1e-9;
    o.adaptive.eps_pde = 1e-9;
    o.adaptive.max_rounds = 3;
    const auto res = train_adaptive(linear_test(), linear_data(10), o);
    const auto& rounds = res.report.rounds;
    ASSERT_EQ(rounds.size(), 3u);
    EXPECT_EQ(res.report.exhausted_horizons, std::vector<std::size_t>{0});
    for (std::size_t r = 1; r < rounds.size(); ++r) {
        EXPECT_GT(rounds[r].data_size, rounds[r - 1].data_size);
        EXPECT_LE(rounds[r].data_size, 2 * rounds[r - 1].data_size);
        EXPECT_GE(rounds[r].collocation_size, rounds[r - 1].collocation_size);
        EXPECT_LE(rounds[r].collocation_size, 2 * rounds[r - 1].collocation_size);
        EXPECT_EQ(rounds[r].data_size, rounds[r].trajectories * 11);
    }
    EXPECT_EQ(res.data.size(), rounds.back().data_size);
    EXPECT_EQ(res.collocation.size(), rounds.back().collocation_size);
    // Collocation set is the data plus the uniform points.
    EXPECT_EQ(res.collocation.count(CollocationOrigin::from_data), res.data.size());
}

TEST(TrainAdaptive, ReportedRatioMatchesRecomputation) {
    auto o = small_options(1.0, 40);
    const auto sys = linear_test();
    const auto res = train_adaptive(sys, linear_data(12), o);
    const auto& last = res.report.rounds.back();
    const auto db = make_data_batch(res.data, o.weights);
    const auto pb = make_pde_batch(sys, res.collocation);
    std::vector<std::size_t> all_d(db.size()), all_c(pb.size());
    std::iota(all_d.begin(), all_d.end(), 0u);
    std::iota(all_c.begin(), all_c.end(), 0u);
    const auto td = norm_test(data_sample_gradients(res.net, db, all_d), o.adaptive.eps_rho, o.adaptive.s_rho);
    const auto tp = norm_test(pde_sample_gradients(res.net, pb, all_c), o.adaptive.eps_pde, o.adaptive.s_pde);
    EXPECT_NEAR(td.ratio, last.data_test.ratio, 1e-12 * td.ratio);
    EXPECT_NEAR(tp.ratio, last.pde_test.ratio, 1e-12 * tp.ratio);
}

TEST(TrainAdaptive, Deterministic) {
    const auto o = small_options(1.0, 20);
    const auto a = train_adaptive(linear_test(), linear_data(8), o);
    const auto b = train_adaptive(linear_test(), linear_data(8), o);
    EXPECT_EQ(a.net.pack(), b.net.pack());
    EXPECT_EQ(a.data.states, b.data.states);
}

TEST(TrainAdaptive, HorizonsRestrictDataAndWarmStart) {
    auto o = small_options(1.0, 20);
    o.schedule = {{0.5, 1.0}, {1.0, 2.0}, {}};
    o.adaptive.max_rounds = 1;
    std::vector<std::size_t> seen;
    Vector after_first;
    o.on_horizon_done = [&](const HorizonCheckpoint& h) {
        seen.push_back(h.horizon_index);
        if (h.horizon_index == 0) after_first = h.net.pack();
    };
    const auto data = linear_data(10);
    const auto res = train_adaptive(linear_test(), data, o);
    EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1}));
    ASSERT_EQ(res.report.rounds.size(), 2u);
    EXPECT_EQ(res.report.rounds[0].data_size, data.restrict_time(0.5).size());
    EXPECT_EQ(res.report.rounds[1].data_size, data.size());
    EXPECT_DOUBLE_EQ(res.report.rounds[1].lambda, 2.0);

    // Resuming at the second horizon from the first checkpoint gives the same result.
    auto resumed_opts = o;
    resumed_opts.start_horizon = 1;
    resumed_opts.on_horizon_done = nullptr;
    DensityNetwork warm = res.net;
    warm.unpack(after_first);
    const auto resumed = train_adaptive(linear_test(), data, resumed_opts, warm);
    EXPECT_EQ(resumed.net.pack(), res.net.pack());
}

TEST(TrainAdaptive, RejectsMismatchedData) {
    const auto o = small_options(1.0, 5);
    EXPECT_THROW(train_adaptive(kraichnan_orszag(), linear_data(3), o), DataError);
    EXPECT_THROW(train_adaptive(linear_test(), CharacteristicDataset{}, o), DataError);
}

TEST(TrainAdam, ReproducibleAndImproving) {
    AdamTrainOptions o;
    o.hidden = {8, 8};
    o.t_final = 1.0;
    o.adam.iterations = 200;
    o.adam.learning_rate = 1e-2;
    o.collocation_batch = 64;
    o.seed = 2;
    const auto a = train_adam(linear_test(), linear_data(10), o);
    const auto b = train_adam(linear_test(), linear_data(10), o);
    EXPECT_EQ(a.net.pack(), b.net.pack());
    ASSERT_EQ(a.report.adam_trace.size(), 200u);
    EXPECT_LT(a.report.adam_trace.back(), 0.5 * a.report.adam_trace.front());
    EXPECT_EQ(a.report.strategy, "adam");
}
