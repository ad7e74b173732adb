#include "liouville/loss.hpp"
#include "liouville/systems.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace liouville;
using liouville::testing::fd_param_gradient;
using liouville::testing::max_relative_error;
using liouville::testing::random_network;

namespace {

// Network whose output is the constant c: all weights zero.
DensityNetwork constant_network(std::size_t input_dim, double c) {
    DensityNetwork net(NetworkArchitecture{input_dim, {4, 4}});
    Vector theta = Vector::Zero(static_cast<Eigen::Index>(net.num_params()));
    theta[theta.size() - 1] = c;
    net.unpack(theta);
    return net;
}

CharacteristicDataset small_dataset(const SystemModel& sys, std::size_t n_traj, std::uint64_t seed) {
    return generate_dataset(sys, n_traj, uniform_snapshots(1.0, 5), seed);
}

CollocationSet mixed_collocation(const CharacteristicDataset& data, std::uint64_t seed) {
    auto c = collocation_from_data(data);
    c.append(sample_collocation(bounding_box(data), 1.0, data.size(), seed));
    return c;
}

// Residual from finite-difference partials of log_rho.
double fd_residual(const DensityNetwork& net, const SystemModel& sys, const Vector& x, double t) {
    const double h = 1e-5;
    const double psi = net.log_rho(x, t);
    double lie = (net.log_rho(x, t + h) - net.log_rho(x, t - h)) / (2 * h);
    const Vector f = sys.vector_field(x);
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        Vector xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        lie += f[k] * (net.log_rho(xp, t) - net.log_rho(xm, t)) / (2 * h);
    }
    return std::exp(psi) * (lie + sys.divergence(x));
}

} // namespace

TEST(WeightScheme, ParseRoundTrip) {
    for (auto w : {WeightScheme::rho, WeightScheme::sqrt_rho, WeightScheme::unit})
        EXPECT_EQ(parse_weight_scheme(to_string(w)), w);
    EXPECT_THROW(parse_weight_scheme("rho2"), ConfigError);
}

TEST(Residual, ConstantNetworkGivesDivergence) {
    // psi = c everywhere: r = e^c div f.
    const auto sys = linear_test(-1.0);
    const auto net = constant_network(2, 0.3);
    EXPECT_NEAR(residual(net, sys, Vector::Constant(1, 0.7), 0.4), std::exp(0.3) * -1.0, 1e-14);
    EXPECT_NEAR(residual(constant_network(4, -1.0), kraichnan_orszag(), Vector::Ones(3), 2.0), 0.0, 1e-15);
}

TEST(Residual, MatchesFiniteDifferencePartials) {
    const auto sys = linear_test(-0.7);
    const auto ko = kraichnan_orszag();
    const auto net1 = random_network({2, {8, 8}}, 3, 0.4);
    const auto net3 = random_network({4, {8, 8}}, 4, 0.4);
    Rng rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        Vector x1(1), x3(3);
        x1 << n(rng);
        x3 << n(rng), n(rng), n(rng);
        const double t = 0.5 + 0.3 * n(rng);
        EXPECT_NEAR(residual(net1, sys, x1, t), fd_residual(net1, sys, x1, t),
                    1e-6 * (1.0 + std::abs(fd_residual(net1, sys, x1, t))));
        EXPECT_NEAR(residual(net3, ko, x3, t), fd_residual(net3, ko, x3, t),
                    1e-6 * (1.0 + std::abs(fd_residual(net3, ko, x3, t))));
    }
}

TEST(Residual, ExactSolutionHasZeroResidual) {
    // The closed-form density satisfies the equation the residual encodes.
    const double a = -1.0;
    for (double x : {-1.5, 0.2, 1.1})
        for (double t : {0.1, 0.6}) {
            const double h = 1e-5;
            auto psi = [&](double xx, double tt) { return linear_test_log_density(xx, tt, a); };
            const double pt = (psi(x, t + h) - psi(x, t - h)) / (2 * h);
            const double px = (psi(x + h, t) - psi(x - h, t)) / (2 * h);
            EXPECT_NEAR(std::exp(psi(x, t)) * (pt + px * a * x + a), 0.0, 1e-7);
        }
}

TEST(LossData, ConstantNetworkByHand) {
    const auto sys = kraichnan_orszag();
    const auto data = small_dataset(sys, 3, 11);
    const double c = -2.0;
    const auto net = constant_network(4, c);
    for (auto scheme : {WeightScheme::rho, WeightScheme::sqrt_rho, WeightScheme::unit}) {
        double expected = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double lr = data.log_rho[i];
            const double w = scheme == WeightScheme::rho ? std::exp(lr)
                             : scheme == WeightScheme::sqrt_rho ? std::sqrt(std::exp(lr))
                                                                : 1.0;
            expected += w * (c - lr) * (c - lr);
        }
        expected /= static_cast<double>(data.size());
        EXPECT_NEAR(loss_data(net, make_data_batch(data, scheme)).value, expected, 1e-13 * expected);
    }
}

TEST(LossPde, ConstantNetworkByHand) {
    const auto sys = linear_test(-1.0);
    const auto data = small_dataset(sys, 4, 2);
    const auto c = mixed_collocation(data, 3);
    // r = e^c * (-1), so R = e^{2c}.
    EXPECT_NEAR(loss_pde(constant_network(2, 0.25), make_pde_batch(sys, c)).value, std::exp(0.5), 1e-13);
}

TEST(LossData, GradientMatchesFiniteDifferences) {
    const auto sys = linear_test(-1.0);
    const auto data = small_dataset(sys, 6, 5);
    for (auto scheme : {WeightScheme::rho, WeightScheme::unit}) {
        const auto batch = make_data_batch(data, scheme);
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto net = random_network({2, {8, 8}}, 100 + seed);
            const auto analytic = loss_data(net, batch).gradient;
            const auto fd = fd_param_gradient(net, [&](const DensityNetwork& n) { return loss_data(n, batch).value; });
            EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
        }
    }
}

TEST(LossPde, GradientMatchesFiniteDifferences) {
    const auto sys = linear_test(-0.8);
    const auto data = small_dataset(sys, 6, 6);
    const auto batch = make_pde_batch(sys, mixed_collocation(data, 7));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto net = random_network({2, {8, 8}}, 200 + seed);
        const auto analytic = loss_pde(net, batch).gradient;
        const auto fd = fd_param_gradient(net, [&](const DensityNetwork& n) { return loss_pde(n, batch).value; });
        EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
    }
}

TEST(LossPde, SinglePointGradientMatchesFiniteDifferences) {
    const auto sys = kraichnan_orszag();
    const auto net = random_network({4, {8, 8}}, 9);
    Vector x(3);
    x << 0.8, -0.2, 0.5;
    const auto analytic = residual_param_gradient(net, sys, x, 0.3);
    const auto fd = fd_param_gradient(net, [&](const DensityNetwork& n) {
        const double r = residual(n, sys, x, 0.3);
        return r * r;
    });
    EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
}

TEST(Loss, DuplicatingEveryPointChangesNothing) {
    const auto sys = linear_test(-1.0);
    const auto data = small_dataset(sys, 5, 8);
    auto doubled = data;
    doubled.append(data);
    const auto c = mixed_collocation(data, 9);
    auto c2 = c;
    c2.append(c);
    const auto net = random_network({2, {8, 8}}, 10);
    const auto a = composite_loss(net, make_data_batch(data, WeightScheme::rho), nullptr, 0.0);
    const auto b = composite_loss(net, make_data_batch(doubled, WeightScheme::rho), nullptr, 0.0);
    EXPECT_NEAR(a.data, b.data, 1e-14 * a.data);
    EXPECT_LT((a.gradient - b.gradient).norm(), 1e-13 * a.gradient.norm());
    const auto pa = loss_pde(net, make_pde_batch(sys, c));
    const auto pb = loss_pde(net, make_pde_batch(sys, c2));
    EXPECT_NEAR(pa.value, pb.value, 1e-14 * pa.value);
    EXPECT_LT((pa.gradient - pb.gradient).norm(), 1e-13 * pa.gradient.norm());
}

TEST(Loss, CompositeIsLinearInLambda) {
    const auto sys = linear_test(-1.0);
    const auto data = small_dataset(sys, 5, 12);
    const auto db = make_data_batch(data, WeightScheme::rho);
    const auto pb = make_pde_batch(sys, mixed_collocation(data, 13));
    const auto net = random_network({2, {8, 8}}, 14);
    const auto l0 = composite_loss(net, db, &pb, 0.0);
    const auto l1 = composite_loss(net, db, &pb, 1.0);
    const auto l3 = composite_loss(net, db, &pb, 3.5);
    EXPECT_DOUBLE_EQ(l0.total, l0.data);
    EXPECT_NEAR(l3.total, l0.total + 3.5 * (l1.total - l0.total), 1e-12 * l3.total);
    EXPECT_LT((l3.gradient - (l0.gradient + 3.5 * (l1.gradient - l0.gradient))).norm(),
              1e-10 * l3.gradient.norm());
}

TEST(Loss, ParallelChunkingIsDeterministic) {
    const auto sys = kraichnan_orszag();
    const auto data = generate_dataset(sys, 300, uniform_snapshots(1.0, 5), 15);
    ASSERT_GT(data.size(), 2 * detail::loss_chunk);
    const auto db = make_data_batch(data, WeightScheme::rho);
    const auto net = random_network({4, {8, 8}}, 16);
    const auto a = loss_data(net, db);
    const auto b = loss_data(net, db);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.gradient, b.gradient);
}

TEST(MakeDataBatch, RejectsZeroDensity) {
    CharacteristicDataset ds;
    ds.dim = 1;
    ds.push_back(Vector::Zero(1), 0.0, 0.0, 0, 0);
    ds.push_back(Vector::Zero(1), 0.5, -std::numeric_limits<double>::infinity(), 3, 1);
    try {
        make_data_batch(ds, WeightScheme::rho);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("data point 1"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("trajectory 3"), std::string::npos);
    }
}

TEST(SampleGradients, ColumnsAverageToLossGradient) {
    const auto sys = linear_test(-1.0);
    const auto data = small_dataset(sys, 5, 17);
    const auto db = make_data_batch(data, WeightScheme::rho);
    const auto pb = make_pde_batch(sys, mixed_collocation(data, 18));
    const auto net = random_network({2, {8, 8}}, 19);
    std::vector<std::size_t> all_d(db.size()), all_c(pb.size());
    std::iota(all_d.begin(), all_d.end(), 0u);
    std::iota(all_c.begin(), all_c.end(), 0u);
    const Vector gd = data_sample_gradients(net, db, all_d).rowwise().mean();
    const Vector gp = pde_sample_gradients(net, pb, all_c).rowwise().mean();
    EXPECT_LT((gd - loss_data(net, db).gradient).norm(), 1e-12 * gd.norm());
    EXPECT_LT((gp - loss_pde(net, pb).gradient).norm(), 1e-12 * gp.norm());
    // One column equals the finite-difference gradient of that point's term.
    const Vector col = pde_sample_gradients(net, pb, {3}).col(0);
    const Vector x = pb.inputs.col(3).head(1);
    const double t = pb.inputs(1, 3);
    const auto fd = fd_param_gradient(net, [&](const DensityNetwork& n) {
        const double r = residual(n, sys, x, t);
        return r * r;
    });
    EXPECT_LT(max_relative_error(col, fd), 1e-5);
}

TEST(NormTest, HandComputedCase) {
    // Two parameters, three samples.
    Matrix g(2, 3);
    g << 1.0, 2.0, 3.0,
         -1.0, 1.0, 3.0;
    // Means (2, 1); sample variances 1 and 4; ||mean||_1 = 3.
    const auto r = norm_test(g, 0.5, 2.0);
    EXPECT_DOUBLE_EQ(r.variance_sum, 5.0);
    EXPECT_DOUBLE_EQ(r.gradient_l1, 3.0);
    EXPECT_DOUBLE_EQ(r.ratio, 5.0 / 9.0);
    EXPECT_FALSE(r.passed);
    EXPECT_EQ(r.suggested_size, 4u); // ceil(5 / 1.5) = 4 <= floor(2 * 3)
    const auto loose = norm_test(g, 0.6, 2.0);
    EXPECT_TRUE(loose.passed);
    const auto tight = norm_test(g, 1e-3, 2.0);
    EXPECT_EQ(tight.suggested_size, 6u); // capped at floor(s N)
    EXPECT_EQ(norm_test(g, 1e-3, 1.5).suggested_size, 4u);
}

TEST(NormTest, DegenerateGradient) {
    Matrix g(2, 2);
    g << 1.0, -1.0,
         -2.0, 2.0;
    const auto r = norm_test(g, 1e-3, 2.0);
    EXPECT_TRUE(std::isnan(r.ratio));
    EXPECT_TRUE(r.passed);
    EXPECT_TRUE(r.degenerate_gradient);
    EXPECT_THROW(norm_test(Matrix::Ones(2, 1), 1e-3, 2.0), DataError);
}

TEST(NormTest, StreamedVarianceMatchesDirect) {
    const auto sys = linear_test(-1.0);
    const auto data = generate_dataset(sys, 120, uniform_snapshots(1.0, 5), 20);
    const auto db = make_data_batch(data, WeightScheme::rho);
    const auto net = random_network({2, {8, 8}}, 21);
    const auto subset = variance_subset(db.size(), db.size(), 0);
    const Matrix full = data_sample_gradients(net, db, subset);
    const double direct = gradient_variance_sum(full);
    const double streamed = streamed_variance_sum(net.num_params(), subset,
                                                  [&](const auto& idx) { return data_sample_gradients(net, db, idx); });
    EXPECT_NEAR(streamed, direct, 1e-12 * direct);
}

TEST(NormTest, VarianceSubset) {
    const auto all = variance_subset(10, 20, 1);
    EXPECT_EQ(all.size(), 10u);
    const auto a = variance_subset(1000, 50, 2);
    const auto b = variance_subset(1000, 50, 2);
    EXPECT_EQ(a, b);
    ASSERT_EQ(a.size(), 50u);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
    EXPECT_NE(a, variance_subset(1000, 50, 3));
}

TEST(NormTest, RatioHalvesWhenSamplesDouble) {
    // An untrained network on data from one distribution: the variance and
    // mean gradient are sample-size independent, so the ratio scales as 1/N.
    const auto sys = kraichnan_orszag();
    const auto net = random_network({4, {8, 8}}, 22, 0.3);
    auto ratio_for = [&](std::size_t n_traj) {
        const auto data = generate_dataset(sys, n_traj, {0.0, 0.5}, 23);
        const auto db = make_data_batch(data, WeightScheme::unit);
        std::vector<std::size_t> all(db.size());
        std::iota(all.begin(), all.end(), 0u);
        return norm_test(data_sample_gradients(net, db, all), 1.0, 2.0).ratio;
    };
    const double r1 = ratio_for(2000), r2 = ratio_for(4000);
    EXPECT_NEAR(r2 / r1, 0.5, 0.1);
}

TEST(Collocation, UniformStatistics) {
    Box box{Vector(2), Vector(2)};
    box.lo << -1.0, 2.0;
    box.hi << 3.0, 2.5;
    const auto c = sample_collocation(box, 4.0, 20000, 24);
    ASSERT_EQ(c.size(), 20000u);
    EXPECT_EQ(c.count(CollocationOrigin::uniform_random), 20000u);
    Vector mean = Vector::Zero(2);
    double tmean = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const auto x = c.state(i);
        EXPECT_TRUE((x.array() >= box.lo.array()).all() && (x.array() <= box.hi.array()).all());
        EXPECT_GE(c.times[i], 0.0);
        EXPECT_LE(c.times[i], 4.0);
        mean += x;
        tmean += c.times[i];
    }
    mean /= 20000.0;
    EXPECT_NEAR(mean[0], 1.0, 0.05);
    EXPECT_NEAR(mean[1], 2.25, 0.01);
    EXPECT_NEAR(tmean / 20000.0, 2.0, 0.05);
    EXPECT_EQ(sample_collocation(box, 4.0, 10, 5).states, sample_collocation(box, 4.0, 10, 5).states);
}

TEST(Collocation, BoundingBoxInflation) {
    CharacteristicDataset ds;
    ds.dim = 1;
    ds.push_back(Vector::Constant(1, 1.0), 0.0, 0.0, 0, 0);
    ds.push_back(Vector::Constant(1, 3.0), 0.0, 0.0, 1, 0);
    const auto b = bounding_box(ds, 0.1);
    EXPECT_DOUBLE_EQ(b.lo[0], 0.8);
    EXPECT_DOUBLE_EQ(b.hi[0], 3.2);
    const auto c = collocation_from_data(ds);
    EXPECT_EQ(c.count(CollocationOrigin::from_data), 2u);
}
