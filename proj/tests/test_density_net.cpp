#include "liouville/density_net.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace liouville;
using liouville::testing::fd_param_gradient;
using liouville::testing::max_relative_error;
using liouville::testing::random_network;

TEST(Architecture, Validation) {
    EXPECT_THROW(DensityNetwork(NetworkArchitecture{2, {}}), ConfigError);
    EXPECT_THROW(DensityNetwork(NetworkArchitecture{2, {4, 0}}), ConfigError);
    EXPECT_THROW(DensityNetwork(NetworkArchitecture{0, {4}}), ConfigError);
    const NetworkArchitecture a{4, {64, 64, 64, 64}};
    EXPECT_EQ(a.num_params(), 4u * 64 + 64 + 3 * (64 * 64 + 64) + 64 + 1);
}

TEST(LogRho, ZeroWeightsGiveOutputBias) {
    DensityNetwork net(NetworkArchitecture{3, {5, 5}});
    net.bias(2)[0] = -1.25;
    Vector x(2);
    x << 0.3, -7.0;
    EXPECT_EQ(net.log_rho(x, 2.0), -1.25);
    EXPECT_EQ(net.rho(x, 2.0), std::exp(-1.25));
}

TEST(LogRho, SingleHiddenNeuronByHand) {
    DensityNetwork net(NetworkArchitecture{2, {1}});
    net.weight(0) << 0.7, -0.4;
    net.bias(0) << 0.1;
    net.weight(1) << 1.3;
    net.bias(1) << -0.2;
    Vector x(1);
    x << 0.5;
    const double t = 2.0;
    const double expected = 1.3 * std::tanh(0.7 * 0.5 - 0.4 * 2.0 + 0.1) - 0.2;
    EXPECT_NEAR(net.log_rho(x, t), expected, 1e-12);

    // With scaling the same net sees scale * (input - shift).
    Vector shift(2), scale(2);
    shift << 1.0, 0.5;
    scale << 2.0, 0.25;
    net.set_scaling({shift, scale});
    const double z0 = 2.0 * (0.5 - 1.0), z1 = 0.25 * (2.0 - 0.5);
    EXPECT_NEAR(net.log_rho(x, t), 1.3 * std::tanh(0.7 * z0 - 0.4 * z1 + 0.1) - 0.2, 1e-12);
}

TEST(LogRho, ShiftAtInputCancelsFirstLayerWeights) {
    auto net = random_network(NetworkArchitecture{3, {4}}, 8);
    Vector x(2);
    x << 0.4, -0.9;
    const double t = 1.5;
    Vector shift(3);
    shift << x, t;
    net.set_scaling({shift, Vector::Constant(3, 3.7)});
    const double expected = (net.weight(1) * net.bias(0).array().tanh().matrix())(0) + net.bias(1)[0];
    EXPECT_NEAR(net.log_rho(x, t), expected, 1e-14);
}

TEST(InputPartials, ZeroNetworkIsFlat) {
    DensityNetwork net(NetworkArchitecture{4, {6, 6}});
    const auto p = net.input_partials(Vector::Ones(3), 0.5);
    EXPECT_EQ(p.dt, 0.0);
    EXPECT_EQ(p.dx, Vector::Zero(3));
}

TEST(InputPartials, AffineNetworkGivesWeightRow) {
    DensityNetwork net(NetworkArchitecture{3, {}}, true);
    net.weight(0) << 0.5, -2.0, 3.0;
    net.bias(0) << 1.0;
    Vector scale(3);
    scale << 1.0, 0.5, 2.0;
    net.set_scaling({Vector::Zero(3), scale});
    const auto p = net.input_partials(Vector::Constant(2, 0.3), 0.1);
    EXPECT_EQ(p.dx[0], 0.5 * 1.0);
    EXPECT_EQ(p.dx[1], -2.0 * 0.5);
    EXPECT_EQ(p.dt, 3.0 * 2.0);
}

TEST(InputPartials, MatchFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto net = random_network(NetworkArchitecture{4, {8, 8}}, seed);
        Vector scale(4);
        scale << 0.7, 1.3, 2.0, 0.5;
        net.set_scaling({Vector::Constant(4, 0.1), scale});
        Rng rng(seed + 100);
        std::normal_distribution<double> n(0.0, 1.0);
        Vector x(3);
        for (auto& v : x) v = n(rng);
        const double t = 0.8;
        const auto p = net.input_partials(x, t);
        Vector analytic(4), fd(4);
        analytic << p.dx, p.dt;
        Vector in(4);
        in << x, t;
        for (int k = 0; k < 4; ++k) {
            // Step of 1e-5 in normalized coordinates.
            const double h = 1e-5 / scale[k];
            Vector ip = in, im = in;
            ip[k] += h;
            im[k] -= h;
            fd[k] = (net.log_rho(ip.head(3), ip[3]) - net.log_rho(im.head(3), im[3])) / (2 * h);
        }
        EXPECT_LT(max_relative_error(analytic, fd), 1e-6) << "seed " << seed;
    }
}

TEST(ParamGradient, OutputBiasHasUnitGradient) {
    auto net = random_network(NetworkArchitecture{3, {5, 5}}, 3);
    const auto g = net.param_gradient(Vector::Ones(2), 0.2);
    EXPECT_EQ(g[static_cast<Eigen::Index>(net.bias_offset(2))], 1.0);
}

TEST(ParamGradient, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto net = random_network(NetworkArchitecture{2, {8, 8}}, seed);
        Vector x(1);
        x << 0.37;
        const double t = 0.6;
        const Vector analytic = net.param_gradient(x, t);
        const Vector fd = fd_param_gradient(net, [&](const DensityNetwork& n) { return n.log_rho(x, t); });
        EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
    }
}

TEST(ParamGradient, TangentAdjointMatchesFiniteDifferences) {
    // Gradient of the directional derivative v . grad(log rho) in a direction v.
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto net = random_network(NetworkArchitecture{3, {6, 7}}, seed);
        Matrix in(3, 1), dir(3, 1);
        in << 0.2, -0.4, 0.9;
        dir << 1.5, -0.3, 1.0;
        auto tangent = [&](const DensityNetwork& n) {
            ForwardTape tape;
            forward(n, in, tape, &dir);
            return tape.ydot[0];
        };
        ForwardTape tape;
        forward(net, in, tape, &dir);
        Vector grad = Vector::Zero(static_cast<Eigen::Index>(net.num_params()));
        const RowVector zero = RowVector::Zero(1), one = RowVector::Ones(1);
        backward(net, tape, zero, &one, SumGradientSink{net, grad});
        EXPECT_LT(max_relative_error(grad, fd_param_gradient(net, tangent)), 1e-5);
    }
}

TEST(ParamGradient, PerSampleColumnsMatchSingleGradients) {
    const auto net = random_network(NetworkArchitecture{3, {5, 4}}, 12);
    Matrix in(3, 4);
    in << 0.1, 0.5, 0.5, -1.0,
          0.2, 0.3, 0.3, 0.7,
          0.0, 1.0, 1.0, 0.4;
    ForwardTape tape;
    forward(net, in, tape);
    Matrix per(static_cast<Eigen::Index>(net.num_params()), 4);
    backward(net, tape, RowVector::Ones(4), nullptr, PerSampleGradientSink{net, per});
    for (int j = 0; j < 4; ++j)
        EXPECT_LT((per.col(j) - net.param_gradient(in.col(j).head(2), in(2, j))).norm(), 1e-14);
    // Columns 1 and 2 are the same point.
    EXPECT_EQ(per.col(1), per.col(2));
}

TEST(FlatParams, PackUnpackRoundTrip) {
    const auto net = random_network(NetworkArchitecture{4, {7, 3, 5}}, 21);
    const Vector theta = net.pack();
    EXPECT_EQ(static_cast<std::size_t>(theta.size()), net.num_params());
    DensityNetwork copy(net.architecture());
    copy.set_scaling(net.scaling());
    copy.unpack(theta);
    EXPECT_EQ(copy.pack(), theta);
    Vector x(3);
    x << 0.1, 0.2, 0.3;
    EXPECT_EQ(copy.log_rho(x, 0.4), net.log_rho(x, 0.4));
    // Layout: W_0 row-major, then b_0.
    EXPECT_EQ(theta[1], net.weight(0)(0, 1));
    EXPECT_EQ(theta[static_cast<Eigen::Index>(net.bias_offset(0))], net.bias(0)[0]);
    EXPECT_THROW(copy.unpack(Vector::Zero(3)), ConfigError);
}

TEST(Positivity, DensityIsPositiveForFiniteInputs) {
    const auto net = random_network(NetworkArchitecture{3, {8, 8}}, 4, 2.0);
    Rng rng(9);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int i = 0; i < 200; ++i) {
        Vector x(2);
        x << u(rng), u(rng);
        const double lr = net.log_rho(x, u(rng));
        EXPECT_TRUE(std::isfinite(lr));
        EXPECT_GT(std::exp(lr), 0.0);
    }
}

TEST(Glorot, InitializationShapesAndBias) {
    const NetworkArchitecture arch{4, {64, 64, 64, 64}};
    const auto net = DensityNetwork::glorot(arch, 5, InputScaling::identity(4), -2.5);
    EXPECT_EQ(net.bias(4)[0], -2.5);
    EXPECT_EQ(net.bias(0), Vector::Zero(64));
    const double a = std::sqrt(6.0 / (64 + 64));
    EXPECT_LE(net.weight(2).cwiseAbs().maxCoeff(), a);
    EXPECT_GT(net.weight(2).cwiseAbs().maxCoeff(), 0.9 * a);
}
