#pragma once

// Benchmark systems and the LQR synthesis used by the rigid body model.

#include "dynamics.hpp"
#include "errors.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>

namespace liouville {

// ---------------------------------------------------------------------------
// Analytic test systems
// ---------------------------------------------------------------------------

/// Kraichnan-Orszag three-mode system, x1' = x1 x3, x2' = -x2 x3,
/// x3' = -x1^2 + x2^2. Divergence-free. The initial density straddles the
/// x2 = 0 plane.
inline SystemModel kraichnan_orszag() {
    auto field = [](const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx) {
        dx[0] = x[0] * x[2];
        dx[1] = -x[1] * x[2];
        dx[2] = -x[0] * x[0] + x[1] * x[1];
    };
    auto divergence = [](const Eigen::Ref<const Vector>&) { return 0.0; };
    Vector mean(3), stdev(3);
    mean << 1.0, 0.0, 0.0;
    stdev << 0.25, 0.5, 0.5;
    return SystemModel("kraichnan-orszag", 3, field, divergence,
                       InitialDensity::normal(std::move(mean), std::move(stdev)));
}

/// x' = A x. The density along a characteristic is rho_0(x0) exp(-t tr A).
inline SystemModel linear_system(Matrix a, InitialDensity initial,
                                 std::string name = "linear-test") {
    if (a.rows() != a.cols()) throw ConfigError("linear system matrix must be square");
    const double trace = a.trace();
    const auto d = static_cast<std::size_t>(a.rows());
    auto field = [a = std::move(a)](const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx) {
        dx.noalias() = a * x;
    };
    auto divergence = [trace](const Eigen::Ref<const Vector>&) { return trace; };
    return SystemModel(std::move(name), d, field, divergence, std::move(initial));
}

/// The scalar test problem x' = rate * x with rho_0 = N(mean, stdev^2).
inline SystemModel linear_test(double rate = -1.0, double mean = 0.0, double stdev = 1.0) {
    return linear_system(Matrix::Constant(1, 1, rate),
                         InitialDensity::normal(Vector::Constant(1, mean),
                                                Vector::Constant(1, stdev)));
}

/// Exact log-density of linear_test at (x, t): rho(x, t) = e^{-rate t} rho_0(x e^{-rate t}).
inline double linear_test_log_density(double x, double t, double rate = -1.0, double mean = 0.0,
                                      double stdev = 1.0) {
    const double x0 = x * std::exp(-rate * t);
    const double z = (x0 - mean) / stdev;
    return -rate * t - 0.5 * z * z - std::log(stdev) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Linearization and Riccati solver
// ---------------------------------------------------------------------------

using ControlledField = std::function<Vector(const Vector& x, const Vector& u)>;

/// Central finite-difference Jacobians (df/dx, df/du) at (x_bar, u_bar).
inline std::pair<Matrix, Matrix> linearize(const ControlledField& f, const Vector& x_bar,
                                           const Vector& u_bar, double step = 1e-6) {
    const Vector f0 = f(x_bar, u_bar);
    const auto n = f0.size();
    Matrix fx(n, x_bar.size()), fu(n, u_bar.size());
    for (Eigen::Index j = 0; j < x_bar.size(); ++j) {
        Vector xp = x_bar, xm = x_bar;
        xp[j] += step;
        xm[j] -= step;
        fx.col(j) = (f(xp, u_bar) - f(xm, u_bar)) / (2.0 * step);
    }
    for (Eigen::Index j = 0; j < u_bar.size(); ++j) {
        Vector up = u_bar, um = u_bar;
        up[j] += step;
        um[j] -= step;
        fu.col(j) = (f(x_bar, up) - f(x_bar, um)) / (2.0 * step);
    }
    if (!fx.allFinite() || !fu.allFinite())
        throw NumericError("linearize: non-finite field evaluation");
    return {std::move(fx), std::move(fu)};
}

inline bool is_hurwitz(const Matrix& a) {
    Eigen::EigenSolver<Matrix> es(a, false);
    return (es.eigenvalues().real().array() < 0.0).all();
}

/// Solves A^T X + X A + C = 0 by vectorization. Intended for small n.
inline Matrix solve_lyapunov(const Matrix& a, const Matrix& c) {
    const auto n = a.rows();
    const Matrix at = a.transpose();
    const Matrix eye = Matrix::Identity(n, n);
    Matrix kron = Matrix::Zero(n * n, n * n);
    // vec(A^T X) = (I kron A^T) vec X,  vec(X A) = (A^T kron I) vec X
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            kron.block(i * n, j * n, n, n) += eye(i, j) * at;
            kron.block(i * n, j * n, n, n) += at(i, j) * eye;
        }
    const Vector rhs = -Eigen::Map<const Vector>(c.data(), n * n);
    Eigen::FullPivLU<Matrix> lu(kron);
    if (!lu.isInvertible()) throw NumericError("Lyapunov operator is singular");
    const Vector x = lu.solve(rhs);
    Matrix out = Eigen::Map<const Matrix>(x.data(), n, n);
    return 0.5 * (out + out.transpose());
}

struct LqrDesign {
    Matrix F, G, Q, R, P, K;
};

inline double care_residual(const Matrix& f, const Matrix& g, const Matrix& q, const Matrix& r,
                            const Matrix& p) {
    const Matrix res = f.transpose() * p + p * f - p * g * r.ldlt().solve(g.transpose() * p) + q;
    return res.norm() / std::max(q.norm(), std::numeric_limits<double>::min());
}

struct CareOptions {
    std::size_t max_iterations = 100;
    double tolerance = 1e-13; // relative residual
};

/// Continuous algebraic Riccati equation F^T P + P F - P G R^-1 G^T P + Q = 0
/// by Newton-Kleinman iteration. A stabilizing starting gain comes from the
/// Bass shift: with c large enough that F + cI is anti-stable, the Lyapunov
/// solution Z of (F + cI) Z + Z (F + cI)^T = 2 G G^T gives K0 = G^T Z^-1.
inline LqrDesign solve_care(const Matrix& f, const Matrix& g, const Matrix& q, const Matrix& r,
                            const CareOptions& opts = {}) {
    const auto n = f.rows();
    if (f.cols() != n || g.rows() != n || q.rows() != n || q.cols() != n || r.rows() != g.cols() ||
        r.cols() != g.cols())
        throw ConfigError("solve_care: inconsistent matrix shapes");
    Eigen::LLT<Matrix> r_chol(r);
    if (r_chol.info() != Eigen::Success) throw ConfigError("solve_care: R must be positive definite");

    Matrix k = Matrix::Zero(g.cols(), n);
    if (!is_hurwitz(f)) {
        const double c = f.norm() + 1.0;
        const Matrix shifted = f + c * Matrix::Identity(n, n);
        // (F + cI) Z + Z (F + cI)^T = 2 G G^T  <=>  A^T Z + Z A + C = 0 with A = (F + cI)^T.
        const Matrix z = solve_lyapunov(shifted.transpose(), -2.0 * g * g.transpose());
        Eigen::LLT<Matrix> z_chol(z);
        if (z_chol.info() != Eigen::Success)
            throw NumericError("solve_care: (F, G) is not stabilizable; no initial gain found");
        k = z_chol.solve(g).transpose();
        if (!is_hurwitz(f - g * k))
            throw NumericError("solve_care: (F, G) is not stabilizable; no initial gain found");
    }

    Matrix p;
    double residual = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < opts.max_iterations; ++it) {
        const Matrix closed = f - g * k;
        p = solve_lyapunov(closed, q + k.transpose() * r * k);
        k = r_chol.solve(g.transpose() * p);
        residual = care_residual(f, g, q, r, p);
        if (residual < opts.tolerance) break;
    }
    if (!(residual < 1e-9))
        throw NumericError("solve_care: Newton-Kleinman did not converge, residual " +
                           std::to_string(residual));
    return {f, g, q, r, p, k};
}

// ---------------------------------------------------------------------------
// Rigid body with reaction-wheel torque and LQR feedback
// ---------------------------------------------------------------------------

/// Body-rate to ZYX Euler-angle-rate map: v' = E(v) w with v = (roll, pitch, yaw).
inline Eigen::Matrix3d euler_rate_matrix(const Eigen::Vector3d& v) {
    const double sphi = std::sin(v[0]), cphi = std::cos(v[0]);
    const double ttheta = std::tan(v[1]), ctheta = std::cos(v[1]);
    Eigen::Matrix3d e;
    e << 1.0, sphi * ttheta, cphi * ttheta,
         0.0, cphi, -sphi,
         0.0, sphi / ctheta, cphi / ctheta;
    return e;
}

/// Inertial-to-body rotation for ZYX Euler angles, (Rz(yaw) Ry(pitch) Rx(roll))^T.
inline Eigen::Matrix3d rotation_inertial_to_body(const Eigen::Vector3d& v) {
    const Eigen::Matrix3d body_to_inertial =
        (Eigen::AngleAxisd(v[2], Eigen::Vector3d::UnitZ()) *
         Eigen::AngleAxisd(v[1], Eigen::Vector3d::UnitY()) *
         Eigen::AngleAxisd(v[0], Eigen::Vector3d::UnitX()))
            .toRotationMatrix();
    return body_to_inertial.transpose();
}

/// S(w) with S(w) a = a x w.
inline Eigen::Matrix3d cross_product_matrix(const Eigen::Vector3d& w) {
    Eigen::Matrix3d s;
    s << 0.0, w[2], -w[1],
         -w[2], 0.0, w[0],
         w[1], -w[0], 0.0;
    return s;
}

struct RigidBodyParams {
    Eigen::Matrix3d J = Eigen::Vector3d(2.0, 3.0, 4.0).asDiagonal();
    /// Off-diagonal part of the actuator matrix; the diagonal is beta.
    Eigen::Matrix3d B_offdiag = (Eigen::Matrix3d() << 0.0, 0.1, 0.2,
                                                      0.2, 0.0, 0.3,
                                                      0.3, 0.2, 0.0).finished();
    Eigen::Vector3d h = Eigen::Vector3d::Ones();
    double beta_nominal = 1.0;
    double w_attitude = 4.0; // W1
    double w_rate = 0.5;     // W2
    double w_control = 8.0;  // W3

    Eigen::Matrix3d B(double beta) const {
        Eigen::Matrix3d b = B_offdiag;
        b.diagonal().setConstant(beta);
        return b;
    }

    void validate() const {
        Eigen::LLT<Eigen::Matrix3d> llt(J);
        if (llt.info() != Eigen::Success || !J.isApprox(J.transpose()))
            throw ConfigError("rigid body inertia must be symmetric positive definite");
        if (!(w_attitude >= 0.0 && w_rate >= 0.0 && w_control > 0.0))
            throw ConfigError("LQR weights must satisfy W1, W2 >= 0 and W3 > 0");
    }
};

/// Open-loop rigid body dynamics for state (v, w) in R^6 and torque u in R^3.
inline Vector rigid_body_open_loop(const RigidBodyParams& p, double beta, const Vector& x,
                                   const Vector& u) {
    const Eigen::Vector3d v = x.head<3>();
    const Eigen::Vector3d w = x.segment<3>(3);
    Vector dx(6);
    dx.head<3>() = euler_rate_matrix(v) * w;
    dx.segment<3>(3) =
        p.J.ldlt().solve(cross_product_matrix(w) * rotation_inertial_to_body(v) * p.h +
                         p.B(beta) * Eigen::Vector3d(u));
    return dx;
}

/// LQR design for the rigid body linearized about (v, w) = 0 at beta_nominal,
/// with Q = diag(W1 I, W2 I) and R = W3 I.
inline LqrDesign rigid_body_lqr_design(const RigidBodyParams& p) {
    p.validate();
    auto f = [&p](const Vector& x, const Vector& u) {
        return rigid_body_open_loop(p, p.beta_nominal, x, u);
    };
    auto [fx, fu] = linearize(f, Vector::Zero(6), Vector::Zero(3));
    Matrix q = Matrix::Zero(6, 6);
    q.diagonal() << p.w_attitude, p.w_attitude, p.w_attitude, p.w_rate, p.w_rate, p.w_rate;
    const Matrix r = p.w_control * Matrix::Identity(3, 3);
    return solve_care(fx, fu, q, r);
}

/// Initial density for (roll, pitch, yaw, w1, w2, w3, beta): angles ~ N(0, (pi/6)^2),
/// rates ~ N(0, 2^2), beta ~ 1/2 N(1/3, 1/9^2) + 1/2 N(1, 1/9^2).
inline InitialDensity rigid_body_initial_density() {
    Vector stdev(7);
    const double a = std::numbers::pi / 6.0;
    stdev << a, a, a, 2.0, 2.0, 2.0, 1.0 / 9.0;
    Vector low = Vector::Zero(7), high = Vector::Zero(7);
    low[6] = 1.0 / 3.0;
    high[6] = 1.0;
    return InitialDensity({GaussianComponent{0.5, low, stdev}, GaussianComponent{0.5, high, stdev}});
}

/// Closed-loop rigid body x' = f(x, -K x) with the uncertain actuator
/// effectiveness beta appended as a constant seventh state. K is designed at
/// beta_nominal; B(beta) uses the sampled value.
inline SystemModel rigid_body_lqr(const RigidBodyParams& params, const LqrDesign& design) {
    params.validate();
    if (design.K.rows() != 3 || design.K.cols() != 6)
        throw ConfigError("rigid body LQR gain must be 3x6");
    const Eigen::Matrix3d j_inv = params.J.inverse();
    const Eigen::Matrix<double, 3, 6> gain = design.K;
    const Eigen::Matrix3d k_rate = gain.rightCols<3>();
    const Eigen::Matrix3d b_off = params.B_offdiag;
    const Eigen::Vector3d h = params.h;
    constexpr double singular_pitch = std::numbers::pi / 2.0 - 1e-6;

    auto field = [=](const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dx) {
        if (std::abs(x[1]) >= singular_pitch) {
            dx.setConstant(std::numeric_limits<double>::quiet_NaN());
            return;
        }
        const Eigen::Vector3d v = x.head<3>();
        const Eigen::Vector3d w = x.segment<3>(3);
        Eigen::Matrix3d b = b_off;
        b.diagonal().setConstant(x[6]);
        const Eigen::Vector3d u = -(gain * x.head<6>());
        dx.head<3>() = euler_rate_matrix(v) * w;
        dx.segment<3>(3) = j_inv * (cross_product_matrix(w) * rotation_inertial_to_body(v) * h + b * u);
        dx[6] = 0.0;
    };
    // d/dw of (R h) x w is [R h]_x, so the rate block contributes
    // tr(J^-1 [R h]_x) - tr(J^-1 B(beta) K_w); the attitude block contributes
    // d(roll')/d(roll) = tan(pitch) (cos(roll) w2 - sin(roll) w3).
    auto divergence = [=](const Eigen::Ref<const Vector>& x) {
        if (std::abs(x[1]) >= singular_pitch) return std::numeric_limits<double>::quiet_NaN();
        const Eigen::Vector3d v = x.head<3>();
        const double attitude =
            std::tan(x[1]) * (std::cos(x[0]) * x[4] - std::sin(x[0]) * x[5]);
        const Eigen::Vector3d c = rotation_inertial_to_body(v) * h;
        Eigen::Matrix3d c_cross; // [c]_x a = c x a
        c_cross << 0.0, -c[2], c[1],
                   c[2], 0.0, -c[0],
                   -c[1], c[0], 0.0;
        Eigen::Matrix3d b = b_off;
        b.diagonal().setConstant(x[6]);
        return attitude + (j_inv * c_cross).trace() - (j_inv * b * k_rate).trace();
    };
    return SystemModel("rigid-body-lqr", 7, field, divergence, rigid_body_initial_density());
}

inline SystemModel rigid_body_lqr(const RigidBodyParams& params = {}) {
    return rigid_body_lqr(params, rigid_body_lqr_design(params));
}

} // namespace liouville
