#pragma once

// Fully connected tanh network predicting log rho(x; t).
//
// Inputs are the raw (x_1, ..., x_d, t) columns, mapped affinely by
// InputScaling before the first layer. Hidden layers use tanh and the output
// layer is linear, so exp(output) is a strictly positive density.
//
// Flat parameter order: for each layer l = 0..L-1, W_l in row-major order
// followed by b_l.

#include "errors.hpp"
#include "random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace liouville {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct NetworkArchitecture {
    std::size_t input_dim = 0; // d + 1
    std::vector<std::size_t> hidden;

    /// Shape check. An empty hidden list (a plain affine map) is only
    /// accepted when allow_affine is set; it exists for derivative tests.
    void validate(bool allow_affine = false) const {
        if (input_dim < 1) throw ConfigError("network input dimension must be at least 1");
        if (hidden.empty() && !allow_affine)
            throw ConfigError("network needs at least one hidden layer");
        for (auto w : hidden)
            if (w < 1) throw ConfigError("hidden layer widths must be at least 1");
    }

    std::size_t layer_count() const { return hidden.size() + 1; }
    std::size_t in_width(std::size_t l) const { return l == 0 ? input_dim : hidden[l - 1]; }
    std::size_t out_width(std::size_t l) const { return l == hidden.size() ? 1 : hidden[l]; }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < layer_count(); ++l) n += out_width(l) * (in_width(l) + 1);
        return n;
    }

    bool operator==(const NetworkArchitecture&) const = default;
};

/// z = scale .* (input - shift)
struct InputScaling {
    Vector shift;
    Vector scale;

    static InputScaling identity(std::size_t n) {
        return {Vector::Zero(static_cast<Eigen::Index>(n)), Vector::Ones(static_cast<Eigen::Index>(n))};
    }

    /// Maps [lo_i, hi_i] onto [-1, 1]; degenerate ranges keep unit scale.
    static InputScaling from_bounds(const Vector& lo, const Vector& hi) {
        InputScaling s{0.5 * (lo + hi), Vector::Ones(lo.size())};
        for (Eigen::Index i = 0; i < lo.size(); ++i) {
            const double width = hi[i] - lo[i];
            if (width > 0.0) s.scale[i] = 2.0 / width;
        }
        return s;
    }
};

class DensityNetwork {
public:
    DensityNetwork() = default;

    explicit DensityNetwork(NetworkArchitecture arch, bool allow_affine = false)
        : arch_(std::move(arch)), scaling_(InputScaling::identity(arch_.input_dim)) {
        arch_.validate(allow_affine);
        for (std::size_t l = 0; l < arch_.layer_count(); ++l) {
            weights_.push_back(Matrix::Zero(static_cast<Eigen::Index>(arch_.out_width(l)),
                                            static_cast<Eigen::Index>(arch_.in_width(l))));
            biases_.push_back(Vector::Zero(static_cast<Eigen::Index>(arch_.out_width(l))));
        }
    }

    /// Glorot-uniform weights, zero biases except the output bias.
    static DensityNetwork glorot(NetworkArchitecture arch, std::uint64_t seed,
                                 InputScaling scaling, double output_bias = 0.0) {
        DensityNetwork net(std::move(arch));
        net.set_scaling(std::move(scaling));
        auto rng = make_rng(seed);
        for (auto& w : net.weights_) {
            const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            std::uniform_real_distribution<double> dist(-a, a);
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
        }
        net.biases_.back()[0] = output_bias;
        return net;
    }

    const NetworkArchitecture& architecture() const { return arch_; }
    std::size_t input_dim() const { return arch_.input_dim; }
    std::size_t layer_count() const { return weights_.size(); }
    std::size_t num_params() const { return arch_.num_params(); }

    const Matrix& weight(std::size_t l) const { return weights_[l]; }
    const Vector& bias(std::size_t l) const { return biases_[l]; }
    Matrix& weight(std::size_t l) { return weights_[l]; }
    Vector& bias(std::size_t l) { return biases_[l]; }

    const InputScaling& scaling() const { return scaling_; }
    void set_scaling(InputScaling s) {
        if (static_cast<std::size_t>(s.shift.size()) != arch_.input_dim ||
            static_cast<std::size_t>(s.scale.size()) != arch_.input_dim)
            throw ConfigError("input scaling has wrong dimension");
        scaling_ = std::move(s);
    }

    /// Offset of W_l within the flat parameter vector; b_l follows it.
    std::size_t weight_offset(std::size_t l) const {
        std::size_t off = 0;
        for (std::size_t k = 0; k < l; ++k) off += arch_.out_width(k) * (arch_.in_width(k) + 1);
        return off;
    }
    std::size_t bias_offset(std::size_t l) const {
        return weight_offset(l) + arch_.out_width(l) * arch_.in_width(l);
    }

    Vector pack() const {
        Vector theta(static_cast<Eigen::Index>(num_params()));
        for (std::size_t l = 0; l < layer_count(); ++l) {
            const auto& w = weights_[l];
            Eigen::Map<RowMajorMatrix>(theta.data() + weight_offset(l), w.rows(), w.cols()) = w;
            theta.segment(static_cast<Eigen::Index>(bias_offset(l)), biases_[l].size()) = biases_[l];
        }
        return theta;
    }

    void unpack(const Eigen::Ref<const Vector>& theta) {
        if (static_cast<std::size_t>(theta.size()) != num_params())
            throw ConfigError("parameter vector has wrong length");
        for (std::size_t l = 0; l < layer_count(); ++l) {
            auto& w = weights_[l];
            w = Eigen::Map<const RowMajorMatrix>(theta.data() + weight_offset(l), w.rows(), w.cols());
            biases_[l] = theta.segment(static_cast<Eigen::Index>(bias_offset(l)), biases_[l].size());
        }
    }

    bool parameters_finite() const {
        for (std::size_t l = 0; l < layer_count(); ++l)
            if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
        return true;
    }

    double log_rho(const Eigen::Ref<const Vector>& x, double t) const;
    double rho(const Eigen::Ref<const Vector>& x, double t) const { return std::exp(log_rho(x, t)); }

    struct InputPartials {
        double dt = 0.0;
        Vector dx;
    };
    /// Exact d/dt and grad_x of log rho by forward-mode propagation, one
    /// tangent direction per input coordinate.
    InputPartials input_partials(const Eigen::Ref<const Vector>& x, double t) const;

    /// Gradient of log rho(x, t) with respect to the flat parameters.
    Vector param_gradient(const Eigen::Ref<const Vector>& x, double t) const;

    /// log rho for every column of a (d+1) x N input matrix.
    RowVector log_rho_batch(const Matrix& inputs) const;

private:
    NetworkArchitecture arch_;
    std::vector<Matrix> weights_;
    std::vector<Vector> biases_;
    InputScaling scaling_;
};

// ---------------------------------------------------------------------------
// Batched forward / tangent / reverse passes
// ---------------------------------------------------------------------------

/// Activations recorded by a forward pass over a batch of N inputs.
struct ForwardTape {
    std::vector<Matrix> h;    // h[0]: scaled input, h[l]: output of hidden layer l
    std::vector<Matrix> hdot; // tangents of h (only with a direction)
    std::vector<Matrix> adot; // tangents of the pre-activations
    RowVector y;
    RowVector ydot;
    bool has_tangent = false;
};

/// Forward pass. If directions is non-null, also propagates the directional
/// derivative of the output along each column of directions (raw input units).
inline void forward(const DensityNetwork& net, const Matrix& inputs, ForwardTape& tape,
                    const Matrix* directions = nullptr) {
    const std::size_t layers = net.layer_count();
    const auto& sc = net.scaling();
    tape.has_tangent = directions != nullptr;
    tape.h.resize(layers);
    tape.h[0] = (inputs.colwise() - sc.shift).array().colwise() * sc.scale.array();
    if (tape.has_tangent) {
        tape.hdot.resize(layers);
        tape.adot.resize(layers);
        tape.hdot[0] = directions->array().colwise() * sc.scale.array();
    }
    for (std::size_t l = 0; l + 1 < layers; ++l) {
        Matrix a = net.weight(l) * tape.h[l];
        a.colwise() += net.bias(l);
        tape.h[l + 1] = a.array().tanh();
        if (tape.has_tangent) {
            tape.adot[l].noalias() = net.weight(l) * tape.hdot[l];
            tape.hdot[l + 1] = (1.0 - tape.h[l + 1].array().square()) * tape.adot[l].array();
        }
    }
    const std::size_t last = layers - 1;
    tape.y.noalias() = net.weight(last) * tape.h[last];
    tape.y.array() += net.bias(last)[0];
    if (tape.has_tangent) tape.ydot.noalias() = net.weight(last) * tape.hdot[last];
}

/// Accumulates sum_n (ybar_n dy_n/dtheta + ydotbar_n dydot_n/dtheta) into grad.
struct SumGradientSink {
    const DensityNetwork& net;
    Eigen::Ref<Vector> grad;

    void operator()(std::size_t l, const Matrix& abar, const Matrix& h_prev, const Matrix* adotbar,
                    const Matrix* hdot_prev) {
        const auto& w = net.weight(l);
        Eigen::Map<RowMajorMatrix> gw(grad.data() + net.weight_offset(l), w.rows(), w.cols());
        gw.noalias() += abar * h_prev.transpose();
        if (adotbar) gw.noalias() += *adotbar * hdot_prev->transpose();
        grad.segment(static_cast<Eigen::Index>(net.bias_offset(l)), w.rows()) += abar.rowwise().sum();
    }
};

/// Writes the per-sample gradient of sample n into column n of grads.
struct PerSampleGradientSink {
    const DensityNetwork& net;
    Matrix& grads; // num_params x N

    void operator()(std::size_t l, const Matrix& abar, const Matrix& h_prev, const Matrix* adotbar,
                    const Matrix* hdot_prev) {
        const auto& w = net.weight(l);
        const auto woff = static_cast<Eigen::Index>(net.weight_offset(l));
        const auto boff = static_cast<Eigen::Index>(net.bias_offset(l));
        for (Eigen::Index n = 0; n < grads.cols(); ++n) {
            Eigen::Map<RowMajorMatrix> gw(grads.col(n).data() + woff, w.rows(), w.cols());
            gw.noalias() = abar.col(n) * h_prev.col(n).transpose();
            if (adotbar) gw.noalias() += adotbar->col(n) * hdot_prev->col(n).transpose();
            grads.col(n).segment(boff, w.rows()) = abar.col(n);
        }
    }
};

/// Reverse accumulation through a recorded tape. ybar holds adjoints of the
/// outputs; ydotbar (optional, requires a tangent tape) holds adjoints of the
/// directional derivatives. The tangent adjoint is carried alongside the
/// primal adjoint, which makes gradients of derivative-based quantities exact.
template <typename Sink>
void backward(const DensityNetwork& net, const ForwardTape& tape, const RowVector& ybar,
              const RowVector* ydotbar, Sink&& sink) {
    const bool tangent = ydotbar != nullptr;
    if (tangent && !tape.has_tangent)
        throw std::logic_error("backward: tangent adjoint requires a tangent tape");
    const std::size_t last = net.layer_count() - 1;

    Matrix abar = ybar;
    Matrix adotbar;
    if (tangent) adotbar = *ydotbar;
    sink(last, abar, tape.h[last], tangent ? &adotbar : nullptr,
         tangent ? &tape.hdot[last] : nullptr);
    if (last == 0) return;

    Matrix hbar = net.weight(last).transpose() * abar;
    Matrix hdotbar;
    if (tangent) hdotbar = net.weight(last).transpose() * adotbar;

    for (std::size_t l = last; l-- > 0;) {
        const auto& h = tape.h[l + 1];
        const auto slope = (1.0 - h.array().square()).eval();
        if (tangent) {
            adotbar = slope * hdotbar.array();
            hbar.array() -= 2.0 * h.array() * tape.adot[l].array() * hdotbar.array();
        }
        abar = slope * hbar.array();
        sink(l, abar, tape.h[l], tangent ? &adotbar : nullptr, tangent ? &tape.hdot[l] : nullptr);
        if (l == 0) break;
        hbar.noalias() = net.weight(l).transpose() * abar;
        if (tangent) hdotbar.noalias() = net.weight(l).transpose() * adotbar;
    }
}

inline Matrix make_input(const Eigen::Ref<const Vector>& x, double t) {
    Matrix in(x.size() + 1, 1);
    in.col(0).head(x.size()) = x;
    in(x.size(), 0) = t;
    return in;
}

inline RowVector DensityNetwork::log_rho_batch(const Matrix& inputs) const {
    if (static_cast<std::size_t>(inputs.rows()) != input_dim())
        throw ConfigError("input rows do not match network input dimension");
    ForwardTape tape;
    forward(*this, inputs, tape);
    return tape.y;
}

inline double DensityNetwork::log_rho(const Eigen::Ref<const Vector>& x, double t) const {
    return log_rho_batch(make_input(x, t))[0];
}

inline DensityNetwork::InputPartials DensityNetwork::input_partials(
    const Eigen::Ref<const Vector>& x, double t) const {
    const auto n = static_cast<Eigen::Index>(input_dim());
    const Matrix inputs = make_input(x, t).replicate(1, n);
    const Matrix dirs = Matrix::Identity(n, n);
    ForwardTape tape;
    forward(*this, inputs, tape, &dirs);
    return {tape.ydot[n - 1], tape.ydot.head(n - 1).transpose()};
}

inline Vector DensityNetwork::param_gradient(const Eigen::Ref<const Vector>& x, double t) const {
    ForwardTape tape;
    forward(*this, make_input(x, t), tape);
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(num_params()));
    backward(*this, tape, RowVector::Ones(1), nullptr, SumGradientSink{*this, grad});
    return grad;
}

} // namespace liouville
