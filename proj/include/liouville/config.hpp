#pragma once

// Run configuration: a line-oriented text file of dotted keys
// ("train.lambda = 0.5"), overridable with "key=value" strings.

#include "adam.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "lbfgs.hpp"
#include "loss.hpp"
#include "systems.hpp"
#include "training.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace liouville {

enum class Strategy { adaptive_lbfgs, fixed_lbfgs, adam };

inline std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::adaptive_lbfgs: return "adaptive-lbfgs";
    case Strategy::fixed_lbfgs: return "fixed-lbfgs";
    case Strategy::adam: return "adam";
    }
    return "unknown";
}

inline Strategy parse_strategy(const std::string& s) {
    for (auto v : {Strategy::adaptive_lbfgs, Strategy::fixed_lbfgs, Strategy::adam})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown strategy '" + s + "' (valid: adaptive-lbfgs, fixed-lbfgs, adam)");
}

inline const std::vector<std::string>& system_names() {
    static const std::vector<std::string> names{"kraichnan-orszag", "rigid-body-lqr", "linear-test"};
    return names;
}

// Equality for the option structs held by RunConfig.
inline bool operator==(const RigidBodyParams& a, const RigidBodyParams& b) {
    return a.J == b.J && a.B_offdiag == b.B_offdiag && a.h == b.h && a.beta_nominal == b.beta_nominal &&
           a.w_attitude == b.w_attitude && a.w_rate == b.w_rate && a.w_control == b.w_control;
}
inline bool operator==(const AdaptiveConfig& a, const AdaptiveConfig& b) {
    return a.eps_rho == b.eps_rho && a.eps_pde == b.eps_pde && a.s_rho == b.s_rho && a.s_pde == b.s_pde &&
           a.variance_subset_cap == b.variance_subset_cap && a.max_rounds == b.max_rounds;
}
inline bool operator==(const LbfgsOptions& a, const LbfgsOptions& b) {
    return a.history == b.history && a.max_iterations == b.max_iterations &&
           a.gradient_tolerance == b.gradient_tolerance &&
           a.relative_decrease_tolerance == b.relative_decrease_tolerance && a.c1 == b.c1 && a.c2 == b.c2 &&
           a.max_line_search_evaluations == b.max_line_search_evaluations;
}
inline bool operator==(const AdamOptions& a, const AdamOptions& b) {
    return a.learning_rate == b.learning_rate && a.beta1 == b.beta1 && a.beta2 == b.beta2 &&
           a.epsilon == b.epsilon && a.iterations == b.iterations && a.decay_every == b.decay_every &&
           a.decay_rate == b.decay_rate;
}

struct RunConfig {
    std::string system = "kraichnan-orszag";
    // linear-test
    double linear_rate = -1.0;
    double linear_mean = 0.0;
    double linear_stdev = 1.0;
    // rigid-body-lqr
    RigidBodyParams rigid;

    std::uint64_t seed = 0;

    std::size_t trajectories = 250;
    std::size_t snapshots = 80;
    double t_final = 10.0;
    double rtol = 1e-8;
    double atol = 1e-8;
    std::size_t validation_trajectories = 100;
    std::size_t validation_snapshots = 100;

    std::vector<std::size_t> hidden{64, 64, 64, 64};

    Strategy strategy = Strategy::adaptive_lbfgs;
    WeightScheme weights = WeightScheme::rho;
    double lambda = 0.5;
    std::vector<double> horizons;
    std::vector<double> lambdas;
    std::vector<std::size_t> rounds;
    double box_inflation = 0.1;

    AdaptiveConfig adaptive;
    LbfgsOptions lbfgs;
    AdamOptions adam{1e-3, 0.9, 0.999, 1e-8, 5000, 1250, 0.5};
    std::size_t collocation_batch = 1024;

    std::vector<std::size_t> plot_axes{1, 2};
    std::vector<double> plot_times;
    std::size_t plot_resolution = 101;
    std::size_t plot_quadrature = 41;

    std::string output_dir = "run";

    bool operator==(const RunConfig&) const = default;

    /// Training schedule: the configured horizons, or the single horizon
    /// t_final with train.lambda.
    HorizonSchedule schedule() const {
        if (horizons.empty()) {
            auto s = HorizonSchedule::single(t_final, lambda);
            if (!rounds.empty()) s.max_rounds = rounds;
            return s;
        }
        return {horizons, lambdas, rounds};
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        return parse_double(v, key);
    } catch (const IoError&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t to_unsigned(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto t = trim(v);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
        throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
    return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    const auto t = trim(v);
    if (t.empty()) return out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = t.find(',', start);
        out.push_back(trim(t.substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T, typename Fn>
std::string join(const std::vector<T>& v, Fn&& fmt) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Ptr>
Field real(std::string key, Ptr ptr) {
    return {key, [ptr, key](RunConfig& c, const std::string& v) { ptr(c) = to_double(key, v); },
            [ptr](const RunConfig& c) { return format_double(ptr(const_cast<RunConfig&>(c))); }};
}

template <typename Ptr>
Field count(std::string key, Ptr ptr) {
    return {key,
            [ptr, key](RunConfig& c, const std::string& v) {
                ptr(c) = static_cast<std::remove_reference_t<decltype(ptr(c))>>(to_unsigned(key, v));
            },
            [ptr](const RunConfig& c) { return std::to_string(ptr(const_cast<RunConfig&>(c))); }};
}

template <typename Ptr>
Field real_list(std::string key, Ptr ptr) {
    return {key,
            [ptr, key](RunConfig& c, const std::string& v) {
                std::vector<double> out;
                for (const auto& s : split_list(v)) out.push_back(to_double(key, s));
                ptr(c) = out;
            },
            [ptr](const RunConfig& c) {
                return join(ptr(const_cast<RunConfig&>(c)), [](double x) { return format_double(x); });
            }};
}

template <typename Ptr>
Field count_list(std::string key, Ptr ptr) {
    return {key,
            [ptr, key](RunConfig& c, const std::string& v) {
                std::vector<std::size_t> out;
                for (const auto& s : split_list(v)) out.push_back(to_unsigned(key, s));
                ptr(c) = out;
            },
            [ptr](const RunConfig& c) {
                return join(ptr(const_cast<RunConfig&>(c)), [](std::size_t x) { return std::to_string(x); });
            }};
}

/// List of exactly n numbers, read and written through accessors.
template <typename Get, typename Set>
Field fixed_list(std::string key, std::size_t n, Get get, Set set) {
    return {key,
            [key, n, set](RunConfig& c, const std::string& v) {
                std::vector<double> out;
                for (const auto& s : split_list(v)) out.push_back(to_double(key, s));
                if (out.size() != n) throw ConfigError(key + ": expected " + std::to_string(n) + " numbers");
                set(c, out);
            },
            [get](const RunConfig& c) { return join(get(c), [](double x) { return format_double(x); }); }};
}

inline const std::vector<Field>& config_fields() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back({"system.name",
                     [](RunConfig& c, const std::string& v) {
                         if (std::find(system_names().begin(), system_names().end(), v) == system_names().end())
                             throw ConfigError("system.name: unknown system '" + v +
                                               "' (valid: kraichnan-orszag, rigid-body-lqr, linear-test)");
                         c.system = v;
                     },
                     [](const RunConfig& c) { return c.system; }});
        f.push_back(real("system.linear.rate", [](RunConfig& c) -> double& { return c.linear_rate; }));
        f.push_back(real("system.linear.mean", [](RunConfig& c) -> double& { return c.linear_mean; }));
        f.push_back(real("system.linear.stdev", [](RunConfig& c) -> double& { return c.linear_stdev; }));
        f.push_back(fixed_list("system.rigid.inertia", 3,
                               [](const RunConfig& c) { return std::vector<double>{c.rigid.J(0, 0), c.rigid.J(1, 1), c.rigid.J(2, 2)}; },
                               [](RunConfig& c, const std::vector<double>& v) {
                                   c.rigid.J = Eigen::Vector3d(v[0], v[1], v[2]).asDiagonal();
                               }));
        f.push_back(fixed_list("system.rigid.b_offdiag", 9,
                               [](const RunConfig& c) {
                                   std::vector<double> v;
                                   for (int i = 0; i < 3; ++i)
                                       for (int j = 0; j < 3; ++j) v.push_back(c.rigid.B_offdiag(i, j));
                                   return v;
                               },
                               [](RunConfig& c, const std::vector<double>& v) {
                                   for (int i = 0; i < 3; ++i)
                                       for (int j = 0; j < 3; ++j)
                                           c.rigid.B_offdiag(i, j) = i == j ? 0.0 : v[static_cast<std::size_t>(3 * i + j)];
                               }));
        f.push_back(fixed_list("system.rigid.h", 3,
                               [](const RunConfig& c) { return std::vector<double>{c.rigid.h[0], c.rigid.h[1], c.rigid.h[2]}; },
                               [](RunConfig& c, const std::vector<double>& v) { c.rigid.h = Eigen::Vector3d(v[0], v[1], v[2]); }));
        f.push_back(real("system.rigid.beta_nominal", [](RunConfig& c) -> double& { return c.rigid.beta_nominal; }));
        f.push_back(real("system.rigid.w_attitude", [](RunConfig& c) -> double& { return c.rigid.w_attitude; }));
        f.push_back(real("system.rigid.w_rate", [](RunConfig& c) -> double& { return c.rigid.w_rate; }));
        f.push_back(real("system.rigid.w_control", [](RunConfig& c) -> double& { return c.rigid.w_control; }));
        f.push_back(count("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
        f.push_back(count("data.trajectories", [](RunConfig& c) -> std::size_t& { return c.trajectories; }));
        f.push_back(count("data.snapshots", [](RunConfig& c) -> std::size_t& { return c.snapshots; }));
        f.push_back(real("data.t_final", [](RunConfig& c) -> double& { return c.t_final; }));
        f.push_back(real("data.rtol", [](RunConfig& c) -> double& { return c.rtol; }));
        f.push_back(real("data.atol", [](RunConfig& c) -> double& { return c.atol; }));
        f.push_back(count("data.validation_trajectories",
                          [](RunConfig& c) -> std::size_t& { return c.validation_trajectories; }));
        f.push_back(count("data.validation_snapshots",
                          [](RunConfig& c) -> std::size_t& { return c.validation_snapshots; }));
        f.push_back(count_list("network.hidden", [](RunConfig& c) -> std::vector<std::size_t>& { return c.hidden; }));
        f.push_back({"train.strategy",
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.strategy = parse_strategy(v);
                         } catch (const ConfigError& e) {
                             throw ConfigError(std::string("train.strategy: ") + e.what());
                         }
                     },
                     [](const RunConfig& c) { return to_string(c.strategy); }});
        f.push_back({"train.weights",
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.weights = parse_weight_scheme(v);
                         } catch (const ConfigError& e) {
                             throw ConfigError(std::string("train.weights: ") + e.what());
                         }
                     },
                     [](const RunConfig& c) { return to_string(c.weights); }});
        f.push_back(real("train.lambda", [](RunConfig& c) -> double& { return c.lambda; }));
        f.push_back(real_list("train.horizons", [](RunConfig& c) -> std::vector<double>& { return c.horizons; }));
        f.push_back(real_list("train.lambdas", [](RunConfig& c) -> std::vector<double>& { return c.lambdas; }));
        f.push_back(count_list("train.rounds", [](RunConfig& c) -> std::vector<std::size_t>& { return c.rounds; }));
        f.push_back(real("train.box_inflation", [](RunConfig& c) -> double& { return c.box_inflation; }));
        f.push_back(real("adaptive.eps_rho", [](RunConfig& c) -> double& { return c.adaptive.eps_rho; }));
        f.push_back(real("adaptive.eps_pde", [](RunConfig& c) -> double& { return c.adaptive.eps_pde; }));
        f.push_back(real("adaptive.s_rho", [](RunConfig& c) -> double& { return c.adaptive.s_rho; }));
        f.push_back(real("adaptive.s_pde", [](RunConfig& c) -> double& { return c.adaptive.s_pde; }));
        f.push_back(count("adaptive.variance_subset_cap",
                          [](RunConfig& c) -> std::size_t& { return c.adaptive.variance_subset_cap; }));
        f.push_back(count("adaptive.max_rounds", [](RunConfig& c) -> std::size_t& { return c.adaptive.max_rounds; }));
        f.push_back(count("lbfgs.history", [](RunConfig& c) -> std::size_t& { return c.lbfgs.history; }));
        f.push_back(count("lbfgs.max_iterations", [](RunConfig& c) -> std::size_t& { return c.lbfgs.max_iterations; }));
        f.push_back(real("lbfgs.gradient_tolerance", [](RunConfig& c) -> double& { return c.lbfgs.gradient_tolerance; }));
        f.push_back(real("lbfgs.relative_decrease_tolerance",
                         [](RunConfig& c) -> double& { return c.lbfgs.relative_decrease_tolerance; }));
        f.push_back(real("adam.learning_rate", [](RunConfig& c) -> double& { return c.adam.learning_rate; }));
        f.push_back(count("adam.iterations", [](RunConfig& c) -> std::size_t& { return c.adam.iterations; }));
        f.push_back(count("adam.decay_every", [](RunConfig& c) -> std::size_t& { return c.adam.decay_every; }));
        f.push_back(real("adam.decay_rate", [](RunConfig& c) -> double& { return c.adam.decay_rate; }));
        f.push_back(count("adam.collocation_batch", [](RunConfig& c) -> std::size_t& { return c.collocation_batch; }));
        f.push_back(count_list("plot.axes", [](RunConfig& c) -> std::vector<std::size_t>& { return c.plot_axes; }));
        f.push_back(real_list("plot.times", [](RunConfig& c) -> std::vector<double>& { return c.plot_times; }));
        f.push_back(count("plot.resolution", [](RunConfig& c) -> std::size_t& { return c.plot_resolution; }));
        f.push_back(count("plot.quadrature", [](RunConfig& c) -> std::size_t& { return c.plot_quadrature; }));
        f.push_back({"output.dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
                     [](const RunConfig& c) { return c.output_dir; }});
        return f;
    }();
    return fields;
}

inline const Field& find_field(const std::string& key) {
    for (const auto& f : config_fields())
        if (f.key == key) return f;
    throw ConfigError("unknown configuration key '" + key + "'");
}

} // namespace detail

/// Applies one "key = value" assignment.
inline void apply_setting(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    const auto key = detail::trim(assignment.substr(0, eq));
    detail::find_field(key).set(c, detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
    RunConfig c;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        try {
            apply_setting(c, t);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    auto in = open_input(path);
    return parse_config(in, path.string());
}

/// Every key, in a fixed order; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const RunConfig& c) {
    std::string out;
    for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(c) + "\n";
    return out;
}

/// Range checks with the offending key in every message.
inline void validate_config(const RunConfig& c) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    need(c.trajectories >= 1, "data.trajectories: must be at least 1");
    need(c.snapshots >= 2, "data.snapshots: must be at least 2");
    need(c.t_final > 0.0 && std::isfinite(c.t_final), "data.t_final: must be positive");
    need(c.rtol > 0.0 && c.atol > 0.0, "data.rtol, data.atol: must be positive");
    need(c.validation_trajectories >= 1, "data.validation_trajectories: must be at least 1");
    need(c.validation_snapshots >= 2, "data.validation_snapshots: must be at least 2");
    need(!c.hidden.empty(), "network.hidden: needs at least one hidden layer");
    for (auto w : c.hidden) need(w >= 1, "network.hidden: widths must be at least 1");
    need(c.lambda >= 0.0, "train.lambda: must be nonnegative");
    need(c.box_inflation >= 0.0, "train.box_inflation: must be nonnegative");
    if (!c.horizons.empty()) {
        try {
            c.schedule().validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("train.horizons / train.lambdas / train.rounds: ") + e.what());
        }
        need(std::abs(c.horizons.back() - c.t_final) <= 1e-12 * c.t_final,
             "train.horizons: the last horizon must equal data.t_final");
    } else {
        need(c.lambdas.empty(), "train.lambdas: only valid together with train.horizons");
        need(c.rounds.size() <= 1, "train.rounds: one entry without train.horizons");
    }
    try {
        c.adaptive.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("adaptive.*: ") + e.what());
    }
    need(c.lbfgs.history >= 1, "lbfgs.history: must be at least 1");
    need(c.lbfgs.max_iterations >= 1, "lbfgs.max_iterations: must be at least 1");
    need(c.adam.learning_rate >= 0.0, "adam.learning_rate: must be nonnegative");
    need(c.adam.iterations >= 1, "adam.iterations: must be at least 1");
    need(c.adam.decay_rate > 0.0, "adam.decay_rate: must be positive");
    need(c.collocation_batch >= 1, "adam.collocation_batch: must be at least 1");
    need(c.linear_stdev > 0.0, "system.linear.stdev: must be positive");
    if (c.system == "rigid-body-lqr") {
        try {
            c.rigid.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("system.rigid.*: ") + e.what());
        }
    }
    need(c.plot_axes.size() == 2 && c.plot_axes[0] != c.plot_axes[1] && c.plot_axes[0] >= 1 &&
             c.plot_axes[1] >= 1,
         "plot.axes: expected two distinct 1-based state indices");
    need(c.plot_resolution >= 2 && c.plot_quadrature >= 2, "plot.resolution, plot.quadrature: must be at least 2");
    for (double t : c.plot_times) need(t >= 0.0 && t <= c.t_final, "plot.times: must lie in [0, data.t_final]");
    need(!c.output_dir.empty(), "output.dir: must not be empty");
}

inline SystemModel make_system(const RunConfig& c) {
    if (c.system == "kraichnan-orszag") return kraichnan_orszag();
    if (c.system == "linear-test") return linear_test(c.linear_rate, c.linear_mean, c.linear_stdev);
    if (c.system == "rigid-body-lqr") return rigid_body_lqr(c.rigid);
    throw ConfigError("system.name: unknown system '" + c.system + "'");
}

inline std::vector<std::string> state_names(const RunConfig& c, std::size_t dim) {
    if (c.system == "rigid-body-lqr") return {"phi", "theta", "psi", "omega1", "omega2", "omega3", "beta"};
    return default_state_names(dim);
}

} // namespace liouville
