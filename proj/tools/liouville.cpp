// Command-line driver: simulate, train, validate, predict, marginalize,
// plot-data. Exit codes: 0 success, 2 configuration, 3 numeric, 4 I/O.

#include "liouville/config.hpp"
#include "liouville/io.hpp"
#include "liouville/log.hpp"
#include "liouville/parallel.hpp"
#include "liouville/random.hpp"
#include "liouville/training.hpp"
#include "liouville/validation.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>

using namespace liouville;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    bool verbose = false;
    bool quiet = false;
};

RunConfig load(const Common& c) {
    RunConfig cfg = load_config(c.config_path);
    for (const auto& s : c.overrides) {
        try {
            apply_setting(cfg, s);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("--set: ") + e.what());
        }
    }
    validate_config(cfg);
    return cfg;
}

/// Exclusive lock on an output directory for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".liouville.lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw IoError("output directory " + dir.string() + " is locked by another run (remove " +
                          path_.string() + " if that run is gone)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path path_;
};

fs::path out_dir(const RunConfig& c) { return fs::path(c.output_dir); }

Metadata dataset_metadata(const RunConfig& c, const std::string& role, std::size_t snapshots, std::uint64_t seed) {
    return {{"system", c.system},
            {"role", role},
            {"t_final", format_double(c.t_final)},
            {"snapshots", std::to_string(snapshots)},
            {"root_seed", std::to_string(c.seed)},
            {"seed", std::to_string(seed)},
            {"rtol", format_double(c.rtol)},
            {"atol", format_double(c.atol)}};
}

DatasetOptions dataset_options(const RunConfig& c) {
    DatasetOptions o;
    o.tol = {c.rtol, c.atol};
    return o;
}

CharacteristicDataset load_dataset_for(const RunConfig& cfg, const fs::path& path, const SystemModel& sys) {
    auto ds = read_dataset(path);
    if (ds.dim != sys.dim())
        throw ConfigError(path.string() + " has state dimension " + std::to_string(ds.dim) + " but " + cfg.system +
                          " has " + std::to_string(sys.dim()));
    const auto meta_path = sidecar_path(path);
    if (fs::exists(meta_path)) {
        const auto meta = read_metadata(meta_path);
        if (const auto* s = find_metadata(meta, "system"); s && *s != cfg.system)
            throw ConfigError(path.string() + " was generated for system '" + *s + "', config has '" + cfg.system + "'");
    }
    return ds;
}

void print_report_line(const ValidationReport& rep) {
    std::printf("snapshots %zu, points %zu, NRMSE mean %.6g, max %.6g\n", rep.nrmse.size(), rep.dataset_size,
                rep.time_average(), rep.max());
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& common) {
    const auto cfg = load(common);
    const DirectoryLock lock(out_dir(cfg));
    const auto sys = make_system(cfg);
    const auto opts = dataset_options(cfg);
    const auto train_seed = derive_seed(cfg.seed, "data");
    const auto val_seed = derive_seed(cfg.seed, "validation");
    const auto train = generate_dataset(sys, cfg.trajectories, uniform_snapshots(cfg.t_final, cfg.snapshots),
                                        train_seed, opts);
    write_dataset(out_dir(cfg) / "train.csv", train, dataset_metadata(cfg, "train", cfg.snapshots, train_seed));
    const auto val = generate_dataset(sys, cfg.validation_trajectories,
                                      uniform_snapshots(cfg.t_final, cfg.validation_snapshots), val_seed, opts);
    write_dataset(out_dir(cfg) / "validation.csv", val,
                  dataset_metadata(cfg, "validation", cfg.validation_snapshots, val_seed));
    write_atomically(out_dir(cfg) / "config.txt", serialize_config(cfg));
    std::printf("wrote %zu training rows and %zu validation rows to %s\n", train.size(), val.size(),
                cfg.output_dir.c_str());
    return 0;
}

struct TrainArgs {
    std::string data;
    bool resume = false;
};

int cmd_train(const Common& common, const TrainArgs& args) {
    const auto cfg = load(common);
    const DirectoryLock lock(out_dir(cfg));
    const auto sys = make_system(cfg);
    const fs::path ckpt_dir = out_dir(cfg) / "checkpoints";
    const fs::path data_path = args.data.empty() ? out_dir(cfg) / "train.csv" : fs::path(args.data);
    auto data = load_dataset_for(cfg, data_path, sys);
    write_atomically(out_dir(cfg) / "config.txt", serialize_config(cfg));

    TrainResult result;
    if (cfg.strategy == Strategy::adam) {
        if (args.resume) log_warn("the adam strategy has no intermediate checkpoints; training from scratch");
        AdamTrainOptions o;
        o.hidden = cfg.hidden;
        o.weights = cfg.weights;
        o.lambda = cfg.lambda;
        o.t_final = cfg.t_final;
        o.adam = cfg.adam;
        o.collocation_batch = cfg.collocation_batch;
        o.seed = cfg.seed;
        o.box_inflation = cfg.box_inflation;
        result = train_adam(sys, std::move(data), o);
    } else {
        TrainOptions o;
        o.hidden = cfg.hidden;
        o.weights = cfg.weights;
        o.schedule = cfg.schedule();
        o.adaptive = cfg.adaptive;
        if (cfg.strategy == Strategy::fixed_lbfgs) {
            o.adaptive.max_rounds = 1;
            o.schedule.max_rounds.clear();
        }
        o.lbfgs = cfg.lbfgs;
        o.snapshots = uniform_snapshots(cfg.t_final, cfg.snapshots);
        o.data = dataset_options(cfg);
        o.seed = cfg.seed;
        o.box_inflation = cfg.box_inflation;
        const auto horizons = o.schedule.horizons.size();
        o.on_horizon_done = [&](const HorizonCheckpoint& h) {
            const auto stem = "horizon-" + std::to_string(h.horizon_index);
            write_dataset(ckpt_dir / (stem + "-data.csv"), h.data,
                          dataset_metadata(cfg, "train", cfg.snapshots, derive_seed(cfg.seed, "data")));
            write_checkpoint(ckpt_dir / (stem + ".json"), h.net,
                             {{"system", cfg.system},
                              {"horizon_index", std::to_string(h.horizon_index)},
                              {"horizon", format_double(h.horizon)}});
            log_info("checkpoint written for horizon " + std::to_string(h.horizon_index + 1) + "/" +
                     std::to_string(horizons));
        };
        std::optional<DensityNetwork> warm;
        if (args.resume) {
            for (std::size_t k = horizons; k-- > 0;) {
                const auto stem = ckpt_dir / ("horizon-" + std::to_string(k));
                if (fs::exists(stem.string() + ".json") && fs::exists(stem.string() + "-data.csv")) {
                    warm = read_checkpoint(stem.string() + ".json");
                    data = load_dataset_for(cfg, stem.string() + "-data.csv", sys);
                    o.start_horizon = k + 1;
                    break;
                }
            }
            if (!warm) log_warn("no checkpoint found in " + ckpt_dir.string() + "; training from scratch");
            else if (o.start_horizon == horizons) {
                write_checkpoint(out_dir(cfg) / "model.json", *warm, {{"system", cfg.system}});
                std::printf("all %zu horizons already trained; model.json refreshed\n", horizons);
                return 0;
            } else {
                std::printf("resuming at horizon %zu of %zu\n", o.start_horizon + 1, horizons);
            }
        }
        result = train_adaptive(sys, std::move(data), o, std::move(warm));
    }
    write_checkpoint(out_dir(cfg) / "model.json", result.net, {{"system", cfg.system}, {"strategy", to_string(cfg.strategy)}});
    write_report(out_dir(cfg) / "report.json", result.report);
    const auto& last = result.report.rounds.back();
    std::printf("trained %zu round(s) in %.1f s; final loss %.6g (data %.6g, pde %.6g), |D| = %zu\n",
                result.report.rounds.size(), result.report.wall_seconds, last.loss_total, last.loss_data,
                last.loss_pde, last.data_size);
    return 0;
}

struct ModelArgs {
    std::string model;
    std::string data;
};

DensityNetwork load_model(const RunConfig& cfg, const SystemModel& sys, const std::string& path) {
    const fs::path p = path.empty() ? out_dir(cfg) / "model.json" : fs::path(path);
    Metadata meta;
    auto net = read_checkpoint(p, &meta);
    if (net.input_dim() != sys.dim() + 1)
        throw ConfigError(p.string() + " expects " + std::to_string(net.input_dim() - 1) + " state dimensions but " +
                          cfg.system + " has " + std::to_string(sys.dim()));
    return net;
}

ValidationReport run_validation(const RunConfig& cfg, const SystemModel& sys, const DensityNetwork& net,
                                const std::string& data) {
    const fs::path p = data.empty() ? out_dir(cfg) / "validation.csv" : fs::path(data);
    const auto rep = nrmse(net, load_dataset_for(cfg, p, sys));
    write_nrmse_table(out_dir(cfg) / "nrmse.csv", rep);
    return rep;
}

int cmd_validate(const Common& common, const ModelArgs& args) {
    const auto cfg = load(common);
    const DirectoryLock lock(out_dir(cfg));
    const auto sys = make_system(cfg);
    const auto net = load_model(cfg, sys, args.model);
    print_report_line(run_validation(cfg, sys, net, args.data));
    return 0;
}

struct PredictArgs {
    std::string model;
    std::string query = "-";
    std::string out;
};

int cmd_predict(const Common& common, const PredictArgs& args) {
    const auto cfg = load(common);
    const auto sys = make_system(cfg);
    const auto net = load_model(cfg, sys, args.model);
    QueryPoints q;
    if (args.query == "-") {
        q = parse_queries(std::cin, sys.dim(), "<stdin>");
    } else {
        auto in = open_input(args.query);
        q = parse_queries(in, sys.dim(), args.query);
    }
    std::string text = "t";
    for (const auto& n : state_names(cfg, sys.dim())) text += "," + n;
    text += ",rho,log_rho\n";
    for (std::size_t i = 0; i < q.times.size(); ++i) {
        const double lr = net.log_rho(q.states[i], q.times[i]);
        text += format_double(q.times[i]);
        for (Eigen::Index k = 0; k < q.states[i].size(); ++k) text += "," + format_double(q.states[i][k]);
        text += "," + format_double(std::exp(lr)) + "," + format_double(lr) + "\n";
    }
    if (args.out.empty()) std::cout << text;
    else write_atomically(args.out, text);
    return 0;
}

struct GridArgs {
    std::string model;
    std::string data;
    std::string mode = "marginal";
    std::vector<std::size_t> axes;
    std::vector<double> times;
    std::vector<std::string> fixes;
    std::vector<std::string> averages;
    std::vector<std::string> ranges;
    std::size_t resolution = 0;
    std::size_t quadrature = 0;
};

std::size_t coordinate_index(const std::string& key, const std::vector<std::string>& names) {
    for (std::size_t k = 0; k < names.size(); ++k)
        if (names[k] == key) return k;
    std::size_t k = 0;
    const auto res = std::from_chars(key.data(), key.data() + key.size(), k);
    if (res.ec != std::errc() || res.ptr != key.data() + key.size() || k < 1 || k > names.size())
        throw ConfigError("unknown coordinate '" + key + "' (use a 1-based index or one of the state names)");
    return k - 1;
}

/// Parses "coord=lo:hi[:n]" or "coord=value".
std::pair<std::size_t, std::vector<double>> parse_coordinate_spec(const std::string& spec,
                                                                  const std::vector<std::string>& names,
                                                                  const std::string& flag) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError(flag + ": expected coord=value, got '" + spec + "'");
    const auto k = coordinate_index(spec.substr(0, eq), names);
    std::vector<double> values;
    std::string rest = spec.substr(eq + 1);
    std::size_t start = 0;
    for (;;) {
        const auto pos = rest.find(':', start);
        try {
            values.push_back(parse_double(rest.substr(start, pos == std::string::npos ? std::string::npos : pos - start), flag));
        } catch (const IoError& e) {
            throw ConfigError(e.what());
        }
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return {k, values};
}

std::string time_tag(double t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", t);
    return buf;
}

std::vector<fs::path> write_grids(const RunConfig& cfg, const SystemModel& sys, const DensityNetwork& net,
                                  const GridArgs& args) {
    const std::size_t d = sys.dim();
    const auto names = state_names(cfg, d);
    const auto axes = args.axes.empty() ? cfg.plot_axes : args.axes;
    if (axes.size() != 2 || axes[0] == axes[1] || axes[0] < 1 || axes[1] < 1 || axes[0] > d || axes[1] > d)
        throw ConfigError("--axes: expected two distinct 1-based indices up to " + std::to_string(d));
    const std::size_t a = axes[0] - 1, b = axes[1] - 1;
    std::vector<double> times = args.times.empty() ? cfg.plot_times : args.times;
    if (times.empty()) times = {0.0, 0.5 * cfg.t_final, cfg.t_final};
    const std::size_t res = args.resolution ? args.resolution : cfg.plot_resolution;
    const std::size_t quad = args.quadrature ? args.quadrature : cfg.plot_quadrature;
    if (args.mode != "marginal" && args.mode != "conditional")
        throw ConfigError("--mode: expected marginal or conditional, got '" + args.mode + "'");

    // Default ranges: bounding box of the validation data, widened by 10%.
    const fs::path data_path = args.data.empty() ? out_dir(cfg) / "validation.csv" : fs::path(args.data);
    std::vector<AxisGrid> ranges(d);
    if (fs::exists(data_path)) {
        const auto box = bounding_box(load_dataset_for(cfg, data_path, sys), 0.1);
        for (std::size_t k = 0; k < d; ++k)
            ranges[k] = {box.lo[static_cast<Eigen::Index>(k)], box.hi[static_cast<Eigen::Index>(k)], quad};
    } else if (args.ranges.size() < d) {
        throw ConfigError("no dataset at " + data_path.string() + " to derive grid ranges; pass --range for every coordinate");
    }
    for (const auto& s : args.ranges) {
        const auto [k, v] = parse_coordinate_spec(s, names, "--range");
        if (v.size() < 2 || v.size() > 3) throw ConfigError("--range: expected coord=lo:hi[:n]");
        ranges[k] = {v[0], v[1], v.size() == 3 ? static_cast<std::size_t>(v[2]) : quad};
    }

    std::vector<OtherCoordinate> others(d);
    if (args.mode == "marginal") {
        if (!args.fixes.empty() || !args.averages.empty())
            throw ConfigError("--fix and --average apply to conditional slices only");
        for (std::size_t k = 0; k < d; ++k) others[k] = OtherCoordinate::integrate(ranges[k]);
    } else {
        for (std::size_t k = 0; k < d; ++k) others[k] = OtherCoordinate::at(0.0);
        if (cfg.system == "rigid-body-lqr") others[6] = OtherCoordinate::at(cfg.rigid.beta_nominal);
        for (const auto& s : args.fixes) {
            const auto [k, v] = parse_coordinate_spec(s, names, "--fix");
            if (v.size() != 1) throw ConfigError("--fix: expected coord=value");
            others[k] = OtherCoordinate::at(v[0]);
        }
        for (const auto& s : args.averages) {
            const auto [k, v] = parse_coordinate_spec(s, names, "--average");
            if (v.size() < 2 || v.size() > 3) throw ConfigError("--average: expected coord=lo:hi[:n]");
            others[k] = OtherCoordinate::average(v[0], v[1], v.size() == 3 ? static_cast<std::size_t>(v[2]) : quad);
        }
    }

    std::vector<fs::path> written;
    for (double t : times) {
        const AxisGrid ga{ranges[a].lo, ranges[a].hi, res}, gb{ranges[b].lo, ranges[b].hi, res};
        auto grid = args.mode == "marginal" ? evaluate_grid(net, a, b, ga, gb, t, others, "marginal")
                                            : conditional_slice(net, a, b, ga, gb, t, others);
        const auto path = out_dir(cfg) / "grids" /
                          (args.mode + "-" + names[a] + "-" + names[b] + "-t" + time_tag(t) + ".csv");
        write_grid(path, grid, names);
        written.push_back(path);
        std::printf("%s (mass %.6g)\n", path.string().c_str(), grid_mass(grid));
    }
    return written;
}

int cmd_marginalize(const Common& common, const GridArgs& args) {
    const auto cfg = load(common);
    const DirectoryLock lock(out_dir(cfg));
    const auto sys = make_system(cfg);
    const auto net = load_model(cfg, sys, args.model);
    write_grids(cfg, sys, net, args);
    return 0;
}

int cmd_plot_data(const Common& common, GridArgs args) {
    const auto cfg = load(common);
    const DirectoryLock lock(out_dir(cfg));
    const auto sys = make_system(cfg);
    const auto net = load_model(cfg, sys, args.model);
    const fs::path val = args.data.empty() ? out_dir(cfg) / "validation.csv" : fs::path(args.data);
    if (fs::exists(val)) {
        print_report_line(run_validation(cfg, sys, net, args.data));
        std::printf("%s\n", (out_dir(cfg) / "nrmse.csv").string().c_str());
    }
    // Full marginals where the quadrature stays small, conditional slices otherwise.
    if (args.mode.empty()) args.mode = sys.dim() <= 2 + GridLimits{}.max_quadrature_dims ? "marginal" : "conditional";
    write_grids(cfg, sys, net, args);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Learn time-dependent probability densities of ODE systems from characteristics data"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", common.config_path, "Run configuration file")->required()->check(CLI::ExistingFile);
        sub->add_option("--set", common.overrides, "Override a configuration key (key=value), repeatable");
        sub->add_flag("-v,--verbose", common.verbose, "Progress messages");
        sub->add_flag("-q,--quiet", common.quiet, "Errors only");
    };

    auto* simulate = app.add_subcommand("simulate", "Integrate training and validation datasets");
    add_common(simulate);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train the density network");
    add_common(train);
    train->add_option("--data", train_args.data, "Training dataset (default <output.dir>/train.csv)");
    train->add_flag("--resume", train_args.resume, "Continue from the last per-horizon checkpoint");

    ModelArgs model_args;
    auto* validate = app.add_subcommand("validate", "NRMSE of a trained model on the validation dataset");
    add_common(validate);
    validate->add_option("--model", model_args.model, "Checkpoint (default <output.dir>/model.json)");
    validate->add_option("--data", model_args.data, "Validation dataset (default <output.dir>/validation.csv)");

    PredictArgs predict_args;
    auto* predict = app.add_subcommand("predict", "Evaluate the density at query points (rows t,x1..xd)");
    add_common(predict);
    predict->add_option("--model", predict_args.model, "Checkpoint (default <output.dir>/model.json)");
    predict->add_option("--query", predict_args.query, "Query file, '-' for stdin");
    predict->add_option("--out", predict_args.out, "Output file (default stdout)");

    GridArgs grid_args;
    auto add_grid = [&](CLI::App* sub) {
        sub->add_option("--model", grid_args.model, "Checkpoint (default <output.dir>/model.json)");
        sub->add_option("--data", grid_args.data, "Dataset used for default grid ranges");
        sub->add_option("--axes", grid_args.axes, "Two 1-based state indices (default plot.axes)")->delimiter(',');
        sub->add_option("--times", grid_args.times, "Snapshot times (default plot.times)")->delimiter(',');
        sub->add_option("--fix", grid_args.fixes, "Conditioning value coord=value, repeatable");
        sub->add_option("--average", grid_args.averages, "Conditioning interval coord=lo:hi[:n], repeatable");
        sub->add_option("--range", grid_args.ranges, "Grid or integration range coord=lo:hi[:n], repeatable");
        sub->add_option("--resolution", grid_args.resolution, "Points per plot axis (default plot.resolution)");
        sub->add_option("--quadrature", grid_args.quadrature, "Nodes per integrated axis (default plot.quadrature)");
    };
    auto* marginalize = app.add_subcommand("marginalize", "Density grids: marginals or conditional slices");
    add_common(marginalize);
    add_grid(marginalize);
    marginalize->add_option("--mode", grid_args.mode, "marginal or conditional");

    auto* plot_data = app.add_subcommand("plot-data", "NRMSE table and density grids for the plot helper");
    add_common(plot_data);
    add_grid(plot_data);
    std::string plot_mode;
    plot_data->add_option("--mode", plot_mode, "marginal or conditional (default by dimension)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    log_level() = common.quiet ? LogLevel::quiet : common.verbose ? LogLevel::info : LogLevel::warn;
    try {
        if (*simulate) return cmd_simulate(common);
        if (*train) return cmd_train(common, train_args);
        if (*validate) return cmd_validate(common, model_args);
        if (*predict) return cmd_predict(common, predict_args);
        if (*marginalize) return cmd_marginalize(common, grid_args);
        if (*plot_data) {
            grid_args.mode = plot_mode;
            return cmd_plot_data(common, grid_args);
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    }
    return 2;
}
