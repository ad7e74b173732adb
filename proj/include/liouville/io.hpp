#pragma once

// Text formats: datasets (CSV + key=value sidecar), network checkpoints and
// training reports (JSON), density grids and NRMSE tables (CSV with '#'
// header rows), and prediction queries.

#include "density_net.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "loss.hpp"
#include "training.hpp"
#include "validation.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace liouville {

namespace fs = std::filesystem;
using Metadata = std::vector<std::pair<std::string, std::string>>;

inline constexpr const char* checkpoint_format = "liouville-density-net/1";
inline constexpr const char* report_format = "liouville-train-report/1";

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError(where + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

inline std::ifstream open_input(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

inline void finish_output(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw IoError("write to " + path.string() + " failed");
}

/// Writes content to a temporary file and renames it over path.
inline void write_atomically(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        auto out = open_output(tmp);
        out << content;
        finish_output(out, tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Key-value sidecars
// ---------------------------------------------------------------------------

inline fs::path sidecar_path(const fs::path& data_path) {
    fs::path p = data_path;
    p += ".meta";
    return p;
}

inline void write_metadata(const fs::path& path, const Metadata& meta) {
    std::ostringstream out;
    for (const auto& [k, v] : meta) out << k << " = " << v << '\n';
    write_atomically(path, out.str());
}

inline Metadata read_metadata(const fs::path& path) {
    auto in = open_input(path);
    Metadata meta;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        meta.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return meta;
}

inline const std::string* find_metadata(const Metadata& meta, const std::string& key) {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Datasets: traj,snap,t,x1..xd,log_rho
// ---------------------------------------------------------------------------

inline std::string dataset_header(std::size_t dim) {
    std::string h = "traj,snap,t";
    for (std::size_t k = 1; k <= dim; ++k) h += ",x" + std::to_string(k);
    return h + ",log_rho";
}

inline void write_dataset(const fs::path& path, const CharacteristicDataset& data, const Metadata& meta) {
    std::string text = dataset_header(data.dim) + "\n";
    text.reserve(data.size() * (data.dim + 3) * 24);
    char buf[40];
    for (std::size_t i = 0; i < data.size(); ++i) {
        text += std::to_string(data.traj[i]);
        text += ',';
        text += std::to_string(data.snap[i]);
        auto put = [&](double v) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            text += buf;
        };
        put(data.times[i]);
        for (std::size_t k = 0; k < data.dim; ++k) put(data.states[i * data.dim + k]);
        put(data.log_rho[i]);
        text += '\n';
    }
    write_atomically(path, text);
    Metadata full = meta;
    full.emplace_back("dim", std::to_string(data.dim));
    full.emplace_back("rows", std::to_string(data.size()));
    full.emplace_back("trajectories", std::to_string(data.trajectory_count()));
    write_metadata(sidecar_path(path), full);
}

inline CharacteristicDataset read_dataset(const fs::path& path) {
    auto in = open_input(path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty dataset file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto cols = split_csv(line);
    if (cols.size() < 5 || cols[0] != "traj" || cols[1] != "snap" || cols[2] != "t" || cols.back() != "log_rho")
        throw IoError(path.string() + ":1: expected header traj,snap,t,x1,...,xd,log_rho");
    CharacteristicDataset ds;
    ds.dim = cols.size() - 4;
    if (line != dataset_header(ds.dim)) throw IoError(path.string() + ":1: unexpected header '" + line + "'");
    Vector x(static_cast<Eigen::Index>(ds.dim));
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (f.size() != ds.dim + 4)
            throw IoError(where + ": expected " + std::to_string(ds.dim + 4) + " fields, found " +
                          std::to_string(f.size()));
        const double tr = parse_double(f[0], where), sn = parse_double(f[1], where);
        if (tr < 0 || sn < 0 || tr != std::floor(tr) || sn != std::floor(sn))
            throw IoError(where + ": trajectory and snapshot ids must be nonnegative integers");
        for (std::size_t k = 0; k < ds.dim; ++k) x[static_cast<Eigen::Index>(k)] = parse_double(f[3 + k], where);
        ds.push_back(x, parse_double(f[2], where), parse_double(f.back(), where),
                     static_cast<std::uint32_t>(tr), static_cast<std::uint32_t>(sn));
    }
    if (ds.empty()) throw IoError(path.string() + ": dataset has no rows");
    return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const DensityNetwork& net) {
    const auto& sc = net.scaling();
    const Vector theta = net.pack();
    nlohmann::json j;
    j["format"] = checkpoint_format;
    j["input_dim"] = net.input_dim();
    j["hidden"] = net.architecture().hidden;
    j["scaling"]["shift"] = std::vector<double>(sc.shift.data(), sc.shift.data() + sc.shift.size());
    j["scaling"]["scale"] = std::vector<double>(sc.scale.data(), sc.scale.data() + sc.scale.size());
    j["parameters"] = std::vector<double>(theta.data(), theta.data() + theta.size());
    return j;
}

inline DensityNetwork network_from_json(const nlohmann::json& j, const std::string& where) {
    try {
        if (j.at("format").get<std::string>() != checkpoint_format)
            throw IoError(where + ": unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
        NetworkArchitecture arch{j.at("input_dim").get<std::size_t>(),
                                 j.at("hidden").get<std::vector<std::size_t>>()};
        arch.validate(true);
        DensityNetwork net(arch, true);
        const auto shift = j.at("scaling").at("shift").get<std::vector<double>>();
        const auto scale = j.at("scaling").at("scale").get<std::vector<double>>();
        if (shift.size() != arch.input_dim || scale.size() != arch.input_dim)
            throw IoError(where + ": scaling does not match the input dimension");
        net.set_scaling({Eigen::Map<const Vector>(shift.data(), static_cast<Eigen::Index>(shift.size())),
                         Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()))});
        const auto theta = j.at("parameters").get<std::vector<double>>();
        if (theta.size() != net.num_params())
            throw IoError(where + ": expected " + std::to_string(net.num_params()) + " parameters, found " +
                          std::to_string(theta.size()));
        net.unpack(Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(theta.size())));
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(where + ": malformed checkpoint (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw IoError(where + ": " + e.what());
    }
}

/// Checkpoint file: the network plus free-form metadata (system, horizon).
inline void write_checkpoint(const fs::path& path, const DensityNetwork& net, const Metadata& meta = {}) {
    auto j = to_json(net);
    for (const auto& [k, v] : meta) j["metadata"][k] = v;
    write_atomically(path, j.dump(1) + "\n");
}

inline nlohmann::json read_json(const fs::path& path) {
    auto in = open_input(path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": invalid JSON (" + e.what() + ")");
    }
}

inline DensityNetwork read_checkpoint(const fs::path& path, Metadata* meta = nullptr) {
    const auto j = read_json(path);
    if (meta && j.contains("metadata"))
        for (const auto& [k, v] : j["metadata"].items()) meta->emplace_back(k, v.get<std::string>());
    return network_from_json(j, path.string());
}

// ---------------------------------------------------------------------------
// Training reports
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const NormTestResult& r) {
    nlohmann::json j;
    j["ratio"] = std::isnan(r.ratio) ? nlohmann::json(nullptr) : nlohmann::json(r.ratio);
    j["passed"] = r.passed;
    j["degenerate_gradient"] = r.degenerate_gradient;
    j["suggested_size"] = r.suggested_size;
    j["variance_sum"] = r.variance_sum;
    j["gradient_l1"] = r.gradient_l1;
    j["sample_count"] = r.sample_count;
    j["variance_samples"] = r.variance_samples;
    return j;
}

inline nlohmann::json to_json(const TrainReport& rep) {
    nlohmann::json j;
    j["format"] = report_format;
    j["strategy"] = rep.strategy;
    j["wall_seconds"] = rep.wall_seconds;
    j["exhausted_horizons"] = rep.exhausted_horizons;
    j["rounds"] = nlohmann::json::array();
    for (const auto& r : rep.rounds) {
        nlohmann::json e;
        e["horizon_index"] = r.horizon_index;
        e["horizon"] = r.horizon;
        e["lambda"] = r.lambda;
        e["round"] = r.round;
        e["iterations"] = r.iterations;
        e["evaluations"] = r.evaluations;
        e["optimizer_status"] = r.optimizer_status;
        e["loss_total"] = r.loss_total;
        e["loss_data"] = r.loss_data;
        e["loss_pde"] = r.loss_pde;
        e["data_test"] = to_json(r.data_test);
        e["pde_test"] = to_json(r.pde_test);
        e["data_size"] = r.data_size;
        e["collocation_size"] = r.collocation_size;
        e["trajectories"] = r.trajectories;
        e["wall_seconds"] = r.wall_seconds;
        j["rounds"].push_back(std::move(e));
    }
    if (!rep.adam_trace.empty()) j["adam_trace"] = rep.adam_trace;
    return j;
}

inline void write_report(const fs::path& path, const TrainReport& rep) {
    write_atomically(path, to_json(rep).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Validation tables and density grids
// ---------------------------------------------------------------------------

inline void write_nrmse_table(const fs::path& path, const ValidationReport& rep) {
    std::string text = "t,nrmse\n";
    for (std::size_t k = 0; k < rep.nrmse.size(); ++k)
        text += format_double(rep.snapshot_times[k]) + "," +
                (rep.nrmse[k] ? format_double(*rep.nrmse[k]) : std::string("nan")) + "\n";
    write_atomically(path, text);
}

inline std::vector<std::string> default_state_names(std::size_t dim) {
    std::vector<std::string> names;
    for (std::size_t k = 1; k <= dim; ++k) names.push_back("x" + std::to_string(k));
    return names;
}

inline std::string format_grid(const DensityGrid& g, const std::vector<std::string>& names) {
    std::ostringstream out;
    out << "# kind = " << g.kind << '\n';
    out << "# t = " << format_double(g.t) << '\n';
    out << "# axis_a = " << names.at(g.axis_a) << " index=" << g.axis_a << " lo=" << format_double(g.grid_a.lo)
        << " hi=" << format_double(g.grid_a.hi) << " n=" << g.grid_a.n << '\n';
    out << "# axis_b = " << names.at(g.axis_b) << " index=" << g.axis_b << " lo=" << format_double(g.grid_b.lo)
        << " hi=" << format_double(g.grid_b.hi) << " n=" << g.grid_b.n << '\n';
    for (std::size_t k = 0; k < g.others.size(); ++k) {
        if (k == g.axis_a || k == g.axis_b) continue;
        const auto& o = g.others[k];
        out << "# " << names.at(k) << " = ";
        switch (o.mode) {
        case OtherCoordinate::Mode::fixed: out << "fixed " << format_double(o.value); break;
        case OtherCoordinate::Mode::integrate:
            out << "integrated lo=" << format_double(o.range.lo) << " hi=" << format_double(o.range.hi)
                << " n=" << o.range.n;
            break;
        case OtherCoordinate::Mode::average:
            out << "averaged lo=" << format_double(o.range.lo) << " hi=" << format_double(o.range.hi)
                << " n=" << o.range.n;
            break;
        }
        out << '\n';
    }
    if (g.kind == "conditional")
        out << "# normalization = none (joint density on the slice; interval coordinates averaged)\n";
    out << names.at(g.axis_a) << ',' << names.at(g.axis_b) << ",rho\n";
    for (std::size_t i = 0; i < g.grid_a.n; ++i)
        for (std::size_t j = 0; j < g.grid_b.n; ++j)
            out << format_double(g.grid_a.at(i)) << ',' << format_double(g.grid_b.at(j)) << ','
                << format_double(g.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << '\n';
    return out.str();
}

inline void write_grid(const fs::path& path, const DensityGrid& g, const std::vector<std::string>& names) {
    write_atomically(path, format_grid(g, names));
}

// ---------------------------------------------------------------------------
// Prediction queries: rows of t,x1..xd
// ---------------------------------------------------------------------------

struct QueryPoints {
    std::vector<double> times;
    std::vector<Vector> states;
};

/// Parses query rows "t,x1,...,xd". Blank lines and lines starting with '#'
/// are skipped, as is a header row starting with "t,".
inline QueryPoints parse_queries(std::istream& in, std::size_t dim, const std::string& source) {
    QueryPoints q;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (q.times.empty() && line.rfind("t,", 0) == 0) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        const auto f = split_csv(line);
        if (f.size() != dim + 1)
            throw IoError(where + ": expected " + std::to_string(dim + 1) + " values (t,x1..x" +
                          std::to_string(dim) + "), found " + std::to_string(f.size()));
        Vector x(static_cast<Eigen::Index>(dim));
        const double t = parse_double(f[0], where);
        for (std::size_t k = 0; k < dim; ++k) x[static_cast<Eigen::Index>(k)] = parse_double(f[k + 1], where);
        if (!std::isfinite(t) || !x.allFinite()) throw IoError(where + ": values must be finite");
        q.times.push_back(t);
        q.states.push_back(std::move(x));
    }
    return q;
}

} // namespace liouville
