#pragma once

#include "magslam/config.hpp"
#include "magslam/csv.hpp"
#include "magslam/plot.hpp"
#include "magslam/simulator.hpp"
#include "magslam/slam.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace magslam {

// ---------------------------------------------------------------------------
// Scenario <-> Problem bridge
// ---------------------------------------------------------------------------

/// Planar SLAM problem for a simulated scenario, solved with the given
/// (possibly wrong) hyperparameters.
inline Problem make_problem(const Scenario& sc, const Hyperparams& assumed, KernelFamily family,
                            HyperMode hyper_mode = HyperMode::Fixed) {
    Problem p;
    p.planar = true;
    p.imu = sc.imu;
    p.mag = sc.mag;
    p.initial_state = sc.dr_initial_state;
    p.gravity = Vec3::Zero();
    p.kernel = Kernel{family, assumed, 2};
    p.hyper_mode = hyper_mode;
    p.hyper_init = assumed;
    p.odom_sigma = std::max(sc.config.odom_sigma, 1e-9);
    return p;
}

// ---------------------------------------------------------------------------
// Scenario configuration from INI
// ---------------------------------------------------------------------------

inline ScenarioConfig scenario_from_ini(const Ini& ini) {
    ScenarioConfig cfg;
    cfg.traj.shape = trajectory_shape_from_string(ini.get_or("scenario", "shape", "rectangle"));
    cfg.traj.spacing = ini.get_double_or("scenario", "spacing", 0.25);
    cfg.traj.loops = static_cast<int>(ini.get_int_or("scenario", "loops", 2));
    cfg.traj.width = ini.get_double_or("scenario", "width", 0.75);
    cfg.traj.height = ini.get_double_or("scenario", "height", 0.25);
    cfg.traj.alternate = ini.get_bool_or("scenario", "alternate", true);
    cfg.traj.spiral_gap = ini.get_double_or("scenario", "spiral_gap", 0.0);
    if (ini.has("scenario", "waypoints")) {
        const auto v = ini.get_list("scenario", "waypoints");
        if (v.size() % 2 != 0) throw InputError("config: waypoints needs x,y pairs");
        for (size_t i = 0; i + 1 < v.size(); i += 2) cfg.traj.waypoints.emplace_back(v[i], v[i + 1]);
    }
    cfg.dt = ini.get_double_or("scenario", "dt", 1.0);
    cfg.odom_sigma = ini.get_double_or("scenario", "odom_sigma", 5e-4);
    if (ini.has("scenario", "odom_bias")) {
        const auto b = ini.get_list("scenario", "odom_bias");
        if (b.size() != 2) throw InputError("config: odom_bias needs two values");
        cfg.odom_bias = Vec2(b[0], b[1]);
    }
    cfg.mag_noise_sigma = ini.get_double_or("scenario", "mag_noise", 1e-3);
    cfg.family = kernel_family_from_string(ini.get_or("scenario", "kernel", "se-independent"));
    cfg.hypers.sigma_f = ini.get_double_or("scenario", "sigma_f", 0.1);
    cfg.hypers.length_scale = ini.get_double_or("scenario", "length_scale", 0.1);
    cfg.seed = static_cast<std::uint64_t>(ini.get_int_or("scenario", "seed", 1));
    return cfg;
}

inline SolveOptions solve_options_from_ini(const Ini& ini) {
    SolveOptions opt;
    opt.max_iterations = static_cast<int>(ini.get_int_or("solver", "max_iterations", 2000));
    opt.cost_rel_tol = ini.get_double_or("solver", "cost_rel_tol", 1e-10);
    opt.grad_tol = ini.get_double_or("solver", "grad_tol", 1e-8);
    return opt;
}

// ---------------------------------------------------------------------------
// Study runner
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::string study = "single_run";  // sigma_f_sweep | wrong_sigma_f | l_sweep |
                                       // wrong_l | odometry_noise | single_run
    std::vector<double> values = {0.0};
    int seeds = 1;
    std::uint64_t base_seed = 1;
    int workers = 2;
    ScenarioConfig scenario;
    HyperMode hyper_mode = HyperMode::Fixed;
    std::optional<Hyperparams> assumed_override;  // single_run only
    KernelFamily solver_family = KernelFamily::SeIndependent;
    bool solver_family_set = false;
    SolveOptions solve_options;

    void validate() const {
        static const char* known[] = {"sigma_f_sweep", "wrong_sigma_f", "l_sweep",
                                      "wrong_l",       "odometry_noise", "single_run"};
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return study == k; }) == std::end(known))
            throw InputError("unknown study '" + study + "'");
        if (values.empty()) throw InputError("study: sweep values must be non-empty");
        if (seeds < 1) throw InputError("study: seeds must be >= 1");
    }
};

inline ExperimentConfig experiment_from_ini(const Ini& ini) {
    ExperimentConfig cfg;
    cfg.scenario = scenario_from_ini(ini);
    cfg.study = ini.get_or("study", "study", "single_run");
    if (ini.has("study", "values")) cfg.values = ini.get_list("study", "values");
    cfg.seeds = static_cast<int>(ini.get_int_or("study", "seeds", 1));
    cfg.base_seed = static_cast<std::uint64_t>(
        ini.get_int_or("study", "base_seed", static_cast<long>(cfg.scenario.seed)));
    cfg.workers = static_cast<int>(ini.get_int_or("study", "workers", 2));
    cfg.solve_options = solve_options_from_ini(ini);
    const std::string hm = ini.get_or("solver", "hyper_mode", "fixed");
    if (hm == "fixed")
        cfg.hyper_mode = HyperMode::Fixed;
    else if (hm == "estimated")
        cfg.hyper_mode = HyperMode::Estimated;
    else
        throw InputError("config: hyper_mode must be fixed or estimated");
    if (ini.has("solver", "sigma_f") || ini.has("solver", "length_scale")) {
        Hyperparams h = cfg.scenario.hypers;
        h.sigma_f = ini.get_double_or("solver", "sigma_f", h.sigma_f);
        h.length_scale = ini.get_double_or("solver", "length_scale", h.length_scale);
        cfg.assumed_override = h;
    }
    if (ini.has("solver", "kernel")) {
        cfg.solver_family = kernel_family_from_string(ini.get("solver", "kernel"));
        cfg.solver_family_set = true;
    }
    cfg.validate();
    return cfg;
}

struct StudyRow {
    std::string study;
    double param = 0.0;
    std::uint64_t seed = 0;
    double rmse_before = std::numeric_limits<double>::quiet_NaN();
    double rmse_after = std::numeric_limits<double>::quiet_NaN();
    double max_before = std::numeric_limits<double>::quiet_NaN();
    double max_after = std::numeric_limits<double>::quiet_NaN();
    int iterations = 0;
    bool converged = false;
    double sigma_f_est = std::numeric_limits<double>::quiet_NaN();
    double length_scale_est = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

/// Scenario + assumed hyperparameters for one study cell.
inline void study_cell_config(const ExperimentConfig& cfg, double value, ScenarioConfig& sc,
                              Hyperparams& assumed) {
    sc = cfg.scenario;
    assumed = sc.hypers;
    if (cfg.study == "sigma_f_sweep") {
        sc.hypers.sigma_f = value;
        assumed = sc.hypers;
    } else if (cfg.study == "wrong_sigma_f") {
        assumed.sigma_f = value;
    } else if (cfg.study == "l_sweep") {
        sc.hypers.length_scale = value;
        assumed = sc.hypers;
    } else if (cfg.study == "wrong_l") {
        assumed.length_scale = value;
    } else if (cfg.study == "odometry_noise") {
        sc.odom_sigma = value;
    } else if (cfg.study == "single_run") {
        if (cfg.assumed_override) assumed = *cfg.assumed_override;
    }
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Run one study cell (param value x seed index).
inline StudyRow run_study_cell(const ExperimentConfig& cfg, double value, int seed_idx) {
    StudyRow row;
    row.study = cfg.study;
    row.param = value;
    row.seed = seed_idx;
    try {
        ScenarioConfig sc_cfg;
        Hyperparams assumed;
        detail::study_cell_config(cfg, value, sc_cfg, assumed);
        sc_cfg.seed = Rng::derive(cfg.base_seed, static_cast<std::uint64_t>(seed_idx));
        const Scenario sc = build_scenario(sc_cfg);

        const KernelFamily family = cfg.solver_family_set ? cfg.solver_family : sc_cfg.family;
        Problem problem = make_problem(sc, assumed, family, cfg.hyper_mode);

        StrapdownConfig dr_cfg{problem.gravity, problem.initial_state};
        const auto dr = dead_reckon(problem.imu, dr_cfg);
        const auto before = evaluate(dr, sc.truth);
        row.rmse_before = before.rmse;
        row.max_before = before.max_error;

        const Solution sol = solve(problem, cfg.solve_options);
        const auto after = evaluate(sol.states, sc.truth);
        row.rmse_after = after.rmse;
        row.max_after = after.max_error;
        row.iterations = sol.iterations;
        row.converged = sol.converged;
        row.sigma_f_est = sol.hypers.sigma_f;
        row.length_scale_est = sol.hypers.length_scale;
    } catch (const std::exception&) {
        row.converged = false;  // failed cells stay as a (NaN) row, never a crash
    }
    return row;
}

/// Full sweep: every value x seed cell, in parallel up to cfg.workers.
inline std::vector<StudyRow> run_study(const ExperimentConfig& cfg) {
    cfg.validate();
    struct Cell {
        double value;
        int seed_idx;
    };
    std::vector<Cell> cells;
    for (double v : cfg.values)
        for (int s = 0; s < cfg.seeds; ++s) cells.push_back({v, s});
    std::vector<StudyRow> rows(cells.size());

    const int workers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(cells.size())));
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            rows[i] = run_study_cell(cfg, cells[i].value, cells[i].seed_idx);
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return rows;
}

inline void write_study_results(const std::vector<StudyRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "study,param,seed,rmse_before,rmse_after,max_before,max_after,iterations,converged\n";
    for (const auto& r : rows) {
        out << r.study << ',' << fmt_double(r.param) << ',' << r.seed << ','
            << fmt_double(r.rmse_before) << ',' << fmt_double(r.rmse_after) << ','
            << fmt_double(r.max_before) << ',' << fmt_double(r.max_after) << ',' << r.iterations
            << ',' << (r.converged ? "true" : "false") << "\n";
    }
}

struct StudySummaryRow {
    double param = 0.0;
    double rmse_before = 0.0, rmse_after = 0.0;
    double max_before = 0.0, max_after = 0.0;
    int converged = 0;
    int n = 0;
};

/// Median aggregation over seeds per sweep value.
inline std::vector<StudySummaryRow> summarize_study(const std::vector<StudyRow>& rows) {
    std::vector<double> params;
    for (const auto& r : rows)
        if (std::find(params.begin(), params.end(), r.param) == params.end())
            params.push_back(r.param);
    std::vector<StudySummaryRow> out;
    for (double p : params) {
        StudySummaryRow s;
        s.param = p;
        std::vector<double> rb, ra, mb, ma;
        for (const auto& r : rows) {
            if (r.param != p) continue;
            ++s.n;
            if (r.converged) ++s.converged;
            rb.push_back(r.rmse_before);
            ra.push_back(r.rmse_after);
            mb.push_back(r.max_before);
            ma.push_back(r.max_after);
        }
        s.rmse_before = detail::median(rb);
        s.rmse_after = detail::median(ra);
        s.max_before = detail::median(mb);
        s.max_after = detail::median(ma);
        out.push_back(s);
    }
    return out;
}

inline void write_study_summary(const std::vector<StudyRow>& rows, const std::string& study,
                                const std::string& csv_path, const std::string& txt_path) {
    const auto summary = summarize_study(rows);
    {
        std::ofstream out(csv_path);
        if (!out) throw InputError("cannot write file: " + csv_path);
        out << "study,param,rmse_before,rmse_after,max_before,max_after,converged,n\n";
        for (const auto& s : summary)
            out << study << ',' << fmt_double(s.param) << ',' << fmt_double(s.rmse_before) << ','
                << fmt_double(s.rmse_after) << ',' << fmt_double(s.max_before) << ','
                << fmt_double(s.max_after) << ',' << s.converged << ',' << s.n << "\n";
    }
    {
        std::ofstream out(txt_path);
        if (!out) throw InputError("cannot write file: " + txt_path);
        char buf[160];
        out << "study: " << study << " (median over seeds)\n";
        std::snprintf(buf, sizeof(buf), "%-34s %10s %14s\n", "", "RMSE [m]", "Max Error [m]");
        out << buf;
        for (const auto& s : summary) {
            std::snprintf(buf, sizeof(buf), "%-34s %10.3f %14.3f\n",
                          ("Before SLAM, param = " + fmt_double(s.param)).c_str(), s.rmse_before,
                          s.max_before);
            out << buf;
        }
        for (const auto& s : summary) {
            std::snprintf(buf, sizeof(buf), "%-34s %10.3f %14.3f\n",
                          ("After SLAM, param = " + fmt_double(s.param)).c_str(), s.rmse_after,
                          s.max_after);
            out << buf;
        }
    }
}

// ---------------------------------------------------------------------------
// Log ingestion
// ---------------------------------------------------------------------------

struct IngestResult {
    Problem problem;
    int matched = 0;
    int dropped = 0;
};

/// Build a Problem from exported/recorded CSV logs plus an INI config carrying
/// the initial state and solver noise model. Mag records without an IMU epoch
/// within T/2 are dropped (counted); zero matches is an error.
inline IngestResult ingest_logs(const std::string& imu_csv, const std::string& mag_csv,
                                const Ini& ini) {
    IngestResult res;
    Problem& p = res.problem;
    p.imu = read_imu_csv(imu_csv);
    if (p.imu.empty()) throw InputError(imu_csv + ": no odometry records");
    auto mag_all = read_mag_csv(mag_csv);
    if (mag_all.empty()) throw InputError(mag_csv + ": no magnetic measurements");

    p.planar = ini.get_bool_or("initial_state", "planar", true);
    p.initial_state.t = ini.get_double_or("initial_state", "t", 0.0);
    p.initial_state.p = Vec3(ini.get_double_or("initial_state", "px", 0.0),
                             ini.get_double_or("initial_state", "py", 0.0),
                             ini.get_double_or("initial_state", "pz", 0.0));
    p.initial_state.v = Vec3(ini.get_double_or("initial_state", "vx", 0.0),
                             ini.get_double_or("initial_state", "vy", 0.0),
                             ini.get_double_or("initial_state", "vz", 0.0));
    p.initial_state.q = Quaternion{ini.get_double_or("initial_state", "qw", 1.0),
                                   ini.get_double_or("initial_state", "qx", 0.0),
                                   ini.get_double_or("initial_state", "qy", 0.0),
                                   ini.get_double_or("initial_state", "qz", 0.0)}
                            .normalized();
    if (p.planar) {
        p.gravity = Vec3::Zero();
    } else {
        p.gravity = Vec3(ini.get_double_or("solver", "gravity_x", 0.0),
                         ini.get_double_or("solver", "gravity_y", 0.0),
                         ini.get_double_or("solver", "gravity_z", -9.81));
    }

    const Hyperparams hypers{ini.get_double_or("scenario", "sigma_f", 0.1),
                             ini.get_double_or("scenario", "length_scale", 0.1)};
    const KernelFamily family = kernel_family_from_string(
        ini.get_or("solver", "kernel", ini.get_or("scenario", "kernel", "se-independent")));
    p.kernel = Kernel{family, hypers, p.planar ? 2 : 3};
    p.hyper_init = hypers;
    const std::string hm = ini.get_or("solver", "hyper_mode", "fixed");
    p.hyper_mode = hm == "estimated" ? HyperMode::Estimated : HyperMode::Fixed;

    p.odom_sigma = std::max(
        ini.get_double_or("solver", "odom_sigma", ini.get_double_or("scenario", "odom_sigma", 5e-4)),
        1e-9);
    p.odom3d.pos_sigma = ini.get_double_or("solver", "odom_pos_sigma", 1e-3);
    p.odom3d.vel_sigma = ini.get_double_or("solver", "odom_vel_sigma", 1e-3);
    p.odom3d.att_sigma = ini.get_double_or("solver", "odom_att_sigma", 1e-3);
    p.bias_noise.w_gyro_sigma = ini.get_double_or("solver", "bias_walk_gyro", 1e-6);
    p.bias_noise.w_accel_sigma = ini.get_double_or("solver", "bias_walk_accel", 1e-5);
    p.use_zero_pos_prior = ini.get_bool_or("solver", "zero_pos_prior", false);
    p.zero_pos_sigma = ini.get_double_or("solver", "zero_pos_sigma", 1.0);

    // alignment with drop statistics
    StrapdownConfig cfg{p.gravity, p.initial_state};
    const auto epochs = dead_reckon(p.imu, cfg);
    for (const auto& rec : mag_all) {
        double best_dt = std::numeric_limits<double>::infinity();
        int best = -1;
        for (size_t e = 0; e < epochs.size(); ++e) {
            const double dt = std::abs(epochs[e].t - rec.t);
            if (dt < best_dt) {
                best_dt = dt;
                best = static_cast<int>(e);
            }
        }
        const double T = p.imu[std::min<size_t>(p.imu.size() - 1, std::max(0, best - 1))].T;
        if (best_dt <= 0.5 * T) {
            p.mag.push_back(rec);
            ++res.matched;
        } else {
            ++res.dropped;
        }
    }
    if (p.mag.empty())
        throw InputError("ingest: no magnetic measurements align with IMU epochs (dropped " +
                         std::to_string(res.dropped) + ")");
    return res;
}

// ---------------------------------------------------------------------------
// Plot-ready exports
// ---------------------------------------------------------------------------

inline void write_trajectory_csv(const std::string& path, const std::vector<NavState>& states) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "t,px,py,pz,qw,qx,qy,qz\n";
    for (const auto& s : states)
        out << fmt_double(s.t) << ',' << fmt_double(s.p.x()) << ',' << fmt_double(s.p.y()) << ','
            << fmt_double(s.p.z()) << ',' << fmt_double(s.q.w) << ',' << fmt_double(s.q.x) << ','
            << fmt_double(s.q.y) << ',' << fmt_double(s.q.z) << "\n";
}

inline void write_cost_trace_csv(const std::string& path, const std::vector<double>& trace) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "iter,cost\n";
    for (size_t i = 0; i < trace.size(); ++i) out << i << ',' << fmt_double(trace[i]) << "\n";
}

inline void write_bias_report_csv(const std::string& path,
                                  const std::vector<BiasReportRow>& rows) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "sensor,axis,before,after,after_sigma\n";
    for (const auto& r : rows)
        out << r.sensor << ',' << r.axis << ',' << fmt_double(r.before) << ','
            << fmt_double(r.after) << ',' << fmt_double(r.after_sigma) << "\n";
}

/// Per-figure CSV series plus SVG overlays: odometry-only vs SLAM trajectory
/// (vs ground truth when available), cost trace, and the field-magnitude
/// time series.
inline void emit_plots(const Problem& problem, const Solution& sol,
                       const std::vector<NavState>* truth, const std::string& dir) {
    std::filesystem::create_directories(dir);
    StrapdownConfig cfg{problem.gravity, problem.initial_state};
    const auto dr = dead_reckon(problem.imu, cfg);
    write_trajectory_csv(dir + "/odometry.csv", dr);
    write_trajectory_csv(dir + "/slam.csv", sol.states);
    if (truth) write_trajectory_csv(dir + "/truth.csv", *truth);
    write_cost_trace_csv(dir + "/cost_trace.csv", sol.cost_trace);
    {
        std::ofstream out(dir + "/mag_magnitude.csv");
        out << "t,magnitude\n";
        for (const auto& m : problem.mag)
            out << fmt_double(m.t) << ',' << fmt_double(m.y.norm()) << "\n";
    }

    auto xy = [](const std::vector<NavState>& states) {
        std::vector<Vec2> pts;
        pts.reserve(states.size());
        for (const auto& s : states) pts.emplace_back(s.p.x(), s.p.y());
        return pts;
    };
    std::vector<PlotSeries> series;
    series.push_back({"odometry only", "#00bbbb", true, false, xy(dr)});
    series.push_back({"GP-SLAM", "#0000cc", false, false, xy(sol.states)});
    if (truth) series.push_back({"ground truth", "#cc0000", false, true, xy(*truth)});
    write_svg(dir + "/trajectory.svg", series);

    std::vector<Vec2> costs;
    for (size_t i = 0; i < sol.cost_trace.size(); ++i)
        costs.emplace_back(static_cast<double>(i),
                           std::log10(std::max(sol.cost_trace[i], 1e-300)));
    write_svg(dir + "/cost_trace.svg", {{"log10 cost per iteration", "#0000cc", false, false, costs}});
}

// ---------------------------------------------------------------------------
// Map export
// ---------------------------------------------------------------------------

/// Axis of a prediction grid: nx samples from lo to hi inclusive.
struct GridAxis {
    double lo = 0.0, hi = 1.0;
    int n = 2;
};

/// Parse "x0:x1:nx,y0:y1:ny[,z]" (z fixed for planar maps).
struct GridSpec {
    GridAxis x, y;
    double z = 0.0;
};

inline GridSpec parse_grid_spec(const std::string& spec) {
    auto parse_axis = [&](const std::string& s) {
        GridAxis ax;
        if (std::sscanf(s.c_str(), "%lf:%lf:%d", &ax.lo, &ax.hi, &ax.n) != 3 || ax.n < 2 ||
            !(ax.hi > ax.lo))
            throw InputError("grid: expected lo:hi:n with n >= 2, got '" + s + "'");
        return ax;
    };
    std::vector<std::string> parts;
    std::string cur;
    for (char c : spec) {
        if (c == ',') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    if (parts.size() < 2 || parts.size() > 3)
        throw InputError("grid: expected 'x0:x1:nx,y0:y1:ny[,z]'");
    GridSpec g;
    g.x = parse_axis(parts[0]);
    g.y = parse_axis(parts[1]);
    if (parts.size() == 3) {
        try {
            g.z = std::stod(parts[2]);
        } catch (const std::exception&) {
            throw InputError("grid: cannot parse z value '" + parts[2] + "'");
        }
    }
    return g;
}

/// Posterior field on a regular grid: x,y,z,mx,my,mz,var_x,var_y,var_z.
inline void export_map_grid(const MapEstimate& map, const GridSpec& grid,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "x,y,z,mx,my,mz,var_x,var_y,var_z\n";
    const int dim = map.kernel().input_dim;
    for (int iy = 0; iy < grid.y.n; ++iy) {
        for (int ix = 0; ix < grid.x.n; ++ix) {
            const double x = grid.x.lo + (grid.x.hi - grid.x.lo) * ix / (grid.x.n - 1);
            const double y = grid.y.lo + (grid.y.hi - grid.y.lo) * iy / (grid.y.n - 1);
            VecX q(dim);
            q(0) = x;
            q(1) = y;
            if (dim == 3) q(2) = grid.z;
            VecX mean;
            MatX cov;
            map.predict(q, mean, cov);
            double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};
            for (int a = 0; a < mean.size() && a < 3; ++a) {
                m[a] = mean(a);
                v[a] = cov(a, a);
            }
            out << fmt_double(x) << ',' << fmt_double(y) << ',' << fmt_double(grid.z) << ','
                << fmt_double(m[0]) << ',' << fmt_double(m[1]) << ',' << fmt_double(m[2]) << ','
                << fmt_double(v[0]) << ',' << fmt_double(v[1]) << ',' << fmt_double(v[2]) << "\n";
        }
    }
}

/// Training data + kernel of a solved map, reloadable by predict-map.
inline void write_map_training(const MapEstimate& map, const std::string& csv_path,
                               Ini& solution_ini) {
    std::ofstream out(csv_path);
    if (!out) throw InputError("cannot write file: " + csv_path);
    out << "x,y,z,m0,m1,m2\n";
    for (size_t i = 0; i < map.locations().size(); ++i) {
        const VecX& loc = map.locations()[i];
        double c[3] = {0, 0, 0}, m[3] = {0, 0, 0};
        for (int a = 0; a < loc.size() && a < 3; ++a) c[a] = loc(a);
        for (int a = 0; a < map.values().cols() && a < 3; ++a) m[a] = map.values()(i, a);
        out << fmt_double(c[0]) << ',' << fmt_double(c[1]) << ',' << fmt_double(c[2]) << ','
            << fmt_double(m[0]) << ',' << fmt_double(m[1]) << ',' << fmt_double(m[2]) << "\n";
    }
    solution_ini.set("map", "kernel", to_string(map.kernel().family));
    solution_ini.set("map", "input_dim", std::to_string(map.kernel().input_dim));
    solution_ini.set_double("map", "sigma_f", map.kernel().hyper.sigma_f);
    solution_ini.set_double("map", "length_scale", map.kernel().hyper.length_scale);
    solution_ini.set("map", "field_axes", std::to_string(map.values().cols()));
}

inline MapEstimate read_map_training(const std::string& csv_path, const Ini& solution_ini) {
    Kernel k;
    k.family = kernel_family_from_string(solution_ini.get("map", "kernel"));
    k.input_dim = static_cast<int>(solution_ini.get_int_or("map", "input_dim", 2));
    k.hyper.sigma_f = solution_ini.get_double("map", "sigma_f");
    k.hyper.length_scale = solution_ini.get_double("map", "length_scale");
    const int axes = static_cast<int>(solution_ini.get_int_or("map", "field_axes", 3));
    const auto rows = csv::read_table(csv_path, "x,y,z,m0,m1,m2");
    if (rows.empty()) throw InputError(csv_path + ": no training points");
    std::vector<VecX> locs;
    MatX values(rows.size(), axes);
    for (size_t i = 0; i < rows.size(); ++i) {
        VecX loc(k.input_dim);
        for (int a = 0; a < k.input_dim; ++a) loc(a) = rows[i][a];
        locs.push_back(loc);
        for (int a = 0; a < axes; ++a) values(i, a) = rows[i][3 + a];
    }
    return MapEstimate(std::move(locs), std::move(values), k);
}

}  // namespace magslam
