// Command-line front end: scenario simulation, SLAM solving, study sweeps,
// map prediction and trajectory evaluation.

#include "magslam/magslam.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

namespace {

using namespace magslam;

std::vector<NavState> read_positions_any(const std::string& path) {
    // accept either the truth layout or the full trajectory layout
    try {
        return read_truth_csv(path);
    } catch (const InputError&) {
    }
    std::vector<NavState> out;
    for (const auto& r : csv::read_table(path, "t,px,py,pz,qw,qx,qy,qz")) {
        NavState s;
        s.t = r[0];
        s.p = Vec3(r[1], r[2], r[3]);
        s.q = Quaternion{r[4], r[5], r[6], r[7]}.normalized();
        out.push_back(s);
    }
    return out;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
    const Ini ini = Ini::load(config_path);
    const ScenarioConfig cfg = scenario_from_ini(ini);
    const Scenario sc = build_scenario(cfg);
    write_scenario(sc, out_dir);
    std::cout << "scenario: " << sc.positions.size() << " epochs, "
              << sc.imu.size() << " odometry records -> " << out_dir << "\n";
    return 0;
}

int cmd_slam(const std::string& imu_path, const std::string& mag_path,
             const std::string& truth_path, const std::string& config_path,
             const std::string& out_dir) {
    const Ini ini = Ini::load(config_path);
    IngestResult ingest = ingest_logs(imu_path, mag_path, ini);
    std::cout << "aligned " << ingest.matched << " magnetic records, dropped " << ingest.dropped
              << "\n";
    const SolveOptions opt = solve_options_from_ini(ini);
    const Solution sol = solve(ingest.problem, opt);
    std::cout << sol.status << " after " << sol.iterations << " iterations, final cost "
              << fmt_double(sol.final_cost) << "\n";

    std::filesystem::create_directories(out_dir);
    write_trajectory_csv(out_dir + "/trajectory.csv", sol.states);
    write_cost_trace_csv(out_dir + "/cost_trace.csv", sol.cost_trace);
    if (!ingest.problem.planar)
        write_bias_report_csv(out_dir + "/bias_report.csv",
                              recover_biases(ingest.problem, sol));
    Ini sol_ini;
    sol_ini.set("solution", "status", sol.status);
    sol_ini.set("solution", "iterations", std::to_string(sol.iterations));
    sol_ini.set_double("solution", "final_cost", sol.final_cost);
    sol_ini.set_double("solution", "sigma_f", sol.hypers.sigma_f);
    sol_ini.set_double("solution", "length_scale", sol.hypers.length_scale);
    write_map_training(sol.map, out_dir + "/map_training.csv", sol_ini);

    std::vector<NavState> truth;
    if (!truth_path.empty()) {
        truth = read_positions_any(truth_path);
        const auto after = evaluate(sol.states, truth);
        StrapdownConfig cfg{ingest.problem.gravity, ingest.problem.initial_state};
        const auto before = evaluate(dead_reckon(ingest.problem.imu, cfg), truth);
        std::printf("before SLAM: rmse %.4f m, max %.4f m\n", before.rmse, before.max_error);
        std::printf("after SLAM:  rmse %.4f m, max %.4f m\n", after.rmse, after.max_error);
        sol_ini.set_double("metrics", "rmse_before", before.rmse);
        sol_ini.set_double("metrics", "rmse_after", after.rmse);
        sol_ini.set_double("metrics", "max_before", before.max_error);
        sol_ini.set_double("metrics", "max_after", after.max_error);
    }
    sol_ini.save(out_dir + "/solution.ini");
    emit_plots(ingest.problem, sol, truth.empty() ? nullptr : &truth, out_dir);

    if (sol.status.rfind("diverged", 0) == 0) return 2;
    return 0;
}

int cmd_study(const std::string& config_path, const std::string& out_dir) {
    const Ini ini = Ini::load(config_path);
    const ExperimentConfig cfg = experiment_from_ini(ini);
    const auto rows = run_study(cfg);
    std::filesystem::create_directories(out_dir);
    write_study_results(rows, out_dir + "/results.csv");
    write_study_summary(rows, cfg.study, out_dir + "/summary.csv", out_dir + "/summary.txt");
    int failures = 0;
    for (const auto& r : rows)
        if (!r.converged) ++failures;
    std::cout << "study " << cfg.study << ": " << rows.size() << " cells, " << failures
              << " unconverged -> " << out_dir << "\n";
    return 0;
}

int cmd_predict_map(const std::string& solution_dir, const std::string& grid_spec,
                    const std::string& out_path) {
    const Ini sol_ini = Ini::load(solution_dir + "/solution.ini");
    const MapEstimate map = read_map_training(solution_dir + "/map_training.csv", sol_ini);
    export_map_grid(map, parse_grid_spec(grid_spec), out_path);
    std::cout << "map grid -> " << out_path << "\n";
    return 0;
}

int cmd_eval(const std::string& est_path, const std::string& truth_path) {
    const auto est = read_positions_any(est_path);
    const auto truth = read_positions_any(truth_path);
    const auto m = evaluate(est, truth);
    std::printf("rmse %.6f m, max %.6f m\n", m.rmse, m.max_error);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GP-SLAM toolkit: magnetic-field SLAM with MEMS-IMU dead reckoning"};
    app.require_subcommand(1);

    std::string config_path, out_dir, imu_path, mag_path, truth_path;
    std::string solution_dir, grid_spec, out_path, est_path;

    auto* sim = app.add_subcommand("simulate", "Generate a scenario from a config file");
    sim->add_option("--config", config_path, "scenario config (INI)")->required();
    sim->add_option("--out", out_dir, "output directory")->required();

    auto* slam = app.add_subcommand("slam", "Run GP-SLAM on IMU + magnetometer logs");
    slam->add_option("--imu", imu_path, "IMU CSV")->required();
    slam->add_option("--mag", mag_path, "magnetometer CSV")->required();
    slam->add_option("--truth", truth_path, "optional ground-truth CSV");
    slam->add_option("--config", config_path, "solver config (INI)")->required();
    slam->add_option("--out", out_dir, "output directory")->required();

    auto* study = app.add_subcommand("study", "Run a simulation study sweep");
    study->add_option("--config", config_path, "study config (INI)")->required();
    study->add_option("--out", out_dir, "output directory")->required();

    auto* pm = app.add_subcommand("predict-map", "Predict the field on a grid");
    pm->add_option("--solution", solution_dir, "directory written by `slam`")->required();
    pm->add_option("--grid", grid_spec, "grid spec 'x0:x1:nx,y0:y1:ny[,z]'")->required();
    pm->add_option("--out", out_path, "output CSV")->required();

    auto* ev = app.add_subcommand("eval", "RMSE / max error between trajectories");
    ev->add_option("--est", est_path, "estimated trajectory CSV")->required();
    ev->add_option("--truth", truth_path, "ground-truth CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (sim->parsed()) return cmd_simulate(config_path, out_dir);
        if (slam->parsed()) return cmd_slam(imu_path, mag_path, truth_path, config_path, out_dir);
        if (study->parsed()) return cmd_study(config_path, out_dir);
        if (pm->parsed()) return cmd_predict_map(solution_dir, grid_spec, out_path);
        if (ev->parsed()) return cmd_eval(est_path, truth_path);
    } catch (const magslam::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const magslam::SolverError& e) {
        std::cerr << "solver error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
