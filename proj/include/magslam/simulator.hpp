#pragma once

#include "magslam/config.hpp"
#include "magslam/csv.hpp"
#include "magslam/kernels.hpp"
#include "magslam/rng.hpp"
#include "magslam/strapdown.hpp"
#include "magslam/types.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace magslam {

// ---------------------------------------------------------------------------
// Trajectory generation
// ---------------------------------------------------------------------------

enum class TrajectoryShape { Rectangle, Square, Spiral, Waypoints };

inline std::string to_string(TrajectoryShape s) {
    switch (s) {
        case TrajectoryShape::Rectangle: return "rectangle";
        case TrajectoryShape::Square: return "square";
        case TrajectoryShape::Spiral: return "spiral";
        case TrajectoryShape::Waypoints: return "waypoints";
    }
    return "?";
}

inline TrajectoryShape trajectory_shape_from_string(const std::string& s) {
    if (s == "rectangle") return TrajectoryShape::Rectangle;
    if (s == "square") return TrajectoryShape::Square;
    if (s == "spiral") return TrajectoryShape::Spiral;
    if (s == "waypoints") return TrajectoryShape::Waypoints;
    throw InputError("unknown trajectory shape '" + s + "'");
}

struct TrajectorySpec {
    TrajectoryShape shape = TrajectoryShape::Rectangle;
    double spacing = 0.25;  // m between consecutive samples
    int loops = 1;          // closed-shape repetitions; spiral: number of turns
    double width = 0.75;    // m (rectangle); square uses width as side
    double height = 0.25;   // m (rectangle)
    bool alternate = false; // reverse traversal direction on every other loop
    double spiral_gap = 0.0;  // ring-to-ring gap; 0 = spacing
    std::vector<Vec2> waypoints;
};

namespace detail {

inline int steps_on_side(double len, double spacing, const char* what) {
    const double n = len / spacing;
    const int ni = static_cast<int>(std::lround(n));
    if (ni < 1 || std::abs(n - ni) > 1e-9 * std::max(1.0, n))
        throw InputError(std::string("make_trajectory: ") + what +
                         " must be a positive multiple of spacing");
    return ni;
}

inline std::vector<Vec2> rectangle_loop(double w, double h, double spacing) {
    const int nx = steps_on_side(w, spacing, "width");
    const int ny = steps_on_side(h, spacing, "height");
    std::vector<Vec2> pts;
    for (int i = 0; i < nx; ++i) pts.emplace_back(i * spacing, 0.0);
    for (int i = 0; i < ny; ++i) pts.emplace_back(w, i * spacing);
    for (int i = 0; i < nx; ++i) pts.emplace_back(w - i * spacing, h);
    for (int i = 0; i < ny; ++i) pts.emplace_back(0.0, h - i * spacing);
    return pts;  // open: the closing point is the start of the next lap
}

inline std::vector<Vec2> spiral_points(double spacing, double gap, int turns) {
    if (turns < 1) throw InputError("make_trajectory: spiral needs at least one turn");
    // Archimedean spiral r = gap * phi / (2 pi), stepped at constant chord length.
    const double b = gap / (2.0 * M_PI);
    auto point = [&](double phi) { return Vec2(b * phi * std::cos(phi), b * phi * std::sin(phi)); };
    std::vector<Vec2> pts;
    double phi = 2.0 * M_PI;  // start on the first full ring, away from r = 0
    const double phi_end = phi + 2.0 * M_PI * turns;
    pts.push_back(point(phi));
    while (phi < phi_end) {
        double lo = phi, hi = phi + 2.0 * M_PI;
        const Vec2 p0 = point(phi);
        while ((point(hi) - p0).norm() < spacing) hi += M_PI;
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + hi);
            if ((point(mid) - p0).norm() < spacing)
                lo = mid;
            else
                hi = mid;
        }
        phi = hi;
        pts.push_back(point(phi));
    }
    return pts;
}

inline std::vector<Vec2> waypoint_points(const std::vector<Vec2>& wps, double spacing) {
    if (wps.size() < 2) throw InputError("make_trajectory: need at least two waypoints");
    std::vector<Vec2> pts;
    pts.push_back(wps.front());
    for (size_t i = 0; i + 1 < wps.size(); ++i) {
        const Vec2 a = wps[i], b = wps[i + 1];
        const double len = (b - a).norm();
        const int n = steps_on_side(len, spacing, "waypoint segment length");
        for (int k = 1; k <= n; ++k) pts.push_back(a + (b - a) * (static_cast<double>(k) / n));
    }
    return pts;
}

}  // namespace detail

/// Planar sample-location sequence. Closed shapes (rectangle/square, closed
/// waypoint lists) repeat for `loops` laps, each lap revisiting bit-identical
/// positions; `alternate` reverses the traversal direction on every other lap,
/// which interleaves short revisit lags along the whole path. Spiral uses
/// `loops` as the number of turns.
inline std::vector<Vec2> make_trajectory(const TrajectorySpec& spec) {
    if (!(spec.spacing > 0.0)) throw InputError("make_trajectory: spacing must be > 0");
    if (spec.loops < 1) throw InputError("make_trajectory: loops must be >= 1");

    if (spec.shape == TrajectoryShape::Spiral) {
        const double gap = spec.spiral_gap > 0.0 ? spec.spiral_gap : spec.spacing;
        return detail::spiral_points(spec.spacing, gap, spec.loops);
    }

    std::vector<Vec2> loop;
    if (spec.shape == TrajectoryShape::Rectangle) {
        loop = detail::rectangle_loop(spec.width, spec.height, spec.spacing);
    } else if (spec.shape == TrajectoryShape::Square) {
        loop = detail::rectangle_loop(spec.width, spec.width, spec.spacing);
    } else {
        auto pts = detail::waypoint_points(spec.waypoints, spec.spacing);
        const bool closed = (pts.front() - pts.back()).norm() < 1e-12;
        if (!closed) {
            if (spec.loops != 1)
                throw InputError("make_trajectory: open waypoint paths cannot loop");
            return pts;
        }
        pts.pop_back();
        loop = std::move(pts);
    }

    const int P = static_cast<int>(loop.size());
    std::vector<Vec2> out;
    out.reserve(static_cast<size_t>(spec.loops) * P + 1);
    for (int l = 0; l < spec.loops; ++l) {
        const bool reversed = spec.alternate && (l % 2 == 1);
        for (int k = 0; k < P; ++k) out.push_back(reversed ? loop[(P - k) % P] : loop[k]);
    }
    out.push_back(loop[0]);
    return out;
}

// ---------------------------------------------------------------------------
// Field sampling and odometry corruption
// ---------------------------------------------------------------------------

/// Exact joint GP draw at the given locations: chol(K + jitter) * z.
/// Returns N x field_dim (3 axes for SE-independent, input_dim otherwise).
inline MatX sample_field(const std::vector<VecX>& locations, const Kernel& kernel,
                         std::uint64_t seed, int se_axes = 3) {
    kernel.validate();
    const int N = static_cast<int>(locations.size());
    const int fd = kernel.family == KernelFamily::SeIndependent ? se_axes : kernel.input_dim;
    if (kernel.hyper.sigma_f == 0.0) return MatX::Zero(N, fd);

    Rng rng(seed);
    const GramFactor f = gram(locations, kernel);
    MatX out(N, fd);
    if (kernel.family == KernelFamily::SeIndependent) {
        for (int a = 0; a < fd; ++a) {
            VecX z(N);
            for (int i = 0; i < N; ++i) z(i) = rng.gauss();
            out.col(a) = f.chol.triangularView<Eigen::Lower>() * z;
        }
    } else {
        VecX z(N * fd);
        for (int i = 0; i < N * fd; ++i) z(i) = rng.gauss();
        const VecX stacked = f.chol.triangularView<Eigen::Lower>() * z;
        for (int i = 0; i < N; ++i)
            for (int a = 0; a < fd; ++a) out(i, a) = stacked(i * fd + a);
    }
    return out;
}

/// Add a constant bias and white noise to each true planar displacement.
inline std::vector<Vec2> corrupt_odometry(const std::vector<Vec2>& truth_steps, double sigma,
                                          const Vec2& bias, std::uint64_t seed) {
    if (sigma < 0.0) throw InputError("corrupt_odometry: sigma must be >= 0");
    Rng rng(seed);
    std::vector<Vec2> out;
    out.reserve(truth_steps.size());
    for (const auto& d : truth_steps)
        out.push_back(d + bias + sigma * Vec2(rng.gauss(), rng.gauss()));
    return out;
}

// ---------------------------------------------------------------------------
// Scenario assembly
// ---------------------------------------------------------------------------

struct ScenarioConfig {
    TrajectorySpec traj;
    Hyperparams hypers;  // true field hyperparameters
    KernelFamily family = KernelFamily::SeIndependent;
    double mag_noise_sigma = 1e-3;  // a.u., generation noise
    double odom_sigma = 5e-4;       // m per step, per axis
    Vec2 odom_bias = Vec2(5e-3, 5e-3);  // m per step
    double dt = 1.0;                // s per step
    std::uint64_t seed = 1;
};

/// A fully assembled simulation: ground truth, field draw, corrupted
/// measurements, and everything needed to regenerate it bit-exactly.
struct Scenario {
    ScenarioConfig config;
    std::vector<NavState> truth;           // ground-truth trajectory (planar, z = 0)
    std::vector<Vec2> positions;           // truth positions per epoch
    MatX field;                            // true field at each epoch (N+1 x fd)
    std::vector<Vec2> true_steps;          // truth displacements
    std::vector<Vec2> measured_steps;      // corrupted displacements
    std::vector<ImuRecord> imu;            // corrupted odometry, record encoding
    std::vector<MagRecord> mag;
    NavState dr_initial_state;             // initial state for dead reckoning
};

namespace detail {

/// Encode planar displacements as velocity-increment records that reproduce
/// them exactly under the strapdown recursion (zero gravity, identity dq):
///   v_{k+1} = v_k + dv_k,  p_{k+1} = p_k + T v_k + (T/2) dv_k
inline std::vector<ImuRecord> encode_displacements(const std::vector<Vec2>& steps, double dt,
                                                   Vec3& v0_out) {
    std::vector<ImuRecord> recs;
    recs.reserve(steps.size());
    Vec2 v = steps.empty() ? Vec2::Zero() : Vec2(steps[0] / dt);
    v0_out = Vec3(v.x(), v.y(), 0.0);
    for (size_t k = 0; k < steps.size(); ++k) {
        const Vec2 dv = 2.0 * (steps[k] / dt - v);
        ImuRecord rec;
        rec.t = (k + 1) * dt;
        rec.dq = Quaternion::identity();
        rec.dv = Vec3(dv.x(), dv.y(), 0.0);
        rec.T = dt;
        recs.push_back(rec);
        v += dv;
    }
    return recs;
}

}  // namespace detail

inline Scenario build_scenario(const ScenarioConfig& cfg) {
    cfg.hypers.validate();
    Scenario sc;
    sc.config = cfg;
    sc.positions = make_trajectory(cfg.traj);
    const int n_epochs = static_cast<int>(sc.positions.size());

    // deduplicate revisited positions so the field draw is identical there
    std::map<std::pair<double, double>, int> unique_index;
    std::vector<VecX> unique_locs;
    std::vector<int> epoch_to_unique(n_epochs);
    for (int k = 0; k < n_epochs; ++k) {
        const auto key = std::make_pair(sc.positions[k].x(), sc.positions[k].y());
        auto it = unique_index.find(key);
        if (it == unique_index.end()) {
            it = unique_index.emplace(key, static_cast<int>(unique_locs.size())).first;
            unique_locs.push_back(VecX(sc.positions[k]));
        }
        epoch_to_unique[k] = it->second;
    }

    Kernel kernel{cfg.family, cfg.hypers, 2};
    const MatX unique_field = sample_field(unique_locs, kernel, Rng::derive(cfg.seed, 1));
    const int fd = static_cast<int>(unique_field.cols());
    sc.field.resize(n_epochs, fd);
    for (int k = 0; k < n_epochs; ++k) sc.field.row(k) = unique_field.row(epoch_to_unique[k]);

    // truth displacements and corrupted odometry
    sc.true_steps.resize(n_epochs - 1);
    for (int k = 0; k + 1 < n_epochs; ++k) sc.true_steps[k] = sc.positions[k + 1] - sc.positions[k];
    sc.measured_steps =
        corrupt_odometry(sc.true_steps, cfg.odom_sigma, cfg.odom_bias, Rng::derive(cfg.seed, 2));

    Vec3 v0;
    sc.imu = detail::encode_displacements(sc.measured_steps, cfg.dt, v0);
    sc.dr_initial_state.t = 0.0;
    sc.dr_initial_state.p = Vec3(sc.positions[0].x(), sc.positions[0].y(), 0.0);
    sc.dr_initial_state.v = v0;

    // magnetometer records (sigma floor keeps the record invariant valid when
    // the generation noise is zero)
    Rng mag_rng(Rng::derive(cfg.seed, 3));
    const double rec_sigma = std::max(cfg.mag_noise_sigma, 1e-9);
    sc.mag.reserve(n_epochs);
    for (int k = 0; k < n_epochs; ++k) {
        MagRecord rec;
        rec.t = k * cfg.dt;
        rec.y = Vec3::Zero();
        for (int a = 0; a < fd; ++a) rec.y(a) = sc.field(k, a) + cfg.mag_noise_sigma * mag_rng.gauss();
        rec.sigma = Vec3::Constant(rec_sigma);
        sc.mag.push_back(rec);
    }

    // ground-truth states (true velocity profile, identity orientation)
    sc.truth.reserve(n_epochs);
    for (int k = 0; k < n_epochs; ++k) {
        NavState s;
        s.t = k * cfg.dt;
        s.p = Vec3(sc.positions[k].x(), sc.positions[k].y(), 0.0);
        if (k + 1 < n_epochs)
            s.v = Vec3(sc.true_steps[k].x() / cfg.dt, sc.true_steps[k].y() / cfg.dt, 0.0);
        sc.truth.push_back(s);
    }
    return sc;
}

// ---------------------------------------------------------------------------
// Scenario I/O
// ---------------------------------------------------------------------------

inline void write_truth_csv(const std::string& path, const std::vector<NavState>& truth) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << "t,px,py,pz\n";
    for (const auto& s : truth)
        out << fmt_double(s.t) << ',' << fmt_double(s.p.x()) << ',' << fmt_double(s.p.y()) << ','
            << fmt_double(s.p.z()) << "\n";
}

inline std::vector<NavState> read_truth_csv(const std::string& path) {
    std::vector<NavState> out;
    for (const auto& r : csv::read_table(path, "t,px,py,pz")) {
        NavState s;
        s.t = r[0];
        s.p = Vec3(r[1], r[2], r[3]);
        out.push_back(s);
    }
    return out;
}

inline Ini scenario_manifest(const Scenario& sc) {
    const auto& cfg = sc.config;
    Ini ini;
    ini.set("scenario", "shape", to_string(cfg.traj.shape));
    ini.set_double("scenario", "spacing", cfg.traj.spacing);
    ini.set("scenario", "loops", std::to_string(cfg.traj.loops));
    ini.set_double("scenario", "width", cfg.traj.width);
    ini.set_double("scenario", "height", cfg.traj.height);
    ini.set("scenario", "alternate", cfg.traj.alternate ? "true" : "false");
    ini.set_double("scenario", "dt", cfg.dt);
    ini.set_double("scenario", "odom_sigma", cfg.odom_sigma);
    ini.set("scenario", "odom_bias",
            fmt_double(cfg.odom_bias.x()) + "," + fmt_double(cfg.odom_bias.y()));
    ini.set_double("scenario", "mag_noise", cfg.mag_noise_sigma);
    ini.set("scenario", "kernel", to_string(cfg.family));
    ini.set_double("scenario", "sigma_f", cfg.hypers.sigma_f);
    ini.set_double("scenario", "length_scale", cfg.hypers.length_scale);
    ini.set("scenario", "seed", std::to_string(cfg.seed));
    ini.set("initial_state", "planar", "true");
    ini.set_double("initial_state", "px", sc.dr_initial_state.p.x());
    ini.set_double("initial_state", "py", sc.dr_initial_state.p.y());
    ini.set_double("initial_state", "pz", sc.dr_initial_state.p.z());
    ini.set_double("initial_state", "vx", sc.dr_initial_state.v.x());
    ini.set_double("initial_state", "vy", sc.dr_initial_state.v.y());
    ini.set_double("initial_state", "vz", sc.dr_initial_state.v.z());
    return ini;
}

/// Writes imu.csv, mag.csv, truth.csv and manifest.ini into `dir`.
inline void write_scenario(const Scenario& sc, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_imu_csv(dir + "/imu.csv", sc.imu);
    write_mag_csv(dir + "/mag.csv", sc.mag);
    write_truth_csv(dir + "/truth.csv", sc.truth);
    scenario_manifest(sc).save(dir + "/manifest.ini");
}

}  // namespace magslam
