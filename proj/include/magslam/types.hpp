#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace magslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using VecX = Eigen::VectorXd;
using Mat3 = Eigen::Matrix3d;
using MatX = Eigen::MatrixXd;

/// Thrown for malformed user input (files, configs, inconsistent data).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when the numerical machinery cannot proceed (non-PSD kernel, divergence).
struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Quaternion
//
// Hamilton convention, scalar-first storage (w, x, y, z). A state quaternion
// q maps sensor-frame vectors into the local frame: v_local = R(q) * v_sensor.
// ---------------------------------------------------------------------------

struct Quaternion {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static Quaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quaternion normalized() const {
        const double n = norm();
        if (n <= 0.0 || !std::isfinite(n)) {
            throw SolverError("Quaternion::normalized: zero or non-finite norm");
        }
        return {w / n, x / n, y / n, z / n};
    }

    Quaternion conjugate() const { return {w, -x, -y, -z}; }

    Vec3 vec() const { return {x, y, z}; }

    bool is_finite() const {
        return std::isfinite(w) && std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
};

/// Hamilton product a*b, renormalized.
inline Quaternion quat_compose(const Quaternion& a, const Quaternion& b) {
    Quaternion q;
    q.w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
    q.x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
    q.y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
    q.z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
    return q.normalized();
}

inline Quaternion quat_conjugate(const Quaternion& q) { return q.conjugate(); }

/// Rotation matrix of a unit quaternion.
inline Mat3 quat_to_rotmat(const Quaternion& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

/// Exponential map: rotation vector (axis * angle, rad) to unit quaternion.
inline Quaternion quat_from_rotvec(const Vec3& v) {
    const double angle = v.norm();
    Quaternion q;
    if (angle < 1e-12) {
        // sin(a/2)/a -> 1/2 as a -> 0
        q = {1.0, 0.5 * v.x(), 0.5 * v.y(), 0.5 * v.z()};
    } else {
        const double h = 0.5 * angle;
        const double s = std::sin(h) / angle;
        q = {std::cos(h), s * v.x(), s * v.y(), s * v.z()};
    }
    return q.normalized();
}

/// Logarithm map: unit quaternion to rotation vector in (-pi, pi].
inline Vec3 quat_log(const Quaternion& q_in) {
    Quaternion q = q_in;
    if (q.w < 0.0) {  // pick the short arc
        q = {-q.w, -q.x, -q.y, -q.z};
    }
    const double vn = q.vec().norm();
    if (vn < 1e-12) {
        return 2.0 * q.vec();
    }
    const double angle = 2.0 * std::atan2(vn, q.w);
    return (angle / vn) * q.vec();
}

inline Vec3 rotate(const Quaternion& q, const Vec3& v) { return quat_to_rotmat(q) * v; }

inline Mat3 skew(const Vec3& v) {
    Mat3 S;
    S << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return S;
}

// SO(3) left/right Jacobians of the exponential map and their inverses.
// Used by the solver to differentiate orientation residuals exactly.
inline Mat3 so3_left_jacobian(const Vec3& phi) {
    const double a = phi.norm();
    const Mat3 S = skew(phi);
    if (a < 1e-8) {
        return Mat3::Identity() + 0.5 * S + (1.0 / 6.0) * S * S;
    }
    const double a2 = a * a;
    return Mat3::Identity() + ((1 - std::cos(a)) / a2) * S + ((a - std::sin(a)) / (a2 * a)) * S * S;
}

inline Mat3 so3_left_jacobian_inv(const Vec3& phi) {
    const double a = phi.norm();
    const Mat3 S = skew(phi);
    if (a < 1e-8) {
        return Mat3::Identity() - 0.5 * S + (1.0 / 12.0) * S * S;
    }
    const double half = 0.5 * a;
    const double cot = half / std::tan(half);
    return Mat3::Identity() - 0.5 * S + ((1.0 - cot) / (a * a)) * S * S;
}

inline Mat3 so3_right_jacobian_inv(const Vec3& phi) { return so3_left_jacobian_inv(-phi); }

// ---------------------------------------------------------------------------
// Navigation state and measurement records
// ---------------------------------------------------------------------------

/// Per-epoch navigation state: position/velocity in the local frame,
/// sensor-to-local orientation, and per-epoch sensor biases.
struct NavState {
    double t = 0.0;           // s
    Vec3 p = Vec3::Zero();    // m, local frame
    Vec3 v = Vec3::Zero();    // m/s, local frame
    Quaternion q;             // sensor-to-local
    Vec3 b_gyro = Vec3::Zero();   // rad/s
    Vec3 b_accel = Vec3::Zero();  // m/s^2
};

/// Odometry increment over one integration period T ending at time t.
struct ImuRecord {
    double t = 0.0;   // s, end of the interval
    Quaternion dq;    // rotation increment, sensor frame
    Vec3 dv = Vec3::Zero();  // velocity increment, m/s, sensor frame
    double T = 0.0;   // s, integration period

    void validate() const {
        if (!(T > 0.0)) throw InputError("ImuRecord: T must be > 0 (t=" + std::to_string(t) + ")");
        if (!dq.is_finite()) throw InputError("ImuRecord: non-finite dq (t=" + std::to_string(t) + ")");
        if (!dv.allFinite()) throw InputError("ImuRecord: non-finite dv (t=" + std::to_string(t) + ")");
    }
};

/// Tri-axial magnetic field measurement in the sensor frame, arbitrary units.
struct MagRecord {
    double t = 0.0;
    Vec3 y = Vec3::Zero();      // a.u.
    Vec3 sigma = Vec3::Ones();  // per-axis std dev, a.u.

    void validate() const {
        if (!(sigma.minCoeff() > 0.0))
            throw InputError("MagRecord: sigma components must be > 0 (t=" + std::to_string(t) + ")");
        if (!y.allFinite()) throw InputError("MagRecord: non-finite field value (t=" + std::to_string(t) + ")");
    }
};

/// Bias random-walk driving noise and gravity.
struct NoiseParams {
    double w_gyro_sigma = 0.0;   // rad/s per step
    double w_accel_sigma = 0.0;  // m/s^2 per step
    Vec3 gravity = Vec3(0.0, 0.0, -9.81);  // m/s^2, local frame
};

}  // namespace magslam
