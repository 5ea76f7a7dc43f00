#pragma once

#include "magslam/types.hpp"

#include <string>
#include <vector>

namespace magslam {

struct StrapdownConfig {
    Vec3 gravity = Vec3(0.0, 0.0, -9.81);  // m/s^2, local frame
    NavState initial_state;

    void validate() const {
        const double g = gravity.norm();
        if (!(g >= 0.0 && g <= 20.0))
            throw InputError("StrapdownConfig: |gravity| must be in [0, 20] m/s^2");
    }
};

/// Gyro-bias correction applied to a measured rotation increment:
/// dq_corrected = dq * exp(-b_gyro * T).
inline Quaternion correct_dq(const Quaternion& dq, const Vec3& b_gyro, double T) {
    return quat_compose(dq, quat_from_rotvec(-b_gyro * T));
}

/// One strapdown step. The accel bias is removed from dv before rotation and
/// the gyro bias from dq before composition, both using the biases carried in
/// `state`:
///   q+ = q (dq exp(-b_g T))
///   v+ = v + R(q)(dv - b_a T) + T g
///   p+ = p + T v + R(q)(T/2)(dv - b_a T) + (T^2/2) g
inline NavState propagate(const NavState& state, const ImuRecord& rec, const StrapdownConfig& cfg) {
    rec.validate();
    if (!state.p.allFinite()) throw InputError("propagate: non-finite state.p");
    if (!state.v.allFinite()) throw InputError("propagate: non-finite state.v");
    if (!state.q.is_finite()) throw InputError("propagate: non-finite state.q");
    if (!state.b_gyro.allFinite()) throw InputError("propagate: non-finite state.b_gyro");
    if (!state.b_accel.allFinite()) throw InputError("propagate: non-finite state.b_accel");

    const double T = rec.T;
    const Mat3 R = quat_to_rotmat(state.q);
    const Vec3 dv_c = rec.dv - state.b_accel * T;

    NavState next = state;
    next.t = rec.t;
    next.q = quat_compose(state.q, correct_dq(rec.dq, state.b_gyro, T));
    next.v = state.v + R * dv_c + T * cfg.gravity;
    next.p = state.p + T * state.v + R * (0.5 * T * dv_c) + 0.5 * T * T * cfg.gravity;
    return next;
}

/// Bias random-walk step: bias + w_sigma * draw. With w_sigma = 0 the bias is
/// returned unchanged.
inline Vec3 propagate_bias(const Vec3& bias, double w_sigma, const Vec3& rng_draw) {
    if (w_sigma < 0.0) throw InputError("propagate_bias: w_sigma must be >= 0");
    return bias + w_sigma * rng_draw;
}

/// Fold of propagate over a time-sorted record sequence; output includes the
/// initial state, so its length is records.size() + 1.
inline std::vector<NavState> dead_reckon(const std::vector<ImuRecord>& records,
                                         const StrapdownConfig& cfg) {
    cfg.validate();
    std::vector<NavState> out;
    out.reserve(records.size() + 1);
    out.push_back(cfg.initial_state);
    double prev_t = cfg.initial_state.t;
    for (const auto& rec : records) {
        if (rec.t <= prev_t)
            throw InputError("dead_reckon: records not time-sorted at t=" + std::to_string(rec.t));
        prev_t = rec.t;
        out.push_back(propagate(out.back(), rec, cfg));
    }
    return out;
}

}  // namespace magslam
