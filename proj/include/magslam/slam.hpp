#pragma once

#include "magslam/gpr.hpp"
#include "magslam/kernels.hpp"
#include "magslam/strapdown.hpp"
#include "magslam/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace magslam {

enum class HyperMode { Fixed, Estimated };

/// Whitening sigmas for the 3-D odometry residual rows.
struct OdomNoise3d {
    double pos_sigma = 1e-3;  // m
    double vel_sigma = 1e-3;  // m/s
    double att_sigma = 1e-3;  // rad
};

/// Initial-state prior sigmas (3-D mode uses all fields, planar only pos).
struct InitialPrior {
    double pos_sigma = 1e-6;
    double vel_sigma = 1e-3;
    double att_sigma = 1e-3;
    double bg_sigma = 1e-2;
    double ba_sigma = 1e-1;
};

/// Batch MAP problem over a trajectory, biases, latent field values and
/// (optionally) kernel hyperparameters.
struct Problem {
    bool planar = true;

    std::vector<ImuRecord> imu;
    std::vector<MagRecord> mag;
    NavState initial_state;
    Vec3 gravity = Vec3::Zero();

    Kernel kernel;  // family + input_dim; hyper filled from hyper_init
    HyperMode hyper_mode = HyperMode::Fixed;
    Hyperparams hyper_init;

    double odom_sigma = 5e-4;  // planar per-axis displacement sigma, m
    double odom_bias_prior_sigma = 0.1;  // planar displacement-bias prior, m/step
    OdomNoise3d odom3d;
    NoiseParams bias_noise;  // random-walk driving sigmas per step (3-D mode)

    bool use_initial_prior = true;
    InitialPrior prior;
    bool use_zero_pos_prior = false;
    double zero_pos_sigma = 1.0;  // m ("one metre radius" weak prior)

    void validate() const {
        if (imu.size() < 1) throw InputError("Problem: need at least one odometry record");
        if (!(odom_sigma > 0.0)) throw InputError("Problem: odom_sigma must be > 0");
        kernel.validate();
        for (const auto& r : imu) r.validate();
        for (const auto& m : mag) m.validate();
        if (planar && kernel.input_dim != 2)
            throw InputError("Problem: planar mode requires kernel input_dim 2");
        if (!planar && kernel.input_dim != 3)
            throw InputError("Problem: 3-D mode requires kernel input_dim 3");
    }
};

/// Map each mag record to the nearest epoch; |dt| must be within T/2.
inline std::vector<int> align_mag_to_epochs(const std::vector<NavState>& epochs,
                                            const std::vector<ImuRecord>& imu,
                                            const std::vector<MagRecord>& mag) {
    std::vector<int> out;
    out.reserve(mag.size());
    for (const auto& rec : mag) {
        int best = -1;
        double best_dt = std::numeric_limits<double>::infinity();
        for (size_t e = 0; e < epochs.size(); ++e) {
            const double dt = std::abs(epochs[e].t - rec.t);
            if (dt < best_dt) {
                best_dt = dt;
                best = static_cast<int>(e);
            }
        }
        const double T = imu[std::min(imu.size() - 1, static_cast<size_t>(std::max(0, best - 1)))].T;
        if (best_dt > 0.5 * T)
            throw InputError("mag record at t=" + std::to_string(rec.t) +
                             " has no IMU epoch within T/2");
        out.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Residual model: stacked whitened residual vector + dense Jacobian over the
// local parameterization [states | field values].
// ---------------------------------------------------------------------------

struct BlockInfo {
    std::string name;
    int row0 = 0;
    int rows = 0;
};

class ResidualModel {
public:
    ResidualModel(const Problem& problem, std::vector<NavState> states, MatX field_values,
                  Kernel kernel)
        : prob_(&problem),
          states_(std::move(states)),
          m_(std::move(field_values)),
          kernel_(kernel),
          mag_epoch_(align_mag_to_epochs(states_, problem.imu, problem.mag)) {
        planar_ = problem.planar;
        n_epochs_ = static_cast<int>(states_.size());
        n_mag_ = static_cast<int>(problem.mag.size());
        fd_ = planar_ ? (kernel_.family == KernelFamily::SeIndependent ? 3 : 2) : 3;
        if (m_.rows() != n_mag_ || m_.cols() != fd_)
            throw InputError("ResidualModel: field value matrix must be n_mag x field_dim");
        state_dim_ = planar_ ? 2 : 15;
        // planar mode carries one constant displacement-bias state (the planar
        // reduction of the Eq-2 bias chain); 3-D mode has per-epoch biases
        n_bias_params_ = planar_ ? 2 : 0;
        n_params_ = state_dim_ * n_epochs_ + n_bias_params_ + fd_ * n_mag_;

        if (planar_) {
            // displacement observations from the dead-reckoned record chain
            StrapdownConfig cfg{problem.gravity, problem.initial_state};
            const auto dr = dead_reckon(problem.imu, cfg);
            disp_.resize(n_epochs_ - 1);
            for (int k = 0; k + 1 < n_epochs_; ++k)
                disp_[k] = (dr[k + 1].p - dr[k].p).head<2>();
        }
        layout_blocks();
    }

    int num_params() const { return n_params_; }
    int num_residuals() const { return n_residuals_; }
    const std::vector<BlockInfo>& blocks() const { return blocks_; }
    const std::vector<NavState>& states() const { return states_; }
    const MatX& field_values() const { return m_; }
    const Kernel& kernel() const { return kernel_; }
    const std::vector<int>& mag_epochs() const { return mag_epoch_; }
    int field_dim() const { return fd_; }
    int state_dim() const { return state_dim_; }
    const Vec2& odom_bias() const { return odom_bias_; }

    void set_hypers(const Hyperparams& h) { kernel_.hyper = h; }

    /// Training locations (positions at mag epochs) of the current estimate.
    std::vector<VecX> mag_locations() const {
        std::vector<VecX> locs;
        locs.reserve(n_mag_);
        for (int j = 0; j < n_mag_; ++j) {
            const Vec3& p = states_[mag_epoch_[j]].p;
            locs.push_back(planar_ ? VecX(p.head<2>()) : VecX(p));
        }
        return locs;
    }

    /// Residual vector at chart perturbation dx (dx = 0 is the current
    /// estimate). logdet receives log|K+jitter I| summed over field axes; the
    /// MAP objective is the squared residual norm plus that term.
    VecX residuals(const VecX& dx, double* logdet = nullptr) const {
        auto st = states_;
        MatX m = m_;
        Vec2 bias = odom_bias_;
        apply_chart(dx, st, m, bias);
        return assemble(st, m, bias, logdet, nullptr, nullptr);
    }

    /// Whitened residuals, dense Jacobian, log|K| and its gradient with
    /// respect to the parameters, all analytic at dx = 0.
    void linearize(VecX& r, MatX& J, double* logdet = nullptr,
                   VecX* logdet_grad = nullptr) const {
        J = MatX::Zero(n_residuals_, n_params_);
        if (logdet_grad) *logdet_grad = VecX::Zero(n_params_);
        r = assemble(states_, m_, odom_bias_, logdet, &J, logdet_grad);
    }

    /// Fold an accepted step into the estimate.
    void retract(const VecX& dx) { apply_chart(dx, states_, m_, odom_bias_); }

    /// Full MAP objective: squared whitened residual norm + log|K|. The
    /// log-determinant depends on the epoch positions through the kernel; its
    /// gradient is what turns field-value agreement at revisited places into
    /// a trajectory correction.
    double cost(const VecX& dx) const {
        double logdet = 0.0;
        const VecX r = residuals(dx, &logdet);
        return r.squaredNorm() + logdet;
    }

    // parameter indices
    int pos_col(int epoch, int axis) const { return state_dim_ * epoch + axis; }
    int vel_col(int epoch, int axis) const { return state_dim_ * epoch + 3 + axis; }
    int att_col(int epoch, int axis) const { return state_dim_ * epoch + 6 + axis; }
    int bg_col(int epoch, int axis) const { return state_dim_ * epoch + 9 + axis; }
    int ba_col(int epoch, int axis) const { return state_dim_ * epoch + 12 + axis; }
    int bias_col(int axis) const { return state_dim_ * n_epochs_ + axis; }
    int m_col(int mag_idx, int axis) const {
        return state_dim_ * n_epochs_ + n_bias_params_ + fd_ * mag_idx + axis;
    }

private:
    void layout_blocks() {
        int row = 0;
        auto add = [&](const std::string& name, int rows) {
            blocks_.push_back({name, row, rows});
            row += rows;
        };
        if (prob_->use_initial_prior) add("initial_prior", planar_ ? 2 : 15);
        add("odometry", (n_epochs_ - 1) * (planar_ ? 2 : 9));
        if (planar_)
            add("bias_prior", 2);
        else
            add("bias_walk", (n_epochs_ - 1) * 6);
        add("magnetometer", n_mag_ * fd_);
        add("gp_prior", n_mag_ * fd_);
        if (prob_->use_zero_pos_prior) add("zero_pos_prior", n_epochs_ * (planar_ ? 2 : 3));
        n_residuals_ = row;
    }

    const BlockInfo& block(const std::string& name) const {
        for (const auto& b : blocks_)
            if (b.name == name) return b;
        throw SolverError("no residual block named " + name);
    }

    void apply_chart(const VecX& dx, std::vector<NavState>& st, MatX& m, Vec2& bias) const {
        if (dx.size() != n_params_)
            throw InputError("ResidualModel: parameter vector has wrong size");
        if (planar_) {
            bias.x() += dx(bias_col(0));
            bias.y() += dx(bias_col(1));
        }
        for (int e = 0; e < n_epochs_; ++e) {
            if (planar_) {
                st[e].p.x() += dx(pos_col(e, 0));
                st[e].p.y() += dx(pos_col(e, 1));
            } else {
                st[e].p += Vec3(dx(pos_col(e, 0)), dx(pos_col(e, 1)), dx(pos_col(e, 2)));
                st[e].v += Vec3(dx(vel_col(e, 0)), dx(vel_col(e, 1)), dx(vel_col(e, 2)));
                const Vec3 dth(dx(att_col(e, 0)), dx(att_col(e, 1)), dx(att_col(e, 2)));
                st[e].q = quat_compose(st[e].q, quat_from_rotvec(dth));
                st[e].b_gyro += Vec3(dx(bg_col(e, 0)), dx(bg_col(e, 1)), dx(bg_col(e, 2)));
                st[e].b_accel += Vec3(dx(ba_col(e, 0)), dx(ba_col(e, 1)), dx(ba_col(e, 2)));
            }
        }
        for (int j = 0; j < n_mag_; ++j)
            for (int a = 0; a < fd_; ++a) m(j, a) += dx(m_col(j, a));
    }

    VecX assemble(const std::vector<NavState>& st, const MatX& m, const Vec2& bias,
                  double* logdet_out, MatX* J, VecX* logdet_grad) const {
        VecX r = VecX::Zero(n_residuals_);
        if (prob_->use_initial_prior) {
            if (planar_)
                planar_initial_prior(st, r, J);
            else
                initial_prior_3d(st, r, J);
        }
        if (planar_) {
            planar_odometry(st, bias, r, J);
            planar_bias_prior(bias, r, J);
        } else {
            odometry_3d(st, r, J);
            bias_walk_3d(st, r, J);
        }
        magnetometer(st, m, r, J);
        gp_prior(st, m, r, J, logdet_out, logdet_grad);
        if (prob_->use_zero_pos_prior) zero_pos(st, r, J);
        return r;
    }

    // --- planar blocks -----------------------------------------------------

    void planar_initial_prior(const std::vector<NavState>& st, VecX& r, MatX* J) const {
        const auto& b = block("initial_prior");
        const double inv = 1.0 / prob_->prior.pos_sigma;
        r.segment<2>(b.row0) = (st[0].p.head<2>() - prob_->initial_state.p.head<2>()) * inv;
        if (J)
            for (int a = 0; a < 2; ++a) (*J)(b.row0 + a, pos_col(0, a)) = inv;
    }

    /// Displacement observation model d_k = (p_{k+1} - p_k) + bias + noise.
    void planar_odometry(const std::vector<NavState>& st, const Vec2& bias, VecX& r,
                         MatX* J) const {
        const auto& b = block("odometry");
        const double inv = 1.0 / prob_->odom_sigma;
        for (int k = 0; k + 1 < n_epochs_; ++k) {
            const Vec2 res = (st[k + 1].p.head<2>() - st[k].p.head<2>() + bias - disp_[k]) * inv;
            r.segment<2>(b.row0 + 2 * k) = res;
            if (J) {
                for (int a = 0; a < 2; ++a) {
                    (*J)(b.row0 + 2 * k + a, pos_col(k + 1, a)) = inv;
                    (*J)(b.row0 + 2 * k + a, pos_col(k, a)) = -inv;
                    (*J)(b.row0 + 2 * k + a, bias_col(a)) = inv;
                }
            }
        }
    }

    void planar_bias_prior(const Vec2& bias, VecX& r, MatX* J) const {
        const auto& b = block("bias_prior");
        const double inv = 1.0 / prob_->odom_bias_prior_sigma;
        r.segment<2>(b.row0) = bias * inv;
        if (J)
            for (int a = 0; a < 2; ++a) (*J)(b.row0 + a, bias_col(a)) = inv;
    }

    // --- 3-D blocks ---------------------------------------------------------

    void initial_prior_3d(const std::vector<NavState>& st, VecX& r, MatX* J) const {
        const auto& b = block("initial_prior");
        const auto& pr = prob_->prior;
        const auto& s0 = prob_->initial_state;
        const double ip = 1.0 / pr.pos_sigma, iv = 1.0 / pr.vel_sigma, ia = 1.0 / pr.att_sigma;
        const double ig = 1.0 / pr.bg_sigma, ib = 1.0 / pr.ba_sigma;
        r.segment<3>(b.row0 + 0) = (st[0].p - s0.p) * ip;
        r.segment<3>(b.row0 + 3) = (st[0].v - s0.v) * iv;
        const Vec3 phi = quat_log(quat_compose(s0.q.conjugate(), st[0].q));
        r.segment<3>(b.row0 + 6) = phi * ia;
        r.segment<3>(b.row0 + 9) = (st[0].b_gyro - s0.b_gyro) * ig;
        r.segment<3>(b.row0 + 12) = (st[0].b_accel - s0.b_accel) * ib;
        if (J) {
            for (int a = 0; a < 3; ++a) {
                (*J)(b.row0 + a, pos_col(0, a)) = ip;
                (*J)(b.row0 + 3 + a, vel_col(0, a)) = iv;
                (*J)(b.row0 + 9 + a, bg_col(0, a)) = ig;
                (*J)(b.row0 + 12 + a, ba_col(0, a)) = ib;
            }
            J->block<3, 3>(b.row0 + 6, att_col(0, 0)) = so3_right_jacobian_inv(phi) * ia;
        }
    }

    void odometry_3d(const std::vector<NavState>& st, VecX& r, MatX* J) const {
        const auto& b = block("odometry");
        const double ipos = 1.0 / prob_->odom3d.pos_sigma;
        const double ivel = 1.0 / prob_->odom3d.vel_sigma;
        const double iatt = 1.0 / prob_->odom3d.att_sigma;
        const Vec3 g = prob_->gravity;
        for (int k = 0; k + 1 < n_epochs_; ++k) {
            const ImuRecord& rec = prob_->imu[k];
            const double T = rec.T;
            const NavState& sk = st[k];
            const NavState& sn = st[k + 1];
            const Mat3 R = quat_to_rotmat(sk.q);
            const Vec3 u = rec.dv - sk.b_accel * T;        // bias-corrected dv
            const Vec3 c = 0.5 * T * u;                    // position half-step
            const int row = b.row0 + 9 * k;

            // position
            r.segment<3>(row) = (sn.p - sk.p - T * sk.v - R * c - 0.5 * T * T * g) * ipos;
            // velocity
            r.segment<3>(row + 3) = (sn.v - sk.v - R * u - T * g) * ivel;
            // orientation: log((q_k * C)^-1 * q_{k+1}), C = dq * Exp(-b_g T)
            const Quaternion C = correct_dq(rec.dq, sk.b_gyro, T);
            const Quaternion E =
                quat_compose(quat_compose(sk.q, C).conjugate(), sn.q);
            const Vec3 phi = quat_log(E);
            r.segment<3>(row + 6) = phi * iatt;

            if (J) {
                for (int a = 0; a < 3; ++a) {
                    (*J)(row + a, pos_col(k + 1, a)) = ipos;
                    (*J)(row + a, pos_col(k, a)) = -ipos;
                    (*J)(row + 3 + a, vel_col(k + 1, a)) = ivel;
                    (*J)(row + 3 + a, vel_col(k, a)) = -ivel;
                }
                J->block<3, 3>(row, vel_col(k, 0)) = -T * Mat3::Identity() * ipos;
                J->block<3, 3>(row, att_col(k, 0)) = R * skew(c) * ipos;
                J->block<3, 3>(row, ba_col(k, 0)) = 0.5 * T * T * R * ipos;
                J->block<3, 3>(row + 3, att_col(k, 0)) = R * skew(u) * ivel;
                J->block<3, 3>(row + 3, ba_col(k, 0)) = T * R * ivel;

                const Mat3 Jl_inv = so3_left_jacobian_inv(phi);
                J->block<3, 3>(row + 6, att_col(k + 1, 0)) = so3_right_jacobian_inv(phi) * iatt;
                J->block<3, 3>(row + 6, att_col(k, 0)) = -Jl_inv * quat_to_rotmat(C).transpose() * iatt;
                J->block<3, 3>(row + 6, bg_col(k, 0)) =
                    Jl_inv * so3_left_jacobian(T * sk.b_gyro) * T * iatt;
            }
        }
    }

    void bias_walk_3d(const std::vector<NavState>& st, VecX& r, MatX* J) const {
        const auto& b = block("bias_walk");
        // a zero driving sigma means "constant bias"; floor keeps it soft
        const double ig = 1.0 / std::max(prob_->bias_noise.w_gyro_sigma, 1e-9);
        const double ib = 1.0 / std::max(prob_->bias_noise.w_accel_sigma, 1e-9);
        for (int k = 0; k + 1 < n_epochs_; ++k) {
            const int row = b.row0 + 6 * k;
            r.segment<3>(row) = (st[k + 1].b_gyro - st[k].b_gyro) * ig;
            r.segment<3>(row + 3) = (st[k + 1].b_accel - st[k].b_accel) * ib;
            if (J) {
                for (int a = 0; a < 3; ++a) {
                    (*J)(row + a, bg_col(k + 1, a)) = ig;
                    (*J)(row + a, bg_col(k, a)) = -ig;
                    (*J)(row + 3 + a, ba_col(k + 1, a)) = ib;
                    (*J)(row + 3 + a, ba_col(k, a)) = -ib;
                }
            }
        }
    }

    // --- shared blocks -------------------------------------------------------

    void magnetometer(const std::vector<NavState>& st, const MatX& m, VecX& r, MatX* J) const {
        const auto& b = block("magnetometer");
        for (int j = 0; j < n_mag_; ++j) {
            const MagRecord& rec = prob_->mag[j];
            const int row = b.row0 + fd_ * j;
            const int e = mag_epoch_[j];
            if (planar_) {
                for (int a = 0; a < fd_; ++a) {
                    const double inv = 1.0 / rec.sigma(a);
                    r(row + a) = (rec.y(a) - m(j, a)) * inv;
                    if (J) (*J)(row + a, m_col(j, a)) = -inv;
                }
            } else {
                const Mat3 Rt = quat_to_rotmat(st[e].q).transpose();
                const Vec3 mj(m(j, 0), m(j, 1), m(j, 2));
                const Vec3 pred = Rt * mj;
                for (int a = 0; a < 3; ++a) r(row + a) = (rec.y(a) - pred(a)) / rec.sigma(a);
                if (J) {
                    const Mat3 sig_inv = rec.sigma.cwiseInverse().asDiagonal();
                    J->block<3, 3>(row, att_col(e, 0)) = -sig_inv * skew(pred);
                    J->block<3, 3>(row, m_col(j, 0)) = -sig_inv * Rt;
                }
            }
        }
    }

    /// GP prior residual chol(K)^-1 m, with K evaluated at the current epoch
    /// positions, plus log|K| and its position gradient. Both the whitening
    /// (differentiated exactly through the Cholesky factor) and the
    /// log-determinant couple the field values to the trajectory; the
    /// log-determinant carries the attraction between locations with
    /// consistent field measurements.
    void gp_prior(const std::vector<NavState>& st, const MatX& m, VecX& r, MatX* J,
                  double* logdet_out, VecX* logdet_grad) const {
        const auto& b = block("gp_prior");
        std::vector<VecX> locs;
        locs.reserve(n_mag_);
        for (int j = 0; j < n_mag_; ++j) {
            const Vec3& p = st[mag_epoch_[j]].p;
            locs.push_back(planar_ ? VecX(p.head<2>()) : VecX(p));
        }
        const GramFactor f = gram(locs, kernel_);
        const int bd = kernel_.block_dim();
        const int n = static_cast<int>(f.size());
        const int d = kernel_.input_dim;
        const double axes_mult = bd == 1 ? static_cast<double>(fd_) : 1.0;

        // whitened residuals per axis (SE) or stacked point-major (matrix)
        std::vector<VecX> ws;
        if (bd == 1) {
            for (int a = 0; a < fd_; ++a) {
                const VecX w = f.whiten(VecX(m.col(a)));
                r.segment(b.row0 + a * n_mag_, n_mag_) = w;
                ws.push_back(w);
            }
        } else {
            const VecX w = f.whiten(detail::stack_point_major(m));
            r.segment(b.row0, n) = w;
            ws.push_back(w);
        }
        if (logdet_out) *logdet_out = axes_mult * f.logdet;
        if (!J && !logdet_grad) return;

        // d r / d m: L^-1 (per axis or stacked)
        if (J) {
            MatX Linv = MatX::Identity(n, n);
            f.chol.triangularView<Eigen::Lower>().solveInPlace(Linv);
            if (bd == 1) {
                for (int a = 0; a < fd_; ++a)
                    for (int j = 0; j < n_mag_; ++j)
                        for (int i = 0; i < n_mag_; ++i)
                            (*J)(b.row0 + a * n_mag_ + i, m_col(j, a)) = Linv(i, j);
            } else {
                for (int j = 0; j < n_mag_; ++j)
                    for (int a = 0; a < bd; ++a)
                        for (int i = 0; i < n; ++i)
                            (*J)(b.row0 + i, m_col(j, a)) = Linv(i, j * bd + a);
            }
        }

        // Position derivatives via dL = L Phi(L^-1 dK L^-T) with the low-rank
        // structure dK = S V^T + V S^T (only block row/col i changes):
        //   d (L^-1 m)   = -Phi(A) w,        A = C Z^T + Z C^T
        //   d log|K+jI|  = tr((K+jI)^-1 dK) = tr(A) = 2 sum(C o Z)
        for (int i = 0; i < n_mag_; ++i) {
            for (int ax = 0; ax < d; ++ax) {
                MatX V = MatX::Zero(n, bd);  // dK block column for point i
                for (int bpt = 0; bpt < n_mag_; ++bpt) {
                    if (bpt == i) continue;
                    if (bd == 1) {
                        V(bpt, 0) = se_cov_grad_x(locs[i], locs[bpt], kernel_.hyper)(ax);
                    } else {
                        V.block(bpt * bd, 0, bd, bd) =
                            matrix_cov_grad_x(locs[i], locs[bpt], kernel_, ax).transpose();
                    }
                }
                MatX C = MatX::Zero(n, bd);
                for (int c = 0; c < bd; ++c) C(i * bd + c, c) = 1.0;
                f.chol.triangularView<Eigen::Lower>().solveInPlace(C);
                f.chol.triangularView<Eigen::Lower>().solveInPlace(V);
                const int col = pos_col(mag_epoch_[i], ax);
                if (logdet_grad)
                    (*logdet_grad)(col) += axes_mult * 2.0 * C.cwiseProduct(V).sum();
                if (!J) continue;
                MatX A = C * V.transpose() + V * C.transpose();
                // Phi: lower triangle with halved diagonal
                A = A.triangularView<Eigen::StrictlyLower>().toDenseMatrix() +
                    0.5 * A.diagonal().asDiagonal().toDenseMatrix();
                if (bd == 1) {
                    for (int a = 0; a < fd_; ++a)
                        J->col(col).segment(b.row0 + a * n_mag_, n_mag_) -= A * ws[a];
                } else {
                    J->col(col).segment(b.row0, n) -= A * ws[0];
                }
            }
        }
    }

    void zero_pos(const std::vector<NavState>& st, VecX& r, MatX* J) const {
        const auto& b = block("zero_pos_prior");
        const double inv = 1.0 / prob_->zero_pos_sigma;
        const int dim = planar_ ? 2 : 3;
        for (int e = 0; e < n_epochs_; ++e) {
            for (int a = 0; a < dim; ++a) {
                r(b.row0 + dim * e + a) = st[e].p(a) * inv;
                if (J) (*J)(b.row0 + dim * e + a, pos_col(e, a)) = inv;
            }
        }
    }

    const Problem* prob_;
    std::vector<NavState> states_;
    MatX m_;
    Kernel kernel_;
    std::vector<int> mag_epoch_;
    std::vector<Vec2> disp_;
    Vec2 odom_bias_ = Vec2::Zero();
    bool planar_ = true;
    int n_epochs_ = 0, n_mag_ = 0, fd_ = 3, state_dim_ = 2;
    int n_bias_params_ = 0;
    int n_params_ = 0, n_residuals_ = 0;
    std::vector<BlockInfo> blocks_;
};

/// Convenience: model at the dead-reckoned initial estimate with field values
/// initialized from the rotated magnetometer readings.
inline ResidualModel build_residuals(const Problem& problem) {
    problem.validate();
    StrapdownConfig cfg{problem.gravity, problem.initial_state};
    auto states = dead_reckon(problem.imu, cfg);
    const auto epochs = align_mag_to_epochs(states, problem.imu, problem.mag);
    const int fd = problem.planar
                       ? (problem.kernel.family == KernelFamily::SeIndependent ? 3 : 2)
                       : 3;
    MatX m(problem.mag.size(), fd);
    for (size_t j = 0; j < problem.mag.size(); ++j) {
        if (problem.planar) {
            m.row(j) = problem.mag[j].y.head(fd).transpose();
        } else {
            const Vec3 ml = quat_to_rotmat(states[epochs[j]].q) * problem.mag[j].y;
            m.row(j) = ml.transpose();
        }
    }
    Kernel k = problem.kernel;
    k.hyper = problem.hyper_init;
    return ResidualModel(problem, std::move(states), std::move(m), k);
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt solver with optional hyperparameter alternation
// ---------------------------------------------------------------------------

struct SolveOptions {
    int max_iterations = 2000;
    double cost_rel_tol = 1e-10;
    double grad_tol = 1e-8;
    double lambda_init = 1e-4;
    int hyper_inner_iterations = 100;  // LM budget between hyperparameter refits
    double hyper_log_tol = 1e-4;
    int hyper_max_outer = 40;
};

struct Solution {
    std::vector<NavState> states;
    MapEstimate map;
    Hyperparams hypers;
    std::vector<double> cost_trace;  // MAP objective after each accepted step
    bool converged = false;
    int iterations = 0;
    std::string status;
    double final_cost = std::numeric_limits<double>::quiet_NaN();
    Vec2 odom_bias = Vec2::Zero();  // planar displacement-bias estimate
    MatX bias_sigma_gyro;           // (n_epochs x 3), 3-D solves only
    MatX bias_sigma_accel;          // (n_epochs x 3), 3-D solves only
};

namespace detail {

enum class LmStop { Converged, GradConverged, MaxIterations, Stalled, Diverged };

/// LM iterations on `model`, minimizing the MAP objective
///   F = ||r||^2 + log|K|.
/// Steps solve the damped Gauss-Newton system of the residual part augmented
/// with the analytic log|K| gradient; acceptance gates on F, so accepted
/// steps strictly decrease it and the recorded trace is non-increasing.
inline LmStop run_lm(ResidualModel& model, const SolveOptions& opt, int budget, int& iters,
                     std::vector<double>& trace, double& lambda) {
    VecX r, gld;
    MatX J;
    double logdet = 0.0;
    model.linearize(r, J, &logdet, &gld);
    if (!r.allFinite()) return LmStop::Diverged;
    double cost = r.squaredNorm() + logdet;
    if (trace.empty()) trace.push_back(cost);

    for (int it = 0; it < budget; ++it) {
        const VecX g = J.transpose() * r + 0.5 * gld;  // half-gradient of F
        if ((2.0 * g).lpNorm<Eigen::Infinity>() < opt.grad_tol) return LmStop::GradConverged;

        const MatX H = J.transpose() * J;
        VecX diag = H.diagonal().cwiseMax(1e-12);
        bool accepted = false;
        for (int tries = 0; tries < 24 && !accepted; ++tries) {
            MatX Haug = H;
            Haug.diagonal() += lambda * diag;
            const VecX dx = Haug.ldlt().solve(-g);
            if (!dx.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            double logdet_new = 0.0;
            VecX r_new;
            try {
                r_new = model.residuals(dx, &logdet_new);
            } catch (const SolverError&) {
                lambda *= 10.0;
                continue;
            }
            const double cost_new = r_new.allFinite()
                                        ? r_new.squaredNorm() + logdet_new
                                        : std::numeric_limits<double>::infinity();
            if (cost_new < cost) {
                model.retract(dx);
                const double prev = cost;
                cost = cost_new;
                trace.push_back(cost);
                ++iters;
                lambda = std::max(lambda / 3.0, 1e-12);
                model.linearize(r, J, &logdet, &gld);
                accepted = true;
                if (std::abs(prev - cost) <= opt.cost_rel_tol * std::max(1.0, std::abs(prev)))
                    return LmStop::Converged;
            } else {
                lambda *= 10.0;
                if (lambda > 1e14) return LmStop::Stalled;
            }
        }
        if (!accepted) return LmStop::Stalled;
    }
    return LmStop::MaxIterations;
}

inline void bias_marginals(const ResidualModel& model, Solution& sol) {
    VecX r;
    MatX J;
    model.linearize(r, J);
    const MatX H = J.transpose() * J;
    const auto ldlt = H.ldlt();
    const int n_epochs = static_cast<int>(model.states().size());
    sol.bias_sigma_gyro.resize(n_epochs, 3);
    sol.bias_sigma_accel.resize(n_epochs, 3);
    VecX e = VecX::Zero(H.rows());
    auto marginal = [&](int col) {
        e.setZero();
        e(col) = 1.0;
        const VecX x = ldlt.solve(e);
        return std::sqrt(std::max(0.0, x(col)));
    };
    for (int ep = 0; ep < n_epochs; ++ep) {
        for (int a = 0; a < 3; ++a) {
            sol.bias_sigma_gyro(ep, a) = marginal(model.bg_col(ep, a));
            sol.bias_sigma_accel(ep, a) = marginal(model.ba_col(ep, a));
        }
    }
}

}  // namespace detail

/// Batch MAP solve of the GP-SLAM objective.
inline Solution solve(const Problem& problem, const SolveOptions& opt = SolveOptions()) {
    problem.validate();
    if (problem.imu.size() < 1 || problem.mag.empty())
        throw InputError("solve: need odometry and magnetic measurements");

    ResidualModel model = build_residuals(problem);

    Solution sol;
    double lambda = opt.lambda_init;
    int iters = 0;
    detail::LmStop stop = detail::LmStop::MaxIterations;

    Hyperparams hypers = problem.hyper_init;
    if (problem.hyper_mode == HyperMode::Fixed) {
        stop = detail::run_lm(model, opt, opt.max_iterations, iters, sol.cost_trace, lambda);
    } else {
        bool lm_done = false;
        for (int outer = 0; outer < opt.hyper_max_outer; ++outer) {
            const int budget = std::min(opt.hyper_inner_iterations, opt.max_iterations - iters);
            if (budget <= 0) {
                stop = detail::LmStop::MaxIterations;
                break;
            }
            stop = detail::run_lm(model, opt, budget, iters, sol.cost_trace, lambda);
            lm_done = stop == detail::LmStop::Converged || stop == detail::LmStop::GradConverged;
            if (stop == detail::LmStop::Diverged) break;
            if (model.field_values().rows() < 5) break;  // too few samples to refit

            // refit (sigma_f, l) on the current latent field values; keep the
            // result only if it lowers the shared MAP objective
            Hyperparams next = hypers;
            try {
                const auto fit =
                    fit_hypers(model.mag_locations(), model.field_values(),
                               MatX::Zero(model.field_values().rows(), model.field_values().cols()),
                               hypers, model.kernel().family);
                next = fit.hypers;
            } catch (const SolverError&) {
                // keep previous hypers if the refit is ill-posed
            }
            const double cost_old = model.cost(VecX::Zero(model.num_params()));
            model.set_hypers(next);
            double cost_new = std::numeric_limits<double>::infinity();
            try {
                cost_new = model.cost(VecX::Zero(model.num_params()));
            } catch (const SolverError&) {
            }
            if (!(cost_new < cost_old)) {
                model.set_hypers(hypers);  // refit did not help
                if (lm_done) break;
                continue;
            }
            sol.cost_trace.push_back(cost_new);
            const double dlog = std::abs(std::log(std::max(next.sigma_f, 1e-12)) -
                                         std::log(std::max(hypers.sigma_f, 1e-12))) +
                                std::abs(std::log(next.length_scale) - std::log(hypers.length_scale));
            hypers = next;
            if (dlog < opt.hyper_log_tol && lm_done) break;
            lambda = opt.lambda_init;  // objective changed; restart damping
        }
    }

    switch (stop) {
        case detail::LmStop::Converged:
            sol.converged = true;
            sol.status = "converged: relative cost change below tolerance";
            break;
        case detail::LmStop::GradConverged:
            sol.converged = true;
            sol.status = "converged: gradient norm below tolerance";
            break;
        case detail::LmStop::MaxIterations:
            sol.status = "stopped: iteration budget exhausted";
            break;
        case detail::LmStop::Stalled:
            // no descent step exists at the damping limit: a local minimum to
            // numerical precision
            sol.converged = true;
            sol.status = "converged: no descent step at damping limit";
            break;
        case detail::LmStop::Diverged:
            sol.status = "diverged: non-finite cost; returning last finite iterate";
            break;
    }

    sol.iterations = iters;
    sol.states = model.states();
    sol.odom_bias = model.odom_bias();
    sol.hypers = (problem.hyper_mode == HyperMode::Fixed) ? problem.hyper_init : hypers;
    sol.final_cost = sol.cost_trace.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : sol.cost_trace.back();

    Kernel k = problem.kernel;
    k.hyper = sol.hypers;
    sol.map = MapEstimate(model.mag_locations(), model.field_values(), k);

    if (!problem.planar) detail::bias_marginals(model, sol);
    return sol;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

struct BiasReportRow {
    std::string sensor;  // "gyro" | "accel"
    char axis;           // 'x' | 'y' | 'z'
    double before = 0.0;
    double after = 0.0;
    double after_sigma = 0.0;
};

/// Table of initial vs estimated biases: 3 axes x 2 sensors for 3-D solves,
/// the two displacement-bias components for planar solves.
inline std::vector<BiasReportRow> recover_biases(const Problem& problem, const Solution& sol) {
    if (problem.planar) {
        return {{"odometry", 'x', 0.0, sol.odom_bias.x(), 0.0},
                {"odometry", 'y', 0.0, sol.odom_bias.y(), 0.0}};
    }
    const int n = static_cast<int>(sol.states.size());
    std::vector<BiasReportRow> rows;
    const char axes[3] = {'x', 'y', 'z'};
    for (int a = 0; a < 3; ++a) {
        BiasReportRow g{"gyro", axes[a], problem.initial_state.b_gyro(a), 0.0, 0.0};
        BiasReportRow acc{"accel", axes[a], problem.initial_state.b_accel(a), 0.0, 0.0};
        for (const auto& s : sol.states) {
            g.after += s.b_gyro(a) / n;
            acc.after += s.b_accel(a) / n;
        }
        if (sol.bias_sigma_gyro.rows() == n) {
            g.after_sigma = sol.bias_sigma_gyro(n / 2, a);
            acc.after_sigma = sol.bias_sigma_accel(n / 2, a);
        }
        rows.push_back(g);
        rows.push_back(acc);
    }
    return rows;
}

struct TrajectoryErrors {
    double rmse = 0.0;
    double max_error = 0.0;
};

/// Position RMSE / max error between two equally long trajectories.
inline TrajectoryErrors evaluate(const std::vector<NavState>& estimate,
                                 const std::vector<NavState>& truth) {
    if (estimate.size() != truth.size())
        throw InputError("evaluate: trajectory length mismatch (" +
                         std::to_string(estimate.size()) + " vs " + std::to_string(truth.size()) +
                         ")");
    if (estimate.empty()) throw InputError("evaluate: empty trajectories");
    double sum2 = 0.0, mx = 0.0;
    for (size_t i = 0; i < estimate.size(); ++i) {
        const double e = (estimate[i].p - truth[i].p).norm();
        sum2 += e * e;
        mx = std::max(mx, e);
    }
    return {std::sqrt(sum2 / estimate.size()), mx};
}

}  // namespace magslam
