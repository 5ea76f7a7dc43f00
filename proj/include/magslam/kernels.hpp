#pragma once

#include "magslam/types.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <string>
#include <vector>

namespace magslam {

/// GP kernel hyperparameters: field amplitude (a.u.) and length scale (m).
struct Hyperparams {
    double sigma_f = 0.1;
    double length_scale = 0.1;

    void validate() const {
        if (!(sigma_f >= 0.0) || !std::isfinite(sigma_f))
            throw InputError("Hyperparams: sigma_f must be >= 0 and finite");
        if (!(length_scale > 0.0) || !std::isfinite(length_scale))
            throw InputError("Hyperparams: length_scale must be > 0 and finite");
    }
};

enum class KernelFamily {
    SeIndependent,   // one scalar SE kernel per field axis, axes independent
    CurlFree,        // matrix-valued kernel for curl-free fields
    DivergenceFree,  // matrix-valued kernel for divergence-free fields
};

inline std::string to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::SeIndependent: return "se-independent";
        case KernelFamily::CurlFree: return "curl-free";
        case KernelFamily::DivergenceFree: return "divergence-free";
    }
    return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "se-independent" || s == "se") return KernelFamily::SeIndependent;
    if (s == "curl-free") return KernelFamily::CurlFree;
    if (s == "divergence-free") return KernelFamily::DivergenceFree;
    throw InputError("unknown kernel family '" + s + "'");
}

/// Covariance function over sample locations.
///
/// input_dim is the spatial dimension (2 or 3). The matrix-valued families
/// model an input_dim-component field and return input_dim x input_dim
/// covariance blocks; SeIndependent models each field axis as its own scalar
/// GP and the number of axes is chosen by the caller.
struct Kernel {
    KernelFamily family = KernelFamily::SeIndependent;
    Hyperparams hyper;
    int input_dim = 2;

    void validate() const {
        hyper.validate();
        if (input_dim != 2 && input_dim != 3)
            throw InputError("Kernel: input_dim must be 2 or 3");
    }

    /// Size of one covariance block (1 for scalar SE, input_dim otherwise).
    int block_dim() const { return family == KernelFamily::SeIndependent ? 1 : input_dim; }
};

namespace detail {
inline void check_same_dim(const VecX& a, const VecX& b) {
    if (a.size() != b.size())
        throw InputError("kernel: location dimension mismatch (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
}
}  // namespace detail

/// Squared-exponential covariance: sigma_f^2 * exp(-|x-x2|^2 / (2 l^2)).
inline double se_cov(const VecX& x, const VecX& x2, const Hyperparams& h) {
    detail::check_same_dim(x, x2);
    const double d2 = (x - x2).squaredNorm();
    const double l2 = h.length_scale * h.length_scale;
    return h.sigma_f * h.sigma_f * std::exp(-d2 / (2.0 * l2));
}

/// Gradient of se_cov with respect to the first argument x.
inline VecX se_cov_grad_x(const VecX& x, const VecX& x2, const Hyperparams& h) {
    const double k = se_cov(x, x2, h);
    const double l2 = h.length_scale * h.length_scale;
    return (-k / l2) * (x - x2);
}

/// Matrix-valued covariance block for the curl-free / divergence-free families.
///
/// With r = (x-x2)/l and e = sigma_f^2 exp(-|x-x2|^2/(2 l^2)):
///   curl-free:        (1/l^2) (I - r r^T) e
///   divergence-free:  (1/l^2) ((n-1-|r|^2) I + r r^T) e
inline MatX matrix_cov(const VecX& x, const VecX& x2, const Kernel& k) {
    detail::check_same_dim(x, x2);
    if (k.family == KernelFamily::SeIndependent)
        throw InputError("matrix_cov: SE-independent family has no matrix block; use se_cov per axis");
    if (x.size() != k.input_dim)
        throw InputError("matrix_cov: location dimension does not match kernel input_dim");
    const int n = k.input_dim;
    const double l = k.hyper.length_scale;
    const VecX r = (x - x2) / l;
    const double e = k.hyper.sigma_f * k.hyper.sigma_f * std::exp(-0.5 * r.squaredNorm());
    const MatX rrT = r * r.transpose();
    MatX out(n, n);
    if (k.family == KernelFamily::CurlFree) {
        out = (MatX::Identity(n, n) - rrT) * (e / (l * l));
    } else {
        out = ((n - 1 - r.squaredNorm()) * MatX::Identity(n, n) + rrT) * (e / (l * l));
    }
    return out;
}

/// Derivative of matrix_cov(x, x2) with respect to coordinate `axis` of x.
inline MatX matrix_cov_grad_x(const VecX& x, const VecX& x2, const Kernel& k, int axis) {
    const int n = k.input_dim;
    const double l = k.hyper.length_scale;
    const VecX r = (x - x2) / l;
    const double e = k.hyper.sigma_f * k.hyper.sigma_f * std::exp(-0.5 * r.squaredNorm());
    // dr/dx_axis = e_axis / l; de/dx_axis = -e * r_axis / l
    VecX ea = VecX::Zero(n);
    ea(axis) = 1.0 / l;
    const double de = -e * r(axis) / l;
    const MatX rrT = r * r.transpose();
    const MatX drrT = ea * r.transpose() + r * ea.transpose();
    MatX out(n, n);
    if (k.family == KernelFamily::CurlFree) {
        out = (-(drrT)*e + (MatX::Identity(n, n) - rrT) * de) / (l * l);
    } else {
        const double dnorm2 = 2.0 * r(axis) / l;
        out = ((-dnorm2) * e * MatX::Identity(n, n) + drrT * e +
               ((n - 1 - r.squaredNorm()) * MatX::Identity(n, n) + rrT) * de) /
              (l * l);
    }
    return out;
}

/// d block / d log(sigma_f) and d block / d log(l) for any family, returned as
/// a pair of blocks matching matrix_cov / se_cov shape.
inline void cov_hyper_grads(const VecX& x, const VecX& x2, const Kernel& k, MatX& d_log_sf,
                            MatX& d_log_l) {
    const double l = k.hyper.length_scale;
    const VecX diff = x - x2;
    const double d2 = diff.squaredNorm();
    if (k.family == KernelFamily::SeIndependent) {
        const double kk = se_cov(x, x2, k.hyper);
        d_log_sf = MatX::Constant(1, 1, 2.0 * kk);
        d_log_l = MatX::Constant(1, 1, kk * d2 / (l * l));
        return;
    }
    const int n = k.input_dim;
    const VecX r = diff / l;
    const double e = k.hyper.sigma_f * k.hyper.sigma_f * std::exp(-0.5 * r.squaredNorm());
    const MatX I = MatX::Identity(n, n);
    const MatX rrT = r * r.transpose();
    const MatX block = matrix_cov(x, x2, k);
    d_log_sf = 2.0 * block;
    // l-derivative: scale by l after d/dl. r = diff/l depends on l.
    // d(e)/dl * l = e * d2 / l^2 ; d(r rT)/dl * l = -2 r rT ; d(|r|^2)/dl * l = -2 |r|^2
    const double s2 = r.squaredNorm();
    if (k.family == KernelFamily::CurlFree) {
        // block = (1/l^2)(I - rrT) e
        d_log_l = (-2.0) * block + (1.0 / (l * l)) * (2.0 * rrT) * e +
                  (1.0 / (l * l)) * (I - rrT) * e * s2;
    } else {
        d_log_l = (-2.0) * block + (1.0 / (l * l)) * (2.0 * s2 * I - 2.0 * rrT) * e +
                  (1.0 / (l * l)) * ((n - 1 - s2) * I + rrT) * e * s2;
    }
}

/// Cholesky factorization of a kernel Gram matrix with the jitter actually used.
struct GramFactor {
    MatX K;             // Gram matrix without jitter
    MatX chol;          // lower-triangular L with L L^T = K + jitter I
    double jitter_used = 0.0;
    double logdet = 0.0;  // log |K + jitter I|

    Eigen::Index size() const { return K.rows(); }

    /// Solve (K + jitter I) x = b via the stored factor.
    VecX solve(const VecX& b) const {
        VecX y = chol.triangularView<Eigen::Lower>().solve(b);
        return chol.transpose().triangularView<Eigen::Upper>().solve(y);
    }

    /// Forward substitution L^{-1} b (whitening).
    VecX whiten(const VecX& b) const { return chol.triangularView<Eigen::Lower>().solve(b); }
};

/// Assemble the Gram matrix over `locations` for kernel `k`.
///
/// SE-independent: N x N (shared by every field axis). Matrix families:
/// (d*N) x (d*N) in point-major block order. Adds noise_var (may be empty or
/// per-row) to the diagonal before factorizing.
inline MatX gram_matrix(const std::vector<VecX>& locations, const Kernel& k) {
    k.validate();
    if (locations.empty()) throw InputError("gram: need at least one location");
    const int N = static_cast<int>(locations.size());
    const int bd = k.block_dim();
    MatX K(N * bd, N * bd);
    for (int i = 0; i < N; ++i) {
        for (int j = i; j < N; ++j) {
            if (bd == 1) {
                const double v = se_cov(locations[i], locations[j], k.hyper);
                K(i, j) = v;
                K(j, i) = v;
            } else {
                const MatX b = matrix_cov(locations[i], locations[j], k);
                K.block(i * bd, j * bd, bd, bd) = b;
                K.block(j * bd, i * bd, bd, bd) = b.transpose();
            }
        }
    }
    return K;
}

/// Factorize K (+ optional extra diagonal) with an adaptive jitter schedule:
/// start at 1e-12 * trace/N, grow by 10x up to 1e-4 * trace/N.
inline GramFactor factorize(MatX K, const VecX& extra_diag = VecX()) {
    const Eigen::Index n = K.rows();
    if (extra_diag.size() != 0) {
        if (extra_diag.size() != n) throw InputError("factorize: diagonal size mismatch");
        K.diagonal() += extra_diag;
    }
    const double scale = K.trace() / static_cast<double>(n);
    const double j0 = 1e-12 * scale;
    const double jmax = 1e-4 * scale;

    GramFactor out;
    out.K = K;
    double jitter = j0;
    for (;;) {
        MatX A = K;
        A.diagonal().array() += jitter;
        Eigen::LLT<MatX> llt(A);
        if (llt.info() == Eigen::Success) {
            out.chol = llt.matrixL();
            // guard against LLT "success" with non-positive pivots
            if ((out.chol.diagonal().array() > 0.0).all()) {
                out.jitter_used = jitter;
                out.logdet = 2.0 * out.chol.diagonal().array().log().sum();
                return out;
            }
        }
        jitter *= 10.0;
        if (!(jitter > 0.0) || jitter > jmax) {
            throw SolverError("kernel matrix not PSD after max jitter (trace/N=" +
                              std::to_string(scale) + ")");
        }
    }
}

/// Gram assembly + jittered Cholesky in one step.
inline GramFactor gram(const std::vector<VecX>& locations, const Kernel& k,
                       const VecX& extra_diag = VecX()) {
    return factorize(gram_matrix(locations, k), extra_diag);
}

}  // namespace magslam
