#pragma once

#include "magslam/kernels.hpp"
#include "magslam/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace magslam {

namespace detail {

/// Stack an N x d value matrix point-major: (p0_a0, p0_a1, ..., p1_a0, ...).
inline VecX stack_point_major(const MatX& values) {
    VecX out(values.rows() * values.cols());
    for (Eigen::Index i = 0; i < values.rows(); ++i)
        for (Eigen::Index a = 0; a < values.cols(); ++a) out(i * values.cols() + a) = values(i, a);
    return out;
}

}  // namespace detail

/// Latent field estimate: training locations/values plus the GP posterior
/// predictor. Values are N x n_axes (n_axes = 3 for SE-independent, otherwise
/// the kernel's input_dim). noise holds per-point per-axis measurement std
/// devs (same shape as values; zero rows model noiseless latent values).
class MapEstimate {
public:
    MapEstimate() = default;

    MapEstimate(std::vector<VecX> locations, MatX values, Kernel kernel, MatX noise = MatX())
        : locations_(std::move(locations)),
          values_(std::move(values)),
          kernel_(kernel),
          noise_(noise.size() == 0 ? MatX::Zero(values_.rows(), values_.cols()) : std::move(noise)) {
        kernel_.validate();
        if (locations_.empty()) throw InputError("MapEstimate: no training locations");
        if (static_cast<Eigen::Index>(locations_.size()) != values_.rows())
            throw InputError("MapEstimate: locations and values length mismatch");
        if (noise_.rows() != values_.rows() || noise_.cols() != values_.cols())
            throw InputError("MapEstimate: noise shape mismatch");
        const int want_axes = kernel_.family == KernelFamily::SeIndependent ? -1 : kernel_.input_dim;
        if (want_axes > 0 && values_.cols() != want_axes)
            throw InputError("MapEstimate: matrix kernel needs input_dim field axes");
        for (const auto& x : locations_)
            if (x.size() != kernel_.input_dim)
                throw InputError("MapEstimate: location dimension does not match kernel");
        factorize_all();
    }

    const std::vector<VecX>& locations() const { return locations_; }
    const MatX& values() const { return values_; }
    const Kernel& kernel() const { return kernel_; }
    const MatX& noise() const { return noise_; }
    Eigen::Index n_axes() const { return values_.cols(); }

    /// Posterior mean and covariance at a query location.
    void predict(const VecX& query, VecX& mean, MatX& cov) const {
        if (query.size() != kernel_.input_dim)
            throw InputError("predict: query dimension does not match kernel");
        const int N = static_cast<int>(locations_.size());
        if (kernel_.family == KernelFamily::SeIndependent) {
            VecX ks(N);
            for (int i = 0; i < N; ++i) ks(i) = se_cov(query, locations_[i], kernel_.hyper);
            const double kss = se_cov(query, query, kernel_.hyper);
            mean.resize(values_.cols());
            cov = MatX::Zero(values_.cols(), values_.cols());
            for (Eigen::Index a = 0; a < values_.cols(); ++a) {
                mean(a) = ks.dot(alphas_[a]);
                const VecX w = factors_[a].whiten(ks);
                cov(a, a) = std::max(0.0, kss - w.squaredNorm());
            }
        } else {
            const int d = kernel_.input_dim;
            MatX ks(N * d, d);
            for (int i = 0; i < N; ++i)
                ks.block(i * d, 0, d, d) = matrix_cov(locations_[i], query, kernel_);
            const MatX kss = matrix_cov(query, query, kernel_);
            mean = ks.transpose() * alphas_[0];
            MatX w(N * d, d);
            for (int c = 0; c < d; ++c)
                w.col(c) = factors_[0].whiten(VecX(ks.col(c)));
            cov = kss - w.transpose() * w;
            cov = 0.5 * (cov + cov.transpose()).eval();
        }
    }

    const GramFactor& factor(int axis = 0) const { return factors_[axis]; }

private:
    void factorize_all() {
        const MatX K = gram_matrix(locations_, kernel_);
        if (kernel_.family == KernelFamily::SeIndependent) {
            factors_.clear();
            alphas_.clear();
            for (Eigen::Index a = 0; a < values_.cols(); ++a) {
                const VecX nv = noise_.col(a).array().square();
                factors_.push_back(factorize(K, nv));
                alphas_.push_back(factors_.back().solve(VecX(values_.col(a))));
            }
        } else {
            const VecX nv = detail::stack_point_major(noise_).array().square();
            factors_ = {factorize(K, nv)};
            alphas_ = {factors_[0].solve(detail::stack_point_major(values_))};
        }
    }

    std::vector<VecX> locations_;
    MatX values_;
    Kernel kernel_;
    MatX noise_;
    std::vector<GramFactor> factors_;
    std::vector<VecX> alphas_;
};

inline void predict(const MapEstimate& map, const VecX& query, VecX& mean, MatX& cov) {
    map.predict(query, mean, cov);
}

// ---------------------------------------------------------------------------
// Negative log marginal likelihood and hyperparameter fitting
// ---------------------------------------------------------------------------

/// 0.5 [ y^T (K+C)^-1 y + log|K+C| + N log 2pi ], summed over field axes.
inline double nlml(const std::vector<VecX>& locations, const MatX& values, const Kernel& k,
                   const MatX& noise) {
    if (locations.empty()) throw InputError("nlml: need at least one sample");
    const MatX K = gram_matrix(locations, k);
    const double log2pi = std::log(2.0 * M_PI);
    double total = 0.0;
    if (k.family == KernelFamily::SeIndependent) {
        for (Eigen::Index a = 0; a < values.cols(); ++a) {
            const VecX nv = noise.col(a).array().square();
            const GramFactor f = factorize(K, nv);
            const VecX y = values.col(a);
            total += 0.5 * (y.dot(f.solve(y)) + f.logdet + y.size() * log2pi);
        }
    } else {
        const VecX nv = detail::stack_point_major(noise).array().square();
        const GramFactor f = factorize(K, nv);
        const VecX y = detail::stack_point_major(values);
        total += 0.5 * (y.dot(f.solve(y)) + f.logdet + y.size() * log2pi);
    }
    return total;
}

/// Analytic nlml gradient with respect to (log sigma_f, log length_scale).
inline Eigen::Vector2d nlml_grad(const std::vector<VecX>& locations, const MatX& values,
                                 const Kernel& k, const MatX& noise) {
    const int N = static_cast<int>(locations.size());
    const int bd = k.block_dim();
    const int n = N * bd;
    MatX dK_sf(n, n), dK_l(n, n);
    MatX bs, bl;
    for (int i = 0; i < N; ++i) {
        for (int j = i; j < N; ++j) {
            cov_hyper_grads(locations[i], locations[j], k, bs, bl);
            dK_sf.block(i * bd, j * bd, bd, bd) = bs;
            dK_sf.block(j * bd, i * bd, bd, bd) = bs.transpose();
            dK_l.block(i * bd, j * bd, bd, bd) = bl;
            dK_l.block(j * bd, i * bd, bd, bd) = bl.transpose();
        }
    }
    const MatX K = gram_matrix(locations, k);
    Eigen::Vector2d g = Eigen::Vector2d::Zero();
    auto accumulate = [&](const GramFactor& f, const VecX& y) {
        const VecX alpha = f.solve(y);
        // Ainv via factor; trace(Ainv dK) and alpha^T dK alpha
        MatX Ainv = MatX::Identity(f.size(), f.size());
        for (Eigen::Index c = 0; c < Ainv.cols(); ++c) Ainv.col(c) = f.solve(VecX(Ainv.col(c)));
        g(0) += 0.5 * ((Ainv * dK_sf).trace() - alpha.dot(dK_sf * alpha));
        g(1) += 0.5 * ((Ainv * dK_l).trace() - alpha.dot(dK_l * alpha));
    };
    if (k.family == KernelFamily::SeIndependent) {
        for (Eigen::Index a = 0; a < values.cols(); ++a) {
            const VecX nv = noise.col(a).array().square();
            accumulate(factorize(K, nv), VecX(values.col(a)));
        }
    } else {
        const VecX nv = detail::stack_point_major(noise).array().square();
        accumulate(factorize(K, nv), detail::stack_point_major(values));
    }
    return g;
}

struct FitResult {
    Hyperparams hypers;
    bool converged = false;
    int iterations = 0;
    double nlml_value = std::numeric_limits<double>::infinity();
};

struct FitOptions {
    int max_iterations = 200;
    double grad_tol = 1e-8;
    double log_sigma_f_min = std::log(1e-8);
    double log_sigma_f_max = std::log(1e8);
    double log_l_min = std::log(1e-6);
    double log_l_max = std::log(1e6);
};

/// Minimize nlml over (log sigma_f, log l) by BFGS with backtracking line
/// search, clamped to a broad positivity box. Returns best-so-far when the
/// iteration budget runs out.
inline FitResult fit_hypers(const std::vector<VecX>& locations, const MatX& values,
                            const MatX& noise, const Hyperparams& init,
                            KernelFamily family = KernelFamily::SeIndependent,
                            const FitOptions& opt = FitOptions()) {
    if (locations.size() < 5) throw InputError("fit_hypers: need at least 5 samples");
    Kernel k;
    k.family = family;
    k.input_dim = static_cast<int>(locations.front().size());

    auto clamp = [&](Eigen::Vector2d u) {
        u(0) = std::clamp(u(0), opt.log_sigma_f_min, opt.log_sigma_f_max);
        u(1) = std::clamp(u(1), opt.log_l_min, opt.log_l_max);
        return u;
    };
    auto eval = [&](const Eigen::Vector2d& u, Eigen::Vector2d* grad) {
        k.hyper.sigma_f = std::exp(u(0));
        k.hyper.length_scale = std::exp(u(1));
        try {
            const double f = nlml(locations, values, k, noise);
            if (grad) *grad = nlml_grad(locations, values, k, noise);
            return f;
        } catch (const SolverError&) {
            if (grad) grad->setZero();
            return std::numeric_limits<double>::infinity();
        }
    };

    Eigen::Vector2d u = clamp({std::log(std::max(init.sigma_f, 1e-8)), std::log(init.length_scale)});
    Eigen::Vector2d g;
    double f = eval(u, &g);
    if (!std::isfinite(f)) throw SolverError("fit_hypers: nlml not finite at initial hyperparameters");

    Eigen::Matrix2d H = Eigen::Matrix2d::Identity();  // inverse-Hessian approximation
    FitResult best;
    best.hypers = {std::exp(u(0)), std::exp(u(1))};
    best.nlml_value = f;

    int it = 0;
    for (; it < opt.max_iterations; ++it) {
        if (g.norm() < opt.grad_tol) {
            best.converged = true;
            break;
        }
        Eigen::Vector2d dir = -H * g;
        if (dir.dot(g) >= 0.0) dir = -g;  // safeguard
        double step = 1.0;
        Eigen::Vector2d u_new;
        double f_new = std::numeric_limits<double>::infinity();
        bool ok = false;
        for (int ls = 0; ls < 40; ++ls) {
            u_new = clamp(u + step * dir);
            f_new = eval(u_new, nullptr);
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * g.dot(u_new - u)) {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if (!ok) break;  // no further progress
        Eigen::Vector2d g_new;
        eval(u_new, &g_new);
        const Eigen::Vector2d s = u_new - u;
        const Eigen::Vector2d yv = g_new - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12) {
            const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
            H = (I - s * yv.transpose() / sy) * H * (I - yv * s.transpose() / sy) +
                s * s.transpose() / sy;
        } else {
            H = Eigen::Matrix2d::Identity();
        }
        u = u_new;
        f = f_new;
        g = g_new;
        if (f < best.nlml_value) {
            best.nlml_value = f;
            best.hypers = {std::exp(u(0)), std::exp(u(1))};
        }
        if (s.norm() < 1e-14) {
            best.converged = true;
            break;
        }
    }
    if (g.norm() < opt.grad_tol) best.converged = true;
    best.iterations = it;
    return best;
}

}  // namespace magslam
