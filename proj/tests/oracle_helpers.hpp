#pragma once

// Test-only oracles, kept independent of the closed forms they check.

#include <Eigen/Dense>
#include <functional>

#include "fsadapt/network.hpp"

namespace fsadapt::test {

inline Mat fd_hessian(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    const Eigen::Index n = x.size();
    Mat H(n, n);
    Vec p = x;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double xi = p(i), xj = p(j);
            p(i) += h;
            p(j) += h;
            const double fpp = f(p);
            p(i) = xi;
            p(j) = xj;
            p(i) += h;
            p(j) -= h;
            const double fpm = f(p);
            p(i) = xi;
            p(j) = xj;
            p(i) -= h;
            p(j) += h;
            const double fmp = f(p);
            p(i) = xi;
            p(j) = xj;
            p(i) -= h;
            p(j) -= h;
            const double fmm = f(p);
            p(i) = xi;
            p(j) = xj;
            H(i, j) = H(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
        }
    }
    return H;
}

// Numeric minimizer for smooth strongly convex objectives: damped Newton on
// central-finite-difference derivatives (exact for the quadratic surrogates
// checked here, up to rounding).
inline Vec numeric_argmin(const std::function<double(const Vec&)>& f, Vec x, int iters = 30,
                          double grad_tol = 1e-11, double fd_step = 1e-2) {
    for (int it = 0; it < iters; ++it) {
        Vec g = nn::finite_diff_fn(f, x, fd_step);
        if (g.norm() < grad_tol) break;
        Mat H = fd_hessian(f, x, fd_step);
        Vec d = H.ldlt().solve(g);
        if (!d.allFinite() || g.dot(d) <= 0.0) d = g;  // fall back to steepest descent
        double step = 1.0;
        const double fx = f(x);
        while (step > 1e-18 && f(x - step * d) > fx - 1e-4 * step * g.dot(d)) step *= 0.5;
        x -= step * d;
    }
    return x;
}

inline Vec random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
    return Vec::NullaryExpr(n, [&] { return scale * rng.normal(); });
}

}  // namespace fsadapt::test
