#include "flowsr/linalg.hpp"

#include <cmath>

#include "flowsr/errors.hpp"
#include "flowsr/rng.hpp"

namespace flowsr {
namespace linalg {

double Lu::log_abs_det() const {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::log(std::fabs(lu[static_cast<size_t>(i * n + i)]));
    return s;
}

double Lu::det_sign() const {
    double s = sign;
    for (int64_t i = 0; i < n; ++i) {
        if (lu[static_cast<size_t>(i * n + i)] < 0) s = -s;
    }
    return s;
}

void Lu::solve(std::vector<double>& b) const {
    // apply permutation
    for (int64_t i = 0; i < n; ++i) {
        int64_t p = piv[static_cast<size_t>(i)];
        if (p != i) std::swap(b[static_cast<size_t>(i)], b[static_cast<size_t>(p)]);
    }
    // forward substitution (L has unit diagonal)
    for (int64_t i = 1; i < n; ++i) {
        double s = b[static_cast<size_t>(i)];
        for (int64_t j = 0; j < i; ++j) s -= lu[static_cast<size_t>(i * n + j)] * b[static_cast<size_t>(j)];
        b[static_cast<size_t>(i)] = s;
    }
    // back substitution
    for (int64_t i = n - 1; i >= 0; --i) {
        double s = b[static_cast<size_t>(i)];
        for (int64_t j = i + 1; j < n; ++j) s -= lu[static_cast<size_t>(i * n + j)] * b[static_cast<size_t>(j)];
        b[static_cast<size_t>(i)] = s / lu[static_cast<size_t>(i * n + i)];
    }
}

Lu lu_decompose(const std::vector<double>& a, int64_t n, double pivot_tol) {
    Lu f;
    f.n = n;
    f.lu = a;
    f.piv.resize(static_cast<size_t>(n));
    auto& m = f.lu;
    for (int64_t k = 0; k < n; ++k) {
        int64_t p = k;
        double best = std::fabs(m[static_cast<size_t>(k * n + k)]);
        for (int64_t i = k + 1; i < n; ++i) {
            double v = std::fabs(m[static_cast<size_t>(i * n + k)]);
            if (v > best) {
                best = v;
                p = i;
            }
        }
        if (best < pivot_tol) throw SingularError("matrix is singular to working precision");
        f.piv[static_cast<size_t>(k)] = p;
        if (p != k) {
            for (int64_t j = 0; j < n; ++j)
                std::swap(m[static_cast<size_t>(k * n + j)], m[static_cast<size_t>(p * n + j)]);
            f.sign = -f.sign;
        }
        double pivot = m[static_cast<size_t>(k * n + k)];
        for (int64_t i = k + 1; i < n; ++i) {
            double factor = m[static_cast<size_t>(i * n + k)] / pivot;
            m[static_cast<size_t>(i * n + k)] = factor;
            for (int64_t j = k + 1; j < n; ++j)
                m[static_cast<size_t>(i * n + j)] -= factor * m[static_cast<size_t>(k * n + j)];
        }
    }
    return f;
}

std::vector<double> invert(const std::vector<double>& a, int64_t n) {
    Lu f = lu_decompose(a, n);
    std::vector<double> inv(static_cast<size_t>(n * n), 0.0);
    std::vector<double> col(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[static_cast<size_t>(j)] = 1.0;
        f.solve(col);
        for (int64_t i = 0; i < n; ++i) inv[static_cast<size_t>(i * n + j)] = col[static_cast<size_t>(i)];
    }
    return inv;
}

std::vector<double> random_rotation(int64_t n, Rng& rng) {
    // Gram-Schmidt QR of a Gaussian matrix; columns of Q are the result.
    std::vector<double> g(static_cast<size_t>(n * n));
    for (auto& v : g) v = rng.gaussian();
    std::vector<double> q(static_cast<size_t>(n * n), 0.0);
    for (int64_t j = 0; j < n; ++j) {
        std::vector<double> v(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = g[static_cast<size_t>(i * n + j)];
        for (int64_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += q[static_cast<size_t>(i * n + k)] * v[static_cast<size_t>(i)];
            for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] -= dot * q[static_cast<size_t>(i * n + k)];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            // astronomically unlikely; retry with a fresh matrix
            return random_rotation(n, rng);
        }
        for (int64_t i = 0; i < n; ++i) q[static_cast<size_t>(i * n + j)] = v[static_cast<size_t>(i)] / norm;
    }
    // fix determinant sign to +1 by flipping the last column if needed
    Lu f = lu_decompose(q, n);
    if (f.det_sign() < 0) {
        for (int64_t i = 0; i < n; ++i) q[static_cast<size_t>(i * n + (n - 1))] = -q[static_cast<size_t>(i * n + (n - 1))];
    }
    return q;
}

double log_abs_det(const std::vector<double>& a, int64_t n) { return lu_decompose(a, n).log_abs_det(); }

}  // namespace linalg
}  // namespace flowsr
