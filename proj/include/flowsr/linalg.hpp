#pragma once

#include <cstdint>
#include <vector>

namespace flowsr {

class Rng;

namespace linalg {

/// LU factorization with partial pivoting of a dense n x n matrix
/// (row-major). Throws SingularError when a pivot falls below the
/// absolute tolerance.
struct Lu {
    int64_t n = 0;
    std::vector<double> lu;    // combined L (unit diagonal) and U
    std::vector<int64_t> piv;  // row permutation
    int sign = 1;              // permutation parity

    double log_abs_det() const;
    double det_sign() const;
    /// Solves A x = b in place.
    void solve(std::vector<double>& b) const;
};

Lu lu_decompose(const std::vector<double>& a, int64_t n, double pivot_tol = 1e-12);

/// Dense inverse via LU; throws SingularError on singular input.
std::vector<double> invert(const std::vector<double>& a, int64_t n);

/// Random rotation: Q from the QR factorization of a Gaussian matrix,
/// with columns sign-fixed so det(Q) = +1.
std::vector<double> random_rotation(int64_t n, Rng& rng);

/// log|det A| of a dense matrix (by LU).
double log_abs_det(const std::vector<double>& a, int64_t n);

}  // namespace linalg
}  // namespace flowsr
