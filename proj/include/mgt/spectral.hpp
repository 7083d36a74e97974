#pragma once

// Forward-only numerical linear algebra for the Delta operator
// A = I - beta*k*k^T and its relatives. Everything here is tape-free.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mgt/errors.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

// Gate strength and unit reflection direction. The direction is normalized at
// construction; callers never have to pre-normalize.
struct DeltaSpec {
    double beta;
    std::vector<double> k;  // unit L2 norm

    DeltaSpec(double beta_, std::vector<double> direction) : beta(beta_), k(std::move(direction)) {
        if (k.size() < 2) throw DimensionError("DeltaSpec: dimension must be >= 2, got " + std::to_string(k.size()));
        double norm = 0.0;
        for (double v : k) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw DegenerateInputError("DeltaSpec: direction vector has near-zero norm");
        for (double& v : k) v /= norm;
    }

    size_t dim() const { return k.size(); }
};

struct SingularSpectrum {
    std::vector<double> values;  // non-increasing, >= 0
    size_t source_rows = 0;
    size_t source_cols = 0;
};

struct DeltaSpectrum {
    std::vector<double> eigenvalues;  // sorted descending
    double determinant;
};

// --------------------------------------------------------------------------
// Jacobi eigensolver (symmetric, eigenvalues only)
// --------------------------------------------------------------------------

// Cyclic Jacobi sweeps on a symmetric matrix held in a flat row-major buffer.
// Convergence: every off-diagonal below `tol` relative to the largest input
// entry. Throws NumericalError with the residual if 100 sweeps do not do it.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, size_t n, double tol = 1e-12,
                                              int max_sweeps = 100) {
    if (n == 0) throw DimensionError("jacobi_eigenvalues: empty matrix");
    if (n == 1) return {a[0]};
    double scale = 0.0;
    for (double v : a) scale = std::max(scale, std::fabs(v));
    if (scale == 0.0) return std::vector<double>(n, 0.0);
    double thresh = tol * scale;

    auto off_diag_max = [&]() {
        double m = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) m = std::max(m, std::fabs(a[p * n + q]));
        return m;
    };

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_diag_max() < thresh) {
            std::vector<double> ev(n);
            for (size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
            std::sort(ev.begin(), ev.end(), std::greater<double>());
            return ev;
        }
        for (size_t p = 0; p < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::fabs(apq) < thresh) continue;
                double app = a[p * n + p], aqq = a[q * n + q];
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                double tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for (size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = aip - s * (aiq + tau * aip);
                    a[p * n + i] = a[i * n + p];
                    a[i * n + q] = aiq + s * (aip - tau * aiq);
                    a[q * n + i] = a[i * n + q];
                }
            }
        }
    }
    throw NumericalError("jacobi_eigenvalues: no convergence after 100 sweeps, off-diagonal residual " +
                         std::to_string(off_diag_max()));
}

inline std::vector<double> jacobi_eigenvalues(const Tensor& sym, double tol = 1e-12, int max_sweeps = 100) {
    if (sym.rank() != 2 || sym.shape()[0] != sym.shape()[1])
        throw DimensionError("jacobi_eigenvalues: expected square matrix, got " + sym.shape_string());
    return jacobi_eigenvalues(sym.vec(), sym.shape()[0], tol, max_sweeps);
}

// --------------------------------------------------------------------------
// Delta operator
// --------------------------------------------------------------------------

// A = I - beta * k * k^T, symmetric by construction.
inline Tensor delta_matrix(const DeltaSpec& spec) {
    size_t d = spec.dim();
    std::vector<double> a(d * d, 0.0);
    for (size_t i = 0; i < d; ++i) {
        for (size_t j = 0; j < d; ++j) a[i * d + j] = -spec.beta * spec.k[i] * spec.k[j];
        a[i * d + i] += 1.0;
    }
    return Tensor({d, d}, std::move(a));
}

// Closed-form spectrum: eigenvalue (1 - beta) on span{k}, 1 elsewhere, and
// det = 1 - beta.
inline DeltaSpectrum delta_spectrum(const DeltaSpec& spec) {
    std::vector<double> ev(spec.dim(), 1.0);
    ev.back() = 1.0 - spec.beta;
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return DeltaSpectrum{std::move(ev), 1.0 - spec.beta};
}

// Companion check: eigensolve delta_matrix numerically and report the worst
// deviation from the closed-form spectrum/determinant.
inline double delta_spectrum_check(const DeltaSpec& spec) {
    DeltaSpectrum predicted = delta_spectrum(spec);
    std::vector<double> numeric = jacobi_eigenvalues(delta_matrix(spec));
    double worst = 0.0;
    for (size_t i = 0; i < numeric.size(); ++i)
        worst = std::max(worst, std::fabs(numeric[i] - predicted.eigenvalues[i]));
    double det = 1.0;
    for (double v : numeric) det *= v;
    worst = std::max(worst, std::fabs(det - predicted.determinant));
    return worst;
}

// H = I - 2*k*k^T / ||k||^2. Input need not be normalized, only nonzero.
inline Tensor householder_matrix(const std::vector<double>& k) {
    if (k.size() < 2) throw DimensionError("householder_matrix: dimension must be >= 2");
    double norm2 = 0.0;
    for (double v : k) norm2 += v * v;
    if (norm2 < 1e-24) throw DegenerateInputError("householder_matrix: zero direction vector");
    size_t d = k.size();
    std::vector<double> h(d * d, 0.0);
    for (size_t i = 0; i < d; ++i) {
        for (size_t j = 0; j < d; ++j) h[i * d + j] = -2.0 * k[i] * k[j] / norm2;
        h[i * d + i] += 1.0;
    }
    return Tensor({d, d}, std::move(h));
}

// True iff A(beta, k) is orthogonal, i.e. |1 - beta| = 1 within 1e-12.
inline bool orthogonality_check(double beta) {
    return std::fabs(std::fabs(1.0 - beta) - 1.0) <= 1e-12;
}

// --------------------------------------------------------------------------
// Delta residual block, both algebraic forms
// --------------------------------------------------------------------------

// Applies the full delta block to X[d x dv] with write content v[dv]:
// matrix form A*X + beta*k*v^T and additive form X + beta*k*(v^T - k^T X).
// The two are computed independently and must agree to 1e-12; disagreement
// means the implementation itself is broken, not the input.
inline Tensor apply_delta_block(const Tensor& X, const DeltaSpec& spec, const Tensor& v) {
    size_t d = spec.dim();
    bool vector_case = (X.rank() == 1);
    size_t dv = vector_case ? 1 : X.shape()[1];
    if (X.shape()[0] != d)
        throw DimensionError("apply_delta_block: X " + X.shape_string() + " does not match direction dimension " +
                             std::to_string(d));
    if (v.size() != dv)
        throw DimensionError("apply_delta_block: v has " + std::to_string(v.size()) + " entries, expected " +
                             std::to_string(dv));

    const double* x = X.ptr();
    // k^T X  (row vector of length dv)
    std::vector<double> ktx(dv, 0.0);
    for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < dv; ++j) ktx[j] += spec.k[i] * x[i * dv + j];

    std::vector<double> additive(d * dv);
    for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < dv; ++j)
            additive[i * dv + j] = x[i * dv + j] + spec.beta * spec.k[i] * (v.at(j) - ktx[j]);

    Tensor A = delta_matrix(spec);
    std::vector<double> matrix_form(d * dv, 0.0);
    detail::matmul_accum(A.ptr(), x, matrix_form.data(), d, d, dv);
    for (size_t i = 0; i < d; ++i)
        for (size_t j = 0; j < dv; ++j) matrix_form[i * dv + j] += spec.beta * spec.k[i] * v.at(j);

    double worst = 0.0;
    for (size_t i = 0; i < d * dv; ++i) worst = std::max(worst, std::fabs(additive[i] - matrix_form[i]));
    if (worst > 1e-12)
        throw InternalConsistencyError("apply_delta_block: matrix and additive forms disagree by " +
                                       std::to_string(worst));
    return Tensor(X.shape(), std::move(additive));
}

// --------------------------------------------------------------------------
// Singular values via the smaller Gram matrix
// --------------------------------------------------------------------------

// Singular values of X[S x D]: eigensolve X^T X or X X^T (whichever is
// smaller), clamp tiny negative eigenvalues, take square roots. The Gram
// matrix is scaled to unit max entry before the eigensolve so the Jacobi
// tolerance behaves uniformly across input magnitudes.
inline SingularSpectrum singular_values(const Tensor& X) {
    if (X.rank() != 2) throw DimensionError("singular_values: expected 2-d tensor, got " + X.shape_string());
    size_t S = X.shape()[0], D = X.shape()[1];
    if (!X.all_finite()) throw NumericalError("singular_values: non-finite input");
    size_t n = std::min(S, D);

    std::vector<double> gram(n * n, 0.0);
    const double* x = X.ptr();
    if (D <= S) {
        // X^T X
        for (size_t r = 0; r < S; ++r)
            for (size_t i = 0; i < D; ++i) {
                double xi = x[r * D + i];
                if (xi == 0.0) continue;
                for (size_t j = 0; j < D; ++j) gram[i * D + j] += xi * x[r * D + j];
            }
    } else {
        // X X^T
        for (size_t i = 0; i < S; ++i)
            for (size_t j = 0; j < S; ++j) {
                double s = 0.0;
                for (size_t r = 0; r < D; ++r) s += x[i * D + r] * x[j * D + r];
                gram[i * S + j] = s;
            }
    }

    double scale = 0.0;
    for (double v : gram) scale = std::max(scale, std::fabs(v));
    SingularSpectrum out;
    out.source_rows = S;
    out.source_cols = D;
    if (scale == 0.0) {
        out.values.assign(n, 0.0);
        return out;
    }
    for (double& v : gram) v /= scale;
    std::vector<double> ev = jacobi_eigenvalues(std::move(gram), n);
    out.values.reserve(n);
    for (double lambda : ev) {
        if (lambda < -1e-10)
            throw NumericalError("singular_values: Gram eigenvalue " + std::to_string(lambda * scale) +
                                 " is negative beyond tolerance");
        // Eigenvalues below the solver's noise floor on the unit-scaled Gram
        // are indistinguishable from zero; squaring via the Gram matrix means
        // they carry no signal, so clamp before the square root.
        if (lambda < 1e-11) lambda = 0.0;
        out.values.push_back(std::sqrt(lambda * scale));
    }
    std::sort(out.values.begin(), out.values.end(), std::greater<double>());
    return out;
}

}  // namespace mgt
