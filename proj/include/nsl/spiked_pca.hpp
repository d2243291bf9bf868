#pragma once
#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>
#include <Eigen/Eigenvalues>
#include <nsl/errors.hpp>
#include <nsl/types.hpp>

namespace nsl {
namespace pca {

template <class Derived>
inline void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what)
{
    if (!m.allFinite()) {
        throw input_error(std::string(what) + " contains non-finite entries");
    }
}

/// Validates an n x q covariate matrix (rows are observations).
inline void check_covariates(const Matrix& W)
{
    if (W.rows() < 2) throw input_error("covariate matrix needs at least 2 rows");
    if (W.cols() < 1) throw input_error("covariate matrix needs at least 1 column");
    require_finite(W, "covariate matrix");
}

/**
 * Eigenvalues sorted in nonincreasing order with the paired eigenvectors as
 * columns. Every column is normalized so that its largest-magnitude entry is
 * nonnegative (first such entry on ties).
 */
struct EigenSystem
{
    Vector values;
    Matrix vectors;

    Index size() const { return values.size(); }
};

/// Flip `v` so that its largest-magnitude entry (lowest index on ties) is >= 0.
template <class Derived>
inline void apply_sign_convention(const Eigen::MatrixBase<Derived>& v_)
{
    auto& v = const_cast<Eigen::MatrixBase<Derived>&>(v_);
    Index arg = 0;
    double best = -1.0;
    for (Index i = 0; i < v.size(); ++i) {
        const double a = std::abs(v(i));
        if (a > best) {
            best = a;
            arg = i;
        }
    }
    if (v.size() > 0 && v(arg) < 0) v = -v;
}

/// S = n^{-1} W^T W. Columns are used as given (no centering).
inline Matrix sample_covariance(const Matrix& W)
{
    require_finite(W, "covariate matrix");
    const auto n = static_cast<double>(W.rows());
    const Index q = W.cols();
    Matrix S = Matrix::Zero(q, q);
    S.selfadjointView<Eigen::Lower>().rankUpdate(W.transpose(), 1.0 / n);
    S.triangularView<Eigen::StrictlyUpper>() = S.transpose();
    return S;
}

/// Full symmetric eigendecomposition, descending order, sign convention applied.
inline EigenSystem eigendecompose(const Matrix& S)
{
    if (S.rows() != S.cols()) throw input_error("eigendecompose: matrix is not square");
    require_finite(S, "eigendecompose input");
    const double scale = 1.0 + (S.size() ? S.cwiseAbs().maxCoeff() : 0.0);
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
        throw input_error("eigendecompose: matrix is not symmetric");
    }
    const Matrix sym = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    if (solver.info() != Eigen::Success) {
        throw numeric_error("eigendecompose: symmetric eigensolver did not converge");
    }
    const Index q = S.rows();
    EigenSystem out;
    out.values = solver.eigenvalues().reverse();
    out.vectors = solver.eigenvectors().rowwise().reverse();
    for (Index i = 0; i < q; ++i) apply_sign_convention(out.vectors.col(i));
    return out;
}

/**
 * Leading K sample principal components of W.
 *
 * When q > n the n x n dual matrix S_D = n^{-1} W W^T is decomposed instead; it
 * shares the nonzero spectrum of S, and the primal directions are recovered as
 * W^T v_i / |W^T v_i|.
 */
inline EigenSystem leading_components(const Matrix& W, Index K)
{
    check_covariates(W);
    const Index n = W.rows();
    const Index q = W.cols();
    if (K < 1 || K > q) throw input_error("leading_components: K out of range");
    if (q <= n) {
        EigenSystem full = eigendecompose(sample_covariance(W));
        return {full.values.head(K), full.vectors.leftCols(K)};
    }
    if (K >= n) throw input_error("leading_components: K must be below n when q > n");

    Matrix SD = Matrix::Zero(n, n);
    SD.selfadjointView<Eigen::Lower>().rankUpdate(W, 1.0 / static_cast<double>(n));
    SD.triangularView<Eigen::StrictlyUpper>() = SD.transpose();
    const EigenSystem dual = eigendecompose(SD);

    EigenSystem out;
    out.values = dual.values.head(K);
    out.vectors = W.transpose() * dual.vectors.leftCols(K);
    for (Index i = 0; i < K; ++i) {
        const double norm = out.vectors.col(i).norm();
        if (!(norm > 0.0)) {
            throw degenerate_factor_error(static_cast<std::size_t>(i),
                "leading_components: zero sample eigenvalue at index " + std::to_string(i));
        }
        out.vectors.col(i) /= norm;
        apply_sign_convention(out.vectors.col(i));
    }
    return out;
}

/// Estimated latent factors: columns W u_i rescaled to L2 norm sqrt(n).
struct ScoreSet
{
    Matrix scores;
    Vector raw_norms;     ///< |W u_i|_2
    Vector back_scalars;  ///< sqrt(n) / |W u_i|_2

    Index count() const { return scores.cols(); }
};

inline ScoreSet principal_scores(const Matrix& W, const EigenSystem& eig, Index K)
{
    check_covariates(W);
    const Index n = W.rows();
    if (K < 1 || K >= n) throw input_error("principal_scores: need 1 <= K < n");
    if (K > eig.vectors.cols() || eig.vectors.rows() != W.cols()) {
        throw input_error("principal_scores: eigen system does not match covariates");
    }
    const double root_n = std::sqrt(static_cast<double>(n));
    ScoreSet out;
    out.scores = W * eig.vectors.leftCols(K);
    out.raw_norms.resize(K);
    out.back_scalars.resize(K);
    for (Index i = 0; i < K; ++i) {
        const double norm = out.scores.col(i).norm();
        if (!(norm > 0.0)) {
            throw degenerate_factor_error(static_cast<std::size_t>(i),
                "principal_scores: direction " + std::to_string(i) + " has zero image W u");
        }
        out.raw_norms(i) = norm;
        out.back_scalars(i) = root_n / norm;
        out.scores.col(i) *= out.back_scalars(i);
    }
    return out;
}

/// Scores of new rows along fixed directions, scaled by fixed back-transform scalars.
inline Matrix project_scores(const Matrix& W_new, const Matrix& directions, const Vector& scalars)
{
    if (W_new.cols() != directions.rows() || directions.cols() != scalars.size()) {
        throw input_error("project_scores: dimension mismatch");
    }
    return (W_new * directions) * scalars.asDiagonal();
}

namespace detail {

inline double clamped_acos(double c)
{
    return std::acos(std::clamp(c, 0.0, 1.0));
}

} // namespace detail

/// Angle between a unit vector and span(group columns); group columns must be orthonormal.
inline double subspace_angle(const Vector& u_hat, const Matrix& group)
{
    if (std::abs(u_hat.norm() - 1.0) > 1e-8) throw input_error("subspace_angle: u_hat is not a unit vector");
    if (group.rows() != u_hat.size()) throw input_error("subspace_angle: dimension mismatch");
    const Index k = group.cols();
    if (k > 0) {
        const Matrix gram = group.transpose() * group;
        if ((gram - Matrix::Identity(k, k)).cwiseAbs().maxCoeff() > 1e-8) {
            throw input_error("subspace_angle: group vectors are not orthonormal");
        }
    }
    const Vector p = group.transpose() * u_hat;
    return detail::clamped_acos(std::sqrt(p.squaredNorm()));
}

/// Angle between score vectors W u_hat and W u, taken in [0, pi/2].
inline double score_angle(const Matrix& W, const Vector& u_hat, const Vector& u)
{
    if (W.cols() != u_hat.size() || W.cols() != u.size()) throw input_error("score_angle: dimension mismatch");
    const Vector a = W * u_hat;
    const Vector b = W * u;
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) {
        throw degenerate_factor_error(0, "score_angle: zero score vector");
    }
    return detail::clamped_acos(std::abs(a.dot(b)) / (na * nb));
}

/**
 * Eigenvalue-group layout of a spiked covariance: K spikes split into m groups
 * whose eigenvalues grow like q^{alpha_l}, followed by q - K bounded ones.
 */
struct SpikedStructure
{
    std::vector<Index> group_sizes;
    std::vector<double> exponents;
    double tail_exponent = 0.0;
    std::vector<double> limits;  ///< optional c_i per spiked index (empty if unknown)
    Index q = 0;

    Index groups() const { return static_cast<Index>(group_sizes.size()); }

    Index spikes() const
    {
        Index K = 0;
        for (auto k : group_sizes) K += k;
        return K;
    }

    /// Minimum gap between successive group exponents (0 when m == 1).
    double delta() const
    {
        double d = 0.0;
        for (std::size_t l = 0; l + 1 < exponents.size(); ++l) {
            const double gap = exponents[l] - exponents[l + 1];
            d = (l == 0) ? gap : std::min(d, gap);
        }
        return d;
    }

    void validate() const
    {
        if (group_sizes.empty() || group_sizes.size() != exponents.size()) {
            throw input_error("SpikedStructure: need one exponent per group");
        }
        for (auto k : group_sizes) {
            if (k < 1) throw input_error("SpikedStructure: group sizes must be positive");
        }
        for (std::size_t l = 0; l < exponents.size(); ++l) {
            if (!(exponents[l] > 1.0)) throw input_error("SpikedStructure: exponents must exceed 1");
            if (l > 0 && !(exponents[l - 1] > exponents[l])) {
                throw input_error("SpikedStructure: exponents must be strictly decreasing");
            }
        }
        if (spikes() > q) throw input_error("SpikedStructure: more spikes than dimensions");
        if (!limits.empty() && static_cast<Index>(limits.size()) != spikes()) {
            throw input_error("SpikedStructure: limits must have one entry per spike");
        }
    }

    /// Zero-based indices of group l (1-based, l = m + 1 is the non-spiked tail).
    IndexList index_group(Index l) const
    {
        if (l < 1 || l > groups() + 1) throw input_error("index_group: group out of range");
        Index start = 0;
        for (Index j = 0; j + 1 < l; ++j) start += group_sizes[j];
        const Index size = (l == groups() + 1) ? q - spikes() : group_sizes[l - 1];
        IndexList out(static_cast<std::size_t>(size));
        for (Index i = 0; i < size; ++i) out[i] = start + i;
        return out;
    }
};

/**
 * A(t) = (sum_{l>t} k_l q^{alpha_l} + k_{m+1}) K^{-1} q^{alpha - alpha_t},
 * the per-group rate driving the eigenvector angle bound. `t` is 1-based.
 */
inline double rate_bound(const SpikedStructure& s, Index t)
{
    s.validate();
    const Index m = s.groups();
    if (t < 1 || t > m) throw input_error("rate_bound: group index out of range");
    const double q = static_cast<double>(s.q);
    const double K = static_cast<double>(s.spikes());
    double sum = static_cast<double>(s.q - s.spikes());
    for (Index l = t; l < m; ++l) {
        sum += static_cast<double>(s.group_sizes[l]) * std::pow(q, s.exponents[l]);
    }
    return sum / K * std::pow(q, s.tail_exponent - s.exponents[t - 1]);
}

/// Eigenvalue-ratio heuristic: argmax_{i < k_max} lambda_i / lambda_{i+1} (returned 1-based).
inline Index eigen_ratio_count(const Vector& eigenvalues, Index k_max)
{
    const Index limit = std::min<Index>(k_max, eigenvalues.size() - 1);
    if (limit < 1) throw input_error("eigen_ratio_count: need at least two eigenvalues");
    Index best = 1;
    double best_ratio = -1.0;
    for (Index i = 0; i < limit; ++i) {
        if (!(eigenvalues(i + 1) > 0.0)) break;
        const double r = eigenvalues(i) / eigenvalues(i + 1);
        if (r > best_ratio) {
            best_ratio = r;
            best = i + 1;
        }
    }
    return best;
}

} // namespace pca
} // namespace nsl
