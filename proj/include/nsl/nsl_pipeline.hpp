#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>
#include <Eigen/Eigenvalues>
#include <nsl/errors.hpp>
#include <nsl/penalized_regression.hpp>
#include <nsl/penalty.hpp>
#include <nsl/spiked_pca.hpp>
#include <nsl/types.hpp>

namespace nsl {

struct NslConfig
{
    Index num_factors = 10;
    PenaltySpec penalty{};       ///< support_cap_M == 0 means "derive from n and p"
    double support_c_tilde = 1.5;
    bool center_W = false;
    bool clr_W = false;
    double validation_fraction = 0.4;
    std::uint64_t seed = 12345;
    int grid_size = 100;
    double grid_ratio = 1e-3;
    regression::FitOptions fit{};

    void validate(Index n) const
    {
        if (num_factors < 1 || num_factors >= n) throw input_error("config: need 1 <= K < n");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
            throw input_error("config: validation fraction must lie in (0,1)");
        }
        if (grid_size < 1) throw input_error("config: grid size must be positive");
    }
};

/**
 * Result of an NSL fit. `estimate.gamma` is in rescaled-factor coordinates;
 * the prediction for new rows uses `directions` and `scores.back_scalars`
 * from the training rows.
 */
struct NslFit
{
    regression::CoefficientEstimate estimate;
    pca::ScoreSet scores;
    Vector eigenvalues;      ///< top-K sample eigenvalues of the training covariates
    Matrix directions;       ///< q x K sample principal components
    Vector W_means;          ///< column means removed from W (empty when not centered)
    bool clr_W = false;
    double lambda_selected = 0.0;
    double sigma_hat = 0.0;
    std::map<std::string, double> diagnostics;
    IndexList train_rows;
    IndexList validation_rows;
    Vector fitted;           ///< X beta + F_hat gamma on the training rows
    Vector col_norms;

    /// gamma on the scale of the unnormalized scores W u_i.
    Vector gamma_original_scale() const { return estimate.gamma.cwiseProduct(scores.back_scalars); }
};

/// Row-wise centered log-ratio: log w_ij - mean_j log w_ij.
inline Matrix clr_transform(const Matrix& W)
{
    if (!W.allFinite()) throw input_error("clr_transform: non-finite entries");
    if ((W.array() <= 0.0).any()) throw input_error("clr_transform: entries must be strictly positive");
    Matrix L = W.array().log().matrix();
    const Vector row_means = L.rowwise().mean();
    L.colwise() -= row_means;
    return L;
}

/// Replaces zero counts with `pseudocount` so the CLR is defined.
inline Matrix replace_zeros(Matrix counts, double pseudocount = 0.5)
{
    if (!(pseudocount > 0.0)) throw input_error("replace_zeros: pseudocount must be positive");
    for (Index i = 0; i < counts.size(); ++i) {
        if (counts.data()[i] < 0.0) throw input_error("replace_zeros: negative count");
        if (counts.data()[i] == 0.0) counts.data()[i] = pseudocount;
    }
    return counts;
}

namespace detail {

inline Matrix select_rows(const Matrix& M, const IndexList& rows)
{
    Matrix out(static_cast<Index>(rows.size()), M.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = M.row(rows[i]);
    return out;
}

inline Vector select_rows(const Vector& v, const IndexList& rows)
{
    Vector out(static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = v(rows[i]);
    return out;
}

inline Matrix prepare_covariates(const Matrix& W, bool clr, const Vector& means)
{
    Matrix out = clr ? clr_transform(W) : W;
    if (means.size() > 0) {
        if (means.size() != out.cols()) throw input_error("covariate column count differs from training");
        out.rowwise() -= means.transpose();
    }
    return out;
}

} // namespace detail

/// Fit on (y, X, W) and tune lambda on an explicit held-out set.
inline NslFit fit_with_validation(const Vector& y, const Matrix& X, const Matrix& W, const Vector& y_val,
                                  const Matrix& X_val, const Matrix& W_val, const NslConfig& config)
{
    const Index n = y.size();
    if (X.rows() != n || W.rows() != n) throw input_error("fit: y, X and W must share the row count");
    if (y_val.size() != X_val.rows() || y_val.size() != W_val.rows()) {
        throw input_error("fit: validation y, X and W must share the row count");
    }
    if (X_val.cols() != X.cols() || W_val.cols() != W.cols()) throw input_error("fit: validation column counts differ");
    config.validate(n);

    NslFit out;
    out.clr_W = config.clr_W;
    Matrix Wt = config.clr_W ? clr_transform(W) : W;
    if (config.center_W) {
        out.W_means = Wt.colwise().mean().transpose();
        Wt.rowwise() -= out.W_means.transpose();
    }
    const Index K = config.num_factors;
    const auto eig = pca::leading_components(Wt, K);
    out.scores = pca::principal_scores(Wt, eig, K);
    out.eigenvalues = eig.values;
    out.directions = eig.vectors;

    auto design = regression::AugmentedDesign::training(X, out.scores.scores);
    PenaltySpec spec = config.penalty;
    if (spec.support_cap_M == 0) spec.support_cap_M = default_support_cap(n, X.cols(), config.support_c_tilde);
    const auto grid = regression::lambda_grid(y, design, config.grid_size, config.grid_ratio);
    auto fit_opts = config.fit;
    fit_opts.seed = config.seed;
    const auto path = regression::fit_path(y, design, spec, grid, fit_opts);

    const Matrix W_val_t = detail::prepare_covariates(W_val, config.clr_W, out.W_means);
    const auto val_design = regression::AugmentedDesign::evaluation(
        X_val, pca::project_scores(W_val_t, out.directions, out.scores.back_scalars), design.col_norms);
    out.estimate = regression::tune(path, y_val, val_design);
    out.lambda_selected = out.estimate.lambda_used;
    out.col_norms = design.col_norms;
    out.fitted = design.linear_predictor(out.estimate.beta, out.estimate.gamma);

    const auto errs = regression::validation_errors(path, y_val, val_design);
    out.diagnostics["validation_mse"] = *std::min_element(errs.begin(), errs.end());
    out.diagnostics["path_length"] = static_cast<double>(path.size());
    out.diagnostics["support_size"] = static_cast<double>(out.estimate.support.size());
    out.diagnostics["support_cap_M"] = static_cast<double>(spec.support_cap_M);
    out.diagnostics["dropped_columns"] = static_cast<double>(design.dropped.size());
    out.diagnostics["converged"] = out.estimate.converged ? 1.0 : 0.0;
    if (K >= 2) out.diagnostics["eigen_ratio_count"] = static_cast<double>(pca::eigen_ratio_count(eig.values, K - 1));
    try {
        out.sigma_hat = regression::estimate_sigma(y, design, out.estimate);
    } catch (const input_error&) {
        out.sigma_hat = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

/// Seeded random split into training and validation rows, then fit_with_validation.
inline NslFit fit(const Vector& y, const Matrix& X, const Matrix& W, const NslConfig& config)
{
    const Index n = y.size();
    if (X.rows() != n || W.rows() != n) throw input_error("fit: y, X and W must share the row count");
    if (!(config.validation_fraction > 0.0 && config.validation_fraction < 1.0)) {
        throw input_error("config: validation fraction must lie in (0,1)");
    }
    const auto n_val = static_cast<Index>(std::llround(config.validation_fraction * static_cast<double>(n)));
    const Index n_train = n - n_val;
    if (n_val < 1 || n_train < 2) throw input_error("fit: split leaves too few rows");
    if (config.num_factors >= n_train) throw input_error("fit: K must be below the training row count");

    IndexList perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(config.seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    IndexList train(perm.begin(), perm.begin() + n_train);
    IndexList val(perm.begin() + n_train, perm.end());
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());

    auto out = fit_with_validation(detail::select_rows(y, train), detail::select_rows(X, train),
                                   detail::select_rows(W, train), detail::select_rows(y, val),
                                   detail::select_rows(X, val), detail::select_rows(W, val), config);
    out.train_rows = std::move(train);
    out.validation_rows = std::move(val);
    return out;
}

/// y_hat = X_new beta + (W_new U_K)(back_scalars .* gamma), with training directions and scalars.
inline Vector predict(const NslFit& fit, const Matrix& X_new, const Matrix& W_new)
{
    if (X_new.cols() != fit.estimate.beta.size()) throw input_error("predict: predictor column count differs from training");
    if (W_new.cols() != fit.directions.rows()) throw input_error("predict: covariate column count differs from training");
    if (X_new.rows() != W_new.rows()) throw input_error("predict: X and W row counts differ");
    const Matrix Wt = detail::prepare_covariates(W_new, fit.clr_W, fit.W_means);
    Vector out = X_new * fit.estimate.beta;
    out.noalias() += pca::project_scores(Wt, fit.directions, fit.scores.back_scalars) * fit.estimate.gamma;
    return out;
}

/// Smallest tau with a tau-column submatrix of n^{-1/2} X~ having a singular value below c.
struct SparkResult
{
    Index tau = 0;
    bool lower_bound_only = false;  ///< true: nothing found up to the cap, so tau >= cap
};

inline SparkResult robust_spark(const Matrix& design, double c, Index cap)
{
    if (cap > 14) throw refusal_error("robust_spark: cap above 14 is refused");
    if (cap < 1) throw input_error("robust_spark: cap must be positive");
    if (!(c > 0.0 && c < 1.0)) throw input_error("robust_spark: bound c must lie in (0,1)");
    if (!design.allFinite()) throw input_error("robust_spark: non-finite design");
    const Index p = design.cols();

    // Gram matrix of the unit-norm columns; a zero column stays zero.
    Matrix B = design;
    for (Index j = 0; j < p; ++j) {
        const double norm = B.col(j).norm();
        if (norm > 0.0) B.col(j) /= norm;
    }
    const Matrix G = B.transpose() * B;
    const double c2 = c * c;

    IndexList subset;
    std::function<bool(Index, Index)> search = [&](Index from, Index size) -> bool {
        if (static_cast<Index>(subset.size()) == size) {
            Matrix sub(size, size);
            for (Index a = 0; a < size; ++a)
                for (Index b = 0; b < size; ++b) sub(a, b) = G(subset[a], subset[b]);
            Eigen::SelfAdjointEigenSolver<Matrix> es(sub, Eigen::EigenvaluesOnly);
            return es.eigenvalues()(0) < c2;
        }
        for (Index j = from; j < p; ++j) {
            subset.push_back(j);
            if (search(j + 1, size)) return true;
            subset.pop_back();
        }
        return false;
    };
    for (Index size = 1; size <= std::min(cap, p); ++size) {
        subset.clear();
        if (search(0, size)) return {size, false};
    }
    return {cap, true};
}

/**
 * Inputs for the theory diagnostics. Synthetic data only: the population
 * directions must be known.
 */
struct ConditionContext
{
    Matrix W;                ///< n x q covariates used for the scores
    Matrix sample_directions;     ///< q x K
    Matrix population_directions; ///< q x K
    Index p = 0;
    double c = 0.5;      ///< robust-spark bound on (X, F)
    double c2 = 1.2;
    double T = 50.0;
    Index s = 0;         ///< |supp beta0| + |supp gamma0|
    double b0 = 0.0;     ///< minimum signal strength
    double L = 1.0;
    std::optional<double> c1;  ///< restricted-eigenvalue constant; defaults to the spark-bound surrogate
};

inline std::map<std::string, double> condition_diagnostics(const ConditionContext& ctx)
{
    if (ctx.population_directions.size() == 0) {
        throw refusal_error("condition_diagnostics: population directions are required (synthetic data only)");
    }
    if (ctx.population_directions.rows() != ctx.W.cols() || ctx.sample_directions.rows() != ctx.W.cols() ||
        ctx.population_directions.cols() != ctx.sample_directions.cols()) {
        throw input_error("condition_diagnostics: direction dimensions disagree with W");
    }
    const auto n = static_cast<double>(ctx.W.rows());
    const auto K = static_cast<double>(ctx.sample_directions.cols());
    const auto p = static_cast<double>(ctx.p);
    const double logn = std::log(n);
    const double logp = std::log(p);

    std::map<std::string, double> out;
    const double bound = 1.0 - ctx.c2 * ctx.c2 * logn / (8.0 * K * K * ctx.T * ctx.T * n);
    out["factor_angle_bound"] = bound;
    double min_cos = 1.0;
    for (Index j = 0; j < ctx.sample_directions.cols(); ++j) {
        const double omega = pca::score_angle(ctx.W, ctx.sample_directions.col(j), ctx.population_directions.col(j));
        const double cosv = std::cos(omega);
        out["cos_omega_" + std::to_string(j + 1)] = cosv;
        min_cos = std::min(min_cos, cosv);
    }
    out["factor_angle_min_cos"] = min_cos;
    out["factor_angle_holds"] = min_cos >= bound ? 1.0 : 0.0;

    const double surrogate = ctx.c - ctx.c2 / (2.0 * ctx.T) * std::sqrt(logn / (n * K));
    out["spark_bound_surrogate"] = surrogate;
    const double c1 = ctx.c1.value_or(surrogate);
    out["c1"] = c1;

    const double rate = std::sqrt((2.0 * static_cast<double>(ctx.s) + 1.0) * logp / n);
    const double threshold = std::max(std::sqrt(2.0) / c1, 1.0) / c1 * ctx.c2 * ctx.L * rate;
    out["signal_threshold"] = threshold;
    out["signal_b0"] = ctx.b0;
    out["signal_holds"] = ctx.b0 > threshold ? 1.0 : 0.0;

    const double lower = ctx.c2 / c1 * rate;
    const double upper = ctx.b0 / ctx.L * std::min(1.0, c1 / std::sqrt(2.0));
    out["lambda_window_lower"] = lower;
    out["lambda_window_upper"] = upper;
    out["lambda_window_nonempty"] = lower < upper ? 1.0 : 0.0;
    return out;
}

} // namespace nsl
