#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>
#include <Eigen/QR>
#include <nsl/errors.hpp>
#include <nsl/penalty.hpp>
#include <nsl/types.hpp>

namespace nsl {
namespace regression {

/**
 * Observable predictors X joined with estimated factor scores F_hat.
 *
 * `col_norms(j) = |x_j|_2 / sqrt(n)`. The penalty acts on beta*_j = beta_j * col_norms(j),
 * i.e. on the coefficients of the design whose columns all have norm sqrt(n).
 * Columns with zero norm are listed in `dropped` and never enter a fit.
 */
struct AugmentedDesign
{
    Matrix X;
    Matrix F_hat;
    Vector col_norms;
    IndexList dropped;

    Index n() const { return X.rows(); }
    Index p() const { return X.cols(); }
    Index K() const { return F_hat.cols(); }
    Index width() const { return p() + K(); }

    /// Design for fitting: computes column norms and checks factor scaling.
    static AugmentedDesign training(Matrix X, Matrix F_hat)
    {
        AugmentedDesign d;
        d.X = std::move(X);
        d.F_hat = std::move(F_hat);
        if (d.F_hat.cols() > 0 && d.F_hat.rows() != d.X.rows()) {
            throw input_error("AugmentedDesign: X and F_hat row counts differ");
        }
        if (d.F_hat.cols() == 0) d.F_hat.resize(d.X.rows(), 0);
        if (d.X.rows() < 2) throw input_error("AugmentedDesign: need at least 2 rows");
        if (!d.X.allFinite() || !d.F_hat.allFinite()) throw input_error("AugmentedDesign: non-finite entries");
        const double root_n = std::sqrt(static_cast<double>(d.n()));
        d.col_norms.resize(d.p());
        for (Index j = 0; j < d.p(); ++j) {
            d.col_norms(j) = d.X.col(j).norm() / root_n;
            if (!(d.col_norms(j) > 0.0)) d.dropped.push_back(j);
        }
        // An all-zero factor column is allowed and simply held at gamma_k = 0.
        for (Index k = 0; k < d.K(); ++k) {
            const double norm = d.F_hat.col(k).norm();
            if (norm == 0.0) {
                d.dropped.push_back(d.p() + k);
            } else if (std::abs(norm - root_n) > 1e-8 * std::max(1.0, root_n)) {
                throw input_error("AugmentedDesign: factor column " + std::to_string(k) + " is not scaled to norm sqrt(n)");
            }
        }
        return d;
    }

    /// Design for evaluation only (validation / test rows); reuses training column norms.
    static AugmentedDesign evaluation(Matrix X, Matrix F, const Vector& train_col_norms)
    {
        AugmentedDesign d;
        d.X = std::move(X);
        d.F_hat = std::move(F);
        if (d.F_hat.cols() == 0) d.F_hat.resize(d.X.rows(), 0);
        if (d.F_hat.rows() != d.X.rows() || train_col_norms.size() != d.X.cols()) {
            throw input_error("AugmentedDesign: evaluation design dimensions disagree");
        }
        d.col_norms = train_col_norms;
        return d;
    }

    /// X beta + F_hat gamma.
    Vector linear_predictor(const Vector& beta, const Vector& gamma) const
    {
        if (beta.size() != p() || gamma.size() != K()) throw input_error("linear_predictor: coefficient size mismatch");
        Vector out = X * beta;
        if (K() > 0) out.noalias() += F_hat * gamma;
        return out;
    }
};

struct CoefficientEstimate
{
    Vector beta;          ///< original scale
    Vector gamma;         ///< rescaled-factor coordinates
    IndexList support;    ///< nonzeros; indices >= p refer to gamma
    double lambda_used = 0.0;
    double objective_value = 0.0;
    bool converged = true;
    int sweeps = 0;
    std::string diagnostic;

    Index p() const { return beta.size(); }
    Index K() const { return gamma.size(); }

    IndexList beta_support() const
    {
        IndexList out;
        for (auto j : support) if (j < p()) out.push_back(j);
        return out;
    }

    IndexList gamma_support() const
    {
        IndexList out;
        for (auto j : support) if (j >= p()) out.push_back(j - p());
        return out;
    }
};

/// (2n)^{-1} |y - X beta - F gamma|^2 + sum_j p(|beta*_j|) + sum_k p(|gamma_k|).
inline double objective(const Vector& y, const AugmentedDesign& design, const CoefficientEstimate& est, const PenaltySpec& spec)
{
    if (y.size() != design.n()) throw input_error("objective: response length differs from design rows");
    if (est.beta.size() != design.p() || est.gamma.size() != design.K()) {
        throw input_error("objective: coefficient dimensions differ from design");
    }
    const Vector r = y - design.linear_predictor(est.beta, est.gamma);
    double value = r.squaredNorm() / (2.0 * static_cast<double>(design.n()));
    for (Index j = 0; j < design.p(); ++j) value += penalty_value(spec, std::abs(est.beta(j) * design.col_norms(j)));
    for (Index k = 0; k < design.K(); ++k) value += penalty_value(spec, std::abs(est.gamma(k)));
    return value;
}

struct FitOptions
{
    int max_sweeps = 1000;
    double tol = 1e-7;
    /// Multi-starts per lambda for nonconvex families: zero, lasso solution, then random supports.
    int starts = 5;
    std::uint64_t seed = 12345;
    /// Called with the objective after every coordinate sweep (testing hook).
    std::function<void(double)> on_sweep;
};

namespace detail {

/// Coordinate descent on the standardized design (all usable columns have norm sqrt(n)).
class CoordinateSolver
{
public:
    CoordinateSolver(const Matrix& D, const Vector& y, Index p, std::vector<char> usable, const FitOptions& opts)
        : D_(D), y_(y), p_(p), usable_(std::move(usable)), opts_(opts),
          inv_n_(1.0 / static_cast<double>(D.rows()))
    {}

    struct Result
    {
        Vector b;
        double objective = 0.0;
        int sweeps = 0;
        bool converged = true;
    };

    double objective_of(const Vector& b, const Vector& r, const PenaltySpec& spec) const
    {
        double v = 0.5 * inv_n_ * r.squaredNorm();
        for (Index j = 0; j < b.size(); ++j) {
            if (b(j) != 0.0) v += penalty_value(spec, std::abs(b(j)));
        }
        return v;
    }

    /**
     * Runs CD from `start` over the allowed coordinates. Stops early once the
     * support exceeds `overflow` (the caller truncates afterwards).
     */
    Result run(const PenaltySpec& spec, Vector b, const std::vector<char>& allowed, Index overflow) const
    {
        const Index d = D_.cols();
        for (Index j = 0; j < d; ++j) {
            if (!allowed[j]) b(j) = 0.0;
            else if (j >= p_) b(j) = std::clamp(b(j), -spec.gamma_box_T, spec.gamma_box_T);
        }
        Vector r = y_ - D_ * b;
        Result res;
        res.converged = false;
        IndexList active;
        while (res.sweeps < opts_.max_sweeps) {
            const double change = sweep_all(spec, b, r, allowed);
            ++res.sweeps;
            notify(spec, b, r);
            if (change < opts_.tol) {
                res.converged = true;
                break;
            }
            if (count_nonzero(b) > overflow) {
                res.converged = true;  // handed over to truncation
                break;
            }
            active.clear();
            for (Index j = 0; j < d; ++j) if (b(j) != 0.0) active.push_back(j);
            for (int inner = 0; inner < opts_.max_sweeps; ++inner) {
                double c = 0.0;
                for (auto j : active) c = std::max(c, update(spec, j, b, r));
                notify(spec, b, r);
                if (c < opts_.tol) break;
            }
        }
        res.objective = objective_of(b, r, spec);
        res.b = std::move(b);
        return res;
    }

    static Index count_nonzero(const Vector& b)
    {
        Index c = 0;
        for (Index j = 0; j < b.size(); ++j) c += (b(j) != 0.0);
        return c;
    }

    const std::vector<char>& usable() const { return usable_; }
    Index width() const { return D_.cols(); }
    Index rows() const { return D_.rows(); }
    const Matrix& design() const { return D_; }
    const Vector& response() const { return y_; }

private:
    double update(const PenaltySpec& spec, Index j, Vector& b, Vector& r) const
    {
        const double old = b(j);
        const double z = old + inv_n_ * D_.col(j).dot(r);
        const double nb = (j >= p_) ? boxed_threshold_update(spec, z, spec.gamma_box_T, old)
                                    : threshold_update(spec, z);
        if (nb != old) {
            r.noalias() -= (nb - old) * D_.col(j);
            b(j) = nb;
        }
        return std::abs(nb - old);
    }

    double sweep_all(const PenaltySpec& spec, Vector& b, Vector& r, const std::vector<char>& allowed) const
    {
        double change = 0.0;
        for (Index j = 0; j < D_.cols(); ++j) {
            if (allowed[j]) change = std::max(change, update(spec, j, b, r));
        }
        return change;
    }

    void notify(const PenaltySpec& spec, const Vector& b, const Vector& r) const
    {
        if (opts_.on_sweep) opts_.on_sweep(objective_of(b, r, spec));
    }

    const Matrix& D_;
    const Vector& y_;
    Index p_;
    std::vector<char> usable_;
    const FitOptions& opts_;
    double inv_n_;
};

/// Full CD then, if the support exceeds the cap, magnitude truncation and a refit on the kept support.
inline CoordinateSolver::Result solve_capped(const CoordinateSolver& solver, const PenaltySpec& spec, const Vector& start)
{
    const Index cap = std::max<Index>(0, spec.max_support());
    const Index overflow = std::max<Index>(2 * cap, cap + 5);
    auto res = solver.run(spec, start, solver.usable(), overflow);
    if (CoordinateSolver::count_nonzero(res.b) <= cap) return res;

    IndexList order(static_cast<std::size_t>(res.b.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return std::abs(res.b(a)) > std::abs(res.b(b));
    });
    std::vector<char> keep(static_cast<std::size_t>(res.b.size()), 0);
    for (Index i = 0; i < cap; ++i) keep[order[i]] = 1;
    const int used = res.sweeps;
    auto refit = solver.run(spec, res.b, keep, cap + 1);
    refit.sweeps += used;
    return refit;
}

inline Matrix standardized_design(const AugmentedDesign& design)
{
    Matrix D(design.n(), design.width());
    for (Index j = 0; j < design.p(); ++j) {
        const double s = design.col_norms(j);
        if (s > 0.0) D.col(j) = design.X.col(j) / s;
        else D.col(j).setZero();
    }
    if (design.K() > 0) D.rightCols(design.K()) = design.F_hat;
    return D;
}

inline std::vector<char> usable_columns(const AugmentedDesign& design)
{
    std::vector<char> usable(static_cast<std::size_t>(design.width()), 1);
    for (auto j : design.dropped) usable[j] = 0;
    return usable;
}

inline CoefficientEstimate to_estimate(const Vector& y, const AugmentedDesign& design, const PenaltySpec& spec,
                                       const CoordinateSolver::Result& res)
{
    CoefficientEstimate est;
    const Index p = design.p();
    est.beta = Vector::Zero(p);
    est.gamma = Vector::Zero(design.K());
    for (Index j = 0; j < res.b.size(); ++j) {
        if (res.b(j) == 0.0) continue;
        est.support.push_back(j);
        if (j < p) est.beta(j) = res.b(j) / design.col_norms(j);
        else est.gamma(j - p) = res.b(j);
    }
    est.lambda_used = spec.lambda;
    est.converged = res.converged;
    est.sweeps = res.sweeps;
    if (!res.converged) {
        est.diagnostic = "coordinate descent hit the sweep limit at lambda=" + std::to_string(spec.lambda);
    }
    est.objective_value = objective(y, design, est, spec);
    return est;
}

} // namespace detail

/// 100 log-spaced values from |n^{-1} D^T y|_inf down to ratio * that.
inline std::vector<double> lambda_grid(const Vector& y, const AugmentedDesign& design, int size = 100, double ratio = 1e-3)
{
    if (y.size() != design.n()) throw input_error("lambda_grid: response length differs from design rows");
    if (size < 1 || !(ratio > 0.0 && ratio < 1.0)) throw input_error("lambda_grid: bad size or ratio");
    const Matrix D = detail::standardized_design(design);
    const double lmax = (D.transpose() * y).cwiseAbs().maxCoeff() / static_cast<double>(design.n());
    if (!(lmax > 0.0)) return {0.0};
    std::vector<double> grid(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) {
        const double frac = size == 1 ? 0.0 : static_cast<double>(i) / (size - 1);
        grid[i] = lmax * std::pow(ratio, frac);
    }
    return grid;
}

/**
 * Penalized least squares along a decreasing lambda grid with warm starts.
 *
 * Nonconvex families (hard, l0, scad) try several starts at each lambda: the
 * previous solution, zero, the lasso solution at the same lambda, and random
 * supports; the lowest objective wins. Every returned estimate respects the
 * support cap and the gamma box.
 */
inline std::vector<CoefficientEstimate> fit_path(const Vector& y, const AugmentedDesign& design, const PenaltySpec& spec,
                                                 const std::vector<double>& grid, const FitOptions& opts = {})
{
    spec.validate();
    if (y.size() != design.n()) throw input_error("fit_path: response length differs from design rows");
    if (!y.allFinite()) throw input_error("fit_path: response contains non-finite entries");
    if (grid.empty()) throw input_error("fit_path: empty lambda grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] >= 0.0)) throw input_error("fit_path: lambda must be nonnegative");
        if (i > 0 && !(grid[i] < grid[i - 1])) throw input_error("fit_path: lambda grid must be strictly decreasing");
    }

    const Matrix D = detail::standardized_design(design);
    const detail::CoordinateSolver solver(D, y, design.p(), detail::usable_columns(design), opts);
    const Index d = design.width();
    const bool multi = is_nonconvex(spec.family) && opts.starts > 1;

    PenaltySpec lasso_spec = spec;
    lasso_spec.family = PenaltyFamily::lasso;

    IndexList candidates;
    for (Index j = 0; j < d; ++j) if (solver.usable()[j]) candidates.push_back(j);
    const Vector marginal = D.transpose() * y / static_cast<double>(design.n());

    std::vector<CoefficientEstimate> path;
    path.reserve(grid.size());
    Vector warm = Vector::Zero(d);
    Vector lasso_warm = Vector::Zero(d);

    for (std::size_t i = 0; i < grid.size(); ++i) {
        const PenaltySpec at = spec.with_lambda(grid[i]);
        auto best = detail::solve_capped(solver, at, warm);

        if (multi) {
            auto consider = [&](const Vector& start) {
                auto cand = detail::solve_capped(solver, at, start);
                if (cand.objective < best.objective - 1e-14 * std::max(1.0, std::abs(best.objective))) {
                    best = std::move(cand);
                }
            };
            consider(Vector::Zero(d));

            const auto lasso = detail::solve_capped(solver, lasso_spec.with_lambda(grid[i]), lasso_warm);
            lasso_warm = lasso.b;
            consider(lasso.b);

            std::seed_seq seq{opts.seed, static_cast<std::uint64_t>(i)};
            std::mt19937_64 rng(seq);
            const Index cap = std::max<Index>(1, spec.max_support());
            for (int s = 2; s < opts.starts && !candidates.empty(); ++s) {
                std::uniform_int_distribution<Index> size_dist(1, std::min<Index>(cap, static_cast<Index>(candidates.size())));
                const Index size = size_dist(rng);
                IndexList pool = candidates;
                Vector start = Vector::Zero(d);
                for (Index k = 0; k < size; ++k) {
                    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pool.size() - 1);
                    std::swap(pool[k], pool[pick(rng)]);
                    start(pool[k]) = marginal(pool[k]);
                }
                consider(start);
            }
        }

        warm = best.b;
        path.push_back(detail::to_estimate(y, design, at, best));
    }
    return path;
}

/// Mean squared prediction error of each path element on held-out data.
inline std::vector<double> validation_errors(const std::vector<CoefficientEstimate>& path, const Vector& y_val,
                                             const AugmentedDesign& design_val)
{
    if (y_val.size() != design_val.n()) throw input_error("validation_errors: response length differs from design rows");
    std::vector<double> out;
    out.reserve(path.size());
    for (const auto& est : path) {
        const Vector r = y_val - design_val.linear_predictor(est.beta, est.gamma);
        out.push_back(r.squaredNorm() / static_cast<double>(y_val.size()));
    }
    return out;
}

/// Path element with the smallest validation MSE; ties go to the larger lambda.
inline CoefficientEstimate tune(const std::vector<CoefficientEstimate>& path, const Vector& y_val,
                                const AugmentedDesign& design_val)
{
    if (path.empty()) throw input_error("tune: empty path");
    const auto errs = validation_errors(path, y_val, design_val);
    std::size_t best = 0;
    for (std::size_t i = 1; i < path.size(); ++i) {
        if (errs[i] < errs[best] || (errs[i] == errs[best] && path[i].lambda_used > path[best].lambda_used)) {
            best = i;
        }
    }
    return path[best];
}

/**
 * Exhaustive L0-penalized least squares over all supports of size at most
 * min(max_support, cap). Only for small problems: p + K <= 20, max_support <= 12.
 */
inline CoefficientEstimate brute_force_l0(const Vector& y, const AugmentedDesign& design, const PenaltySpec& spec,
                                          Index max_support)
{
    spec.validate();
    if (design.width() > 20) throw refusal_error("brute_force_l0: p + K exceeds 20");
    if (max_support > 12) throw refusal_error("brute_force_l0: max_support exceeds 12");
    if (y.size() != design.n()) throw input_error("brute_force_l0: response length differs from design rows");

    PenaltySpec l0 = spec;
    l0.family = PenaltyFamily::l0;
    const Matrix D = detail::standardized_design(design);
    const auto usable = detail::usable_columns(design);
    IndexList cols;
    for (Index j = 0; j < design.width(); ++j) if (usable[j]) cols.push_back(j);
    const Index limit = std::min<Index>({max_support, std::max<Index>(0, spec.max_support()),
                                         static_cast<Index>(cols.size())});
    const double inv2n = 0.5 / static_cast<double>(design.n());
    const Index p = design.p();

    Vector best_b = Vector::Zero(design.width());
    double best_obj = inv2n * y.squaredNorm();

    // Least squares on `subset`, then clip any gamma beyond T and refit the rest.
    auto evaluate = [&](const IndexList& subset) {
        Vector b = Vector::Zero(design.width());
        IndexList free = subset;
        Vector target = y;
        for (int pass = 0; pass <= static_cast<int>(subset.size()) && !free.empty(); ++pass) {
            Matrix A(design.n(), static_cast<Index>(free.size()));
            for (std::size_t k = 0; k < free.size(); ++k) A.col(static_cast<Index>(k)) = D.col(free[k]);
            const Vector coef = A.colPivHouseholderQr().solve(target);
            bool clipped = false;
            IndexList next;
            for (std::size_t k = 0; k < free.size(); ++k) {
                const Index j = free[k];
                if (j >= p && std::abs(coef(static_cast<Index>(k))) > spec.gamma_box_T) {
                    b(j) = std::copysign(spec.gamma_box_T, coef(static_cast<Index>(k)));
                    target -= b(j) * D.col(j);
                    clipped = true;
                } else {
                    b(j) = coef(static_cast<Index>(k));
                    next.push_back(j);
                }
            }
            if (!clipped) break;
            for (auto j : next) b(j) = 0.0;
            free = std::move(next);
        }
        const Vector r = y - D * b;
        double obj = inv2n * r.squaredNorm();
        for (Index j = 0; j < b.size(); ++j) obj += penalty_value(l0, std::abs(b(j)));
        if (obj < best_obj) {
            best_obj = obj;
            best_b = b;
        }
    };

    IndexList subset;
    std::function<void(std::size_t)> enumerate = [&](std::size_t from) {
        if (!subset.empty()) evaluate(subset);
        if (static_cast<Index>(subset.size()) == limit) return;
        for (std::size_t k = from; k < cols.size(); ++k) {
            subset.push_back(cols[k]);
            enumerate(k + 1);
            subset.pop_back();
        }
    };
    enumerate(0);

    detail::CoordinateSolver::Result res;
    res.b = best_b;
    res.objective = best_obj;
    auto est = detail::to_estimate(y, design, l0, res);
    est.diagnostic = "exhaustive";
    return est;
}

/// sqrt(RSS / (n - |support| - 1)).
inline double estimate_sigma(const Vector& y, const AugmentedDesign& design, const CoefficientEstimate& est)
{
    if (y.size() != design.n()) throw input_error("estimate_sigma: response length differs from design rows");
    const Index df = design.n() - static_cast<Index>(est.support.size()) - 1;
    if (df < 1) throw input_error("estimate_sigma: not enough residual degrees of freedom");
    const Vector r = y - design.linear_predictor(est.beta, est.gamma);
    return std::sqrt(r.squaredNorm() / static_cast<double>(df));
}

} // namespace regression
} // namespace nsl
