#pragma once
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>
#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <nsl/errors.hpp>
#include <nsl/penalized_regression.hpp>
#include <nsl/penalty.hpp>
#include <nsl/spiked_pca.hpp>
#include <nsl/types.hpp>

namespace nsl {
namespace sim {

enum class ErrorFamily { gaussian, student_t };

struct ExampleSpec
{
    int example_id = 1;
    Index n = 100;
    Index p = 1000;
    Index q = 1000;
    Index K = 10;
    Index k_repeats = 3;
    double sigma = 0.4;
    ErrorFamily error_family = ErrorFamily::gaussian;
    double df = 10.0;
    int reps = 50;
    Index test_size = 10000;
    Index validation_size = 100;
    std::uint64_t seed = 12345;

    static ExampleSpec example(int id)
    {
        ExampleSpec s;
        s.example_id = id;
        if (id == 2) s.error_family = ErrorFamily::student_t;
        else if (id != 1) throw input_error("example id must be 1 or 2");
        return s;
    }

    void validate() const
    {
        if (example_id != 1 && example_id != 2) throw input_error("example id must be 1 or 2");
        if (n < 2 || p < 1 || q < 1 || K < 1) throw input_error("example dimensions must be positive");
        if (example_id == 1 && q != p) throw input_error("example 1 uses W = X, so q must equal p");
        if (example_id == 2 && q < 5) throw input_error("example 2 needs q >= 5");
        if (K >= n || K > q) throw input_error("need K < n and K <= q");
        if (k_repeats < 1 || 6 * k_repeats > p) throw input_error("k_repeats does not fit in p");
        if (!(sigma >= 0.0)) throw input_error("sigma must be nonnegative");
        if (error_family == ErrorFamily::student_t && !(df > 2.0)) throw input_error("t errors need df > 2");
        if (reps < 1) throw input_error("reps must be positive");
        if (test_size < 1 || validation_size < 2) throw input_error("test and validation sizes must be positive");
    }

    /// Population standard deviation of the errors.
    double error_sd() const
    {
        return error_family == ErrorFamily::student_t ? sigma * std::sqrt(df / (df - 2.0)) : sigma;
    }
};

inline std::string to_string(ErrorFamily f) { return f == ErrorFamily::gaussian ? "gaussian" : "student_t"; }

/// Sigma_1 = (rho^{|i-j|}).
inline Matrix ar_covariance(Index dim, double rho)
{
    Matrix S(dim, dim);
    for (Index i = 0; i < dim; ++i)
        for (Index j = 0; j < dim; ++j) S(i, j) = std::pow(rho, static_cast<double>(std::abs(i - j)));
    return S;
}

/// scale * (Sigma_1 + Sigma_2), Sigma_2 = 0.5 I + 0.5 11^T.
inline Matrix mixed_covariance(Index dim, double scale)
{
    Matrix S = ar_covariance(dim, 0.5);
    S.array() += 0.5;
    S.diagonal().array() += 0.5;
    return scale * S;
}

struct CovariancePair
{
    Matrix sigma_x;
    Matrix sigma_w;  ///< empty when W = X
    bool w_is_x = false;

    const Matrix& covariates() const { return w_is_x ? sigma_x : sigma_w; }
};

inline CovariancePair build_covariance(const ExampleSpec& spec)
{
    spec.validate();
    CovariancePair out;
    if (spec.example_id == 1) {
        out.sigma_x = mixed_covariance(spec.p, 0.5);
        out.w_is_x = true;
        return out;
    }
    out.sigma_x = ar_covariance(spec.p, 0.5);
    const Index first = spec.q / 5;
    out.sigma_w = Matrix::Zero(spec.q, spec.q);
    out.sigma_w.topLeftCorner(first, first) = mixed_covariance(first, 0.75);
    out.sigma_w.bottomRightCorner(spec.q - first, spec.q - first) = mixed_covariance(spec.q - first, 0.5);
    return out;
}

/// Draws rows i.i.d. N(0, Sigma) as Z L^T with Sigma = L L^T.
class MvnSampler
{
public:
    explicit MvnSampler(const Matrix& sigma)
    {
        if (sigma.rows() != sigma.cols()) throw input_error("MvnSampler: covariance is not square");
        Eigen::LLT<Matrix> llt(sigma);
        if (llt.info() != Eigen::Success) throw numeric_error("MvnSampler: Cholesky factorization failed");
        upper_ = llt.matrixU();
    }

    Index dim() const { return upper_.rows(); }

    Matrix draw(Index rows, std::mt19937_64& rng) const
    {
        std::normal_distribution<double> normal;
        Matrix Z(rows, dim());
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < dim(); ++j) Z(i, j) = normal(rng);
        Matrix out(rows, dim());
        out.noalias() = Z * upper_.triangularView<Eigen::Upper>();
        return out;
    }

private:
    Matrix upper_;
};

inline Matrix sample_mvn(const Matrix& sigma, Index rows, std::mt19937_64& rng)
{
    return MvnSampler(sigma).draw(rows, rng);
}

/// Everything fixed by the spec: covariances, their factors, population directions, true coefficients.
struct PopulationModel
{
    ExampleSpec spec;
    CovariancePair cov;
    MvnSampler sampler_x;
    std::optional<MvnSampler> sampler_w;
    Matrix directions;     ///< q x K population eigenvectors of Sigma_W
    Vector eigenvalues;    ///< top K population eigenvalues
    Vector beta0;
    Vector gamma0;

    explicit PopulationModel(const ExampleSpec& s)
        : spec(s), cov(build_covariance(s)), sampler_x(cov.sigma_x)
    {
        if (!cov.w_is_x) sampler_w.emplace(cov.sigma_w);
        const auto eig = pca::eigendecompose(cov.covariates());
        directions = eig.vectors.leftCols(spec.K);
        eigenvalues = eig.values.head(spec.K);
        beta0 = Vector::Zero(spec.p);
        for (Index r = 0; r < spec.k_repeats; ++r) {
            beta0(6 * r) = 0.6;
            beta0(6 * r + 3) = -0.6;
        }
        gamma0 = Vector::Zero(spec.K);
        gamma0(0) = 0.5;
        if (spec.example_id == 2 && spec.K >= 2) gamma0(1) = -0.5;
    }

    Index q() const { return directions.rows(); }
};

/// One draw of (X, W, y) with the unnormalized population scores W u_i.
struct Sample
{
    Matrix X;
    Matrix W_own;     ///< empty when W = X
    bool w_is_x = false;
    Matrix scores;    ///< W U_K
    Vector noise;
    Vector y;

    const Matrix& W() const { return w_is_x ? X : W_own; }
    Index rows() const { return X.rows(); }
};

/// Population truth for one training set; F_true holds the scores rescaled to norm sqrt(n).
struct TruthSet
{
    Vector beta0;
    Vector gamma0;
    Matrix F_true;
    Vector factor_scales;  ///< |W u_i| / sqrt(n), so that W u_i = factor_scales(i) * F_true.col(i)
    double sigma = 0.0;
    Matrix directions;     ///< population eigenvectors, q x K
};

inline Vector draw_errors(const ExampleSpec& spec, Index rows, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal;
    Vector e(rows);
    if (spec.error_family == ErrorFamily::gaussian) {
        for (Index i = 0; i < rows; ++i) e(i) = spec.sigma * normal(rng);
        return e;
    }
    std::chi_squared_distribution<double> chi(spec.df);
    for (Index i = 0; i < rows; ++i) {
        const double z = normal(rng);
        e(i) = spec.sigma * z / std::sqrt(chi(rng) / spec.df);
    }
    return e;
}

inline Sample generate_sample(const PopulationModel& model, Index rows, std::mt19937_64& rng)
{
    Sample s;
    s.X = model.sampler_x.draw(rows, rng);
    s.w_is_x = !model.sampler_w.has_value();
    if (!s.w_is_x) s.W_own = model.sampler_w->draw(rows, rng);
    s.scores = s.W() * model.directions;
    s.noise = draw_errors(model.spec, rows, rng);
    s.y = s.X * model.beta0 + s.scores * model.gamma0 + s.noise;
    return s;
}

inline TruthSet make_truth(const PopulationModel& model, const Sample& train)
{
    TruthSet t;
    t.beta0 = model.beta0;
    t.gamma0 = model.gamma0;
    t.sigma = model.spec.sigma;
    t.directions = model.directions;
    const double root_n = std::sqrt(static_cast<double>(train.rows()));
    t.F_true = train.scores;
    t.factor_scales.resize(train.scores.cols());
    for (Index k = 0; k < train.scores.cols(); ++k) {
        const double norm = train.scores.col(k).norm();
        if (!(norm > 0.0)) throw degenerate_factor_error(static_cast<std::size_t>(k), "population score has zero norm");
        t.factor_scales(k) = norm / root_n;
        t.F_true.col(k) /= t.factor_scales(k);
    }
    return t;
}

/// Independent random stream for (seed, replication, purpose).
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t rep, std::uint64_t purpose)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(rep), static_cast<std::uint32_t>(purpose)};
    return std::mt19937_64(seq);
}

struct Dataset
{
    Sample train;
    Sample validation;
    Sample test;
    TruthSet truth;
};

/// Training, validation and (optionally) test draws from separate substreams.
inline Dataset generate_dataset(const PopulationModel& model, std::uint64_t rep, Index test_rows)
{
    const auto& spec = model.spec;
    Dataset d;
    auto rng_train = substream(spec.seed, rep, 0);
    auto rng_val = substream(spec.seed, rep, 1);
    d.train = generate_sample(model, spec.n, rng_train);
    d.validation = generate_sample(model, spec.validation_size, rng_val);
    if (test_rows > 0) {
        auto rng_test = substream(spec.seed, rep, 2);
        d.test = generate_sample(model, test_rows, rng_test);
    }
    d.truth = make_truth(model, d.train);
    return d;
}

/// A fitted model reduced to what evaluation needs. The prediction is X beta + W eta.
struct FittedModel
{
    std::string method;
    std::string model;
    Vector beta;
    Vector gamma;         ///< on the W u_i scale, sign-aligned with the population directions (empty for M1)
    Vector eta;           ///< q-vector, empty for M1
    IndexList beta_support;
    IndexList gamma_support;
    double sigma_hat = 0.0;
    double lambda = 0.0;

    Vector predict(const Sample& s) const
    {
        Vector out = s.X * beta;
        if (eta.size() > 0) out.noalias() += s.W() * eta;
        return out;
    }
};

struct MeasureRecord
{
    int rep = 0;
    std::string method;
    std::string model;
    std::map<std::string, double> values;
};

namespace detail {

inline IndexList nonzeros(const Vector& v)
{
    IndexList out;
    for (Index j = 0; j < v.size(); ++j) if (v(j) != 0.0) out.push_back(j);
    return out;
}

inline std::pair<double, double> support_errors(const IndexList& est, const Vector& truth)
{
    double fp = 0.0, fn = 0.0;
    std::vector<char> chosen(static_cast<std::size_t>(truth.size()), 0);
    for (auto j : est) {
        chosen[j] = 1;
        if (truth(j) == 0.0) fp += 1.0;
    }
    for (Index j = 0; j < truth.size(); ++j) if (truth(j) != 0.0 && !chosen[j]) fn += 1.0;
    return {fp, fn};
}

} // namespace detail

/// Measures given an already computed prediction error.
inline MeasureRecord measure_record(const FittedModel& fm, const TruthSet& truth, double pe, int rep = 0)
{
    if (truth.beta0.size() == 0) throw input_error("evaluate: missing truth");
    if (fm.beta.size() != truth.beta0.size()) throw input_error("evaluate: beta length differs from truth");
    MeasureRecord r;
    r.rep = rep;
    r.method = fm.method;
    r.model = fm.model;
    auto& v = r.values;
    const Vector db = fm.beta - truth.beta0;
    v["PE"] = pe;
    v["L2"] = db.norm();
    v["L1"] = db.lpNorm<1>();
    v["Linf"] = db.size() ? db.lpNorm<Eigen::Infinity>() : 0.0;
    const auto [fp, fn] = detail::support_errors(fm.beta_support, truth.beta0);
    v["FP"] = fp;
    v["FN"] = fn;
    v["sigma_hat"] = fm.sigma_hat;
    v["lambda"] = fm.lambda;
    v["support_size"] = static_cast<double>(fm.beta_support.size() + fm.gamma_support.size());
    if (fm.gamma.size() > 0) {
        if (fm.gamma.size() != truth.gamma0.size()) throw input_error("evaluate: gamma length differs from truth");
        const Vector dg = fm.gamma - truth.gamma0;
        v["gamma_L2"] = dg.norm();
        v["gamma_L1"] = dg.lpNorm<1>();
        v["gamma_Linf"] = dg.lpNorm<Eigen::Infinity>();
        const auto [fpg, fng] = detail::support_errors(fm.gamma_support, truth.gamma0);
        v["FP_gamma"] = fpg;
        v["FN_gamma"] = fng;
    }
    return r;
}

/// Measures with PE computed on a test sample.
inline MeasureRecord evaluate(const FittedModel& fm, const TruthSet& truth, const Sample& test, int rep = 0)
{
    if (test.rows() == 0) throw input_error("evaluate: empty test set");
    const Vector r = test.y - fm.predict(test);
    return measure_record(fm, truth, r.squaredNorm() / static_cast<double>(test.rows()), rep);
}

struct MeasureStat
{
    double mean = 0.0;
    double sd = 0.0;   ///< SD of the replication values
    Index count = 0;
};

struct SummaryRow
{
    std::string method;
    std::string model;
    std::map<std::string, MeasureStat> measures;
};

using MeasureSummary = std::vector<SummaryRow>;

/// Means and SDs per (method, model), accumulated in replication order.
inline MeasureSummary summarize(std::vector<MeasureRecord> records)
{
    std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
        return std::tie(a.method, a.model, a.rep) < std::tie(b.method, b.model, b.rep);
    });
    MeasureSummary out;
    std::size_t i = 0;
    while (i < records.size()) {
        std::size_t j = i;
        while (j < records.size() && records[j].method == records[i].method && records[j].model == records[i].model) ++j;
        SummaryRow row;
        row.method = records[i].method;
        row.model = records[i].model;
        std::map<std::string, std::vector<double>> columns;
        for (std::size_t k = i; k < j; ++k)
            for (const auto& [name, value] : records[k].values) columns[name].push_back(value);
        for (const auto& [name, xs] : columns) {
            MeasureStat st;
            st.count = static_cast<Index>(xs.size());
            double sum = 0.0;
            for (double x : xs) sum += x;
            st.mean = sum / static_cast<double>(xs.size());
            if (xs.size() > 1) {
                double ss = 0.0;
                for (double x : xs) ss += (x - st.mean) * (x - st.mean);
                st.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
            }
            row.measures[name] = st;
        }
        out.push_back(std::move(row));
        i = j;
    }
    return out;
}

inline const SummaryRow* find_row(const MeasureSummary& s, const std::string& method, const std::string& model)
{
    for (const auto& row : s) if (row.method == method && row.model == model) return &row;
    return nullptr;
}

struct StudyOptions
{
    std::vector<PenaltyFamily> methods{PenaltyFamily::lasso, PenaltyFamily::scad, PenaltyFamily::hard};
    bool model_m1 = true;
    bool model_m2 = true;
    bool oracle = true;
    int threads = 0;          ///< 0: hardware concurrency; always capped by NSL_THREADS
    int grid_size = 100;
    double grid_ratio = 1e-3;
    double c_tilde = 1.5;
    int starts = 5;
    Index test_chunk = 1000;
    std::function<void(int)> on_rep_done;
};

struct StudyResult
{
    ExampleSpec spec;
    std::vector<MeasureRecord> records;
    MeasureSummary summary;
    int failures = 0;
    std::vector<std::string> failure_messages;
};

/// Worker count: requested (or hardware) capped by NSL_THREADS when set.
inline int resolve_threads(int requested)
{
    int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("NSL_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) n = std::min(n, cap);
    }
    return std::max(1, n);
}

namespace detail {

inline FittedModel fit_penalized(const PopulationModel& model, const Sample& train, const Sample& val,
                                 PenaltyFamily family, bool with_factors, const StudyOptions& opts,
                                 std::uint64_t fit_seed)
{
    const auto& spec = model.spec;
    FittedModel fm;
    fm.method = std::string(nsl::to_string(family));
    fm.model = with_factors ? "M2" : "M1";

    Matrix F, F_val;
    pca::EigenSystem eig;
    pca::ScoreSet scores;
    if (with_factors) {
        eig = pca::leading_components(train.W(), spec.K);
        scores = pca::principal_scores(train.W(), eig, spec.K);
        F = scores.scores;
        F_val = pca::project_scores(val.W(), eig.vectors, scores.back_scalars);
    }
    const auto design = regression::AugmentedDesign::training(train.X, F);
    const auto val_design = regression::AugmentedDesign::evaluation(val.X, F_val, design.col_norms);

    PenaltySpec ps;
    ps.family = family;
    ps.support_cap_M = default_support_cap(spec.n, spec.p, opts.c_tilde);
    regression::FitOptions fo;
    fo.starts = opts.starts;
    fo.seed = fit_seed;
    const auto grid = regression::lambda_grid(train.y, design, opts.grid_size, opts.grid_ratio);
    const auto path = regression::fit_path(train.y, design, ps, grid, fo);
    const auto est = regression::tune(path, val.y, val_design);

    fm.beta = est.beta;
    fm.beta_support = est.beta_support();
    fm.lambda = est.lambda_used;
    fm.sigma_hat = regression::estimate_sigma(train.y, design, est);
    if (with_factors) {
        const Vector raw = est.gamma.cwiseProduct(scores.back_scalars);
        fm.eta = eig.vectors * raw;
        fm.gamma = raw;
        for (Index k = 0; k < spec.K; ++k) {
            if (eig.vectors.col(k).dot(model.directions.col(k)) < 0.0) fm.gamma(k) = -fm.gamma(k);
        }
        fm.gamma_support = est.gamma_support();
    }
    return fm;
}

/// Least squares on the true support with the true (unnormalized) factors.
inline FittedModel fit_oracle(const PopulationModel& model, const Sample& train)
{
    const IndexList bs = nonzeros(model.beta0);
    const IndexList gs = nonzeros(model.gamma0);
    const Index k = static_cast<Index>(bs.size() + gs.size());
    Matrix A(train.rows(), k);
    Index c = 0;
    for (auto j : bs) A.col(c++) = train.X.col(j);
    for (auto j : gs) A.col(c++) = train.scores.col(j);
    const Vector coef = A.colPivHouseholderQr().solve(train.y);

    FittedModel fm;
    fm.method = "oracle";
    fm.model = "oracle";
    fm.beta = Vector::Zero(model.beta0.size());
    fm.gamma = Vector::Zero(model.gamma0.size());
    c = 0;
    for (auto j : bs) fm.beta(j) = coef(c++);
    for (auto j : gs) fm.gamma(j) = coef(c++);
    fm.beta_support = bs;
    fm.gamma_support = gs;
    fm.eta = model.directions * fm.gamma;
    const Index df = train.rows() - k - 1;
    if (df < 1) throw input_error("oracle: not enough residual degrees of freedom");
    fm.sigma_hat = std::sqrt((train.y - A * coef).squaredNorm() / static_cast<double>(df));
    return fm;
}

inline std::vector<MeasureRecord> run_replication(const PopulationModel& model, int rep, const StudyOptions& opts)
{
    const auto& spec = model.spec;
    const Dataset data = generate_dataset(model, static_cast<std::uint64_t>(rep), 0);

    std::vector<FittedModel> fits;
    std::uint64_t fit_seed = substream(spec.seed, static_cast<std::uint64_t>(rep), 3)();
    for (auto family : opts.methods) {
        if (opts.model_m1) fits.push_back(fit_penalized(model, data.train, data.validation, family, false, opts, fit_seed));
        if (opts.model_m2) fits.push_back(fit_penalized(model, data.train, data.validation, family, true, opts, fit_seed));
    }
    if (opts.oracle) fits.push_back(fit_oracle(model, data.train));

    // Test rows are streamed in chunks so the full test design is never held in memory.
    std::vector<double> sse(fits.size(), 0.0);
    auto rng_test = substream(spec.seed, static_cast<std::uint64_t>(rep), 2);
    const Index chunk = std::max<Index>(1, opts.test_chunk);
    for (Index done = 0; done < spec.test_size; done += chunk) {
        const Sample test = generate_sample(model, std::min(chunk, spec.test_size - done), rng_test);
        for (std::size_t f = 0; f < fits.size(); ++f) sse[f] += (test.y - fits[f].predict(test)).squaredNorm();
    }
    std::vector<MeasureRecord> out;
    for (std::size_t f = 0; f < fits.size(); ++f) {
        out.push_back(measure_record(fits[f], data.truth, sse[f] / static_cast<double>(spec.test_size), rep));
    }
    return out;
}

} // namespace detail

/**
 * Replicated study: each replication draws its data from substreams of
 * (seed, rep), fits every requested method under M1 and M2 plus the oracle,
 * tunes on an independent validation set and evaluates on a streamed test set.
 * A failing replication is counted and excluded.
 */
inline StudyResult run_study(const ExampleSpec& spec, const StudyOptions& opts = {})
{
    spec.validate();
    if (spec.reps < 2) throw input_error("run_study: need at least 2 replications");
    const PopulationModel model(spec);

    std::vector<std::vector<MeasureRecord>> per_rep(static_cast<std::size_t>(spec.reps));
    std::vector<std::string> errors(static_cast<std::size_t>(spec.reps));
    std::vector<char> failed(static_cast<std::size_t>(spec.reps), 0);
    std::atomic<int> next{0};
    std::mutex progress_mutex;

    auto worker = [&] {
        for (int rep = next++; rep < spec.reps; rep = next++) {
            try {
                per_rep[rep] = detail::run_replication(model, rep, opts);
            } catch (const std::exception& e) {
                failed[rep] = 1;
                errors[rep] = "replication " + std::to_string(rep) + ": " + e.what();
            }
            if (opts.on_rep_done) {
                std::lock_guard<std::mutex> lock(progress_mutex);
                opts.on_rep_done(rep);
            }
        }
    };
    const int threads = std::min(resolve_threads(opts.threads), spec.reps);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    StudyResult result;
    result.spec = spec;
    for (int rep = 0; rep < spec.reps; ++rep) {
        if (failed[rep]) {
            ++result.failures;
            result.failure_messages.push_back(errors[rep]);
            continue;
        }
        for (auto& r : per_rep[rep]) result.records.push_back(std::move(r));
    }
    result.summary = summarize(result.records);
    return result;
}

} // namespace sim
} // namespace nsl
