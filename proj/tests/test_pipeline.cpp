#include <bitset>
#include <cmath>
#include <cstring>
#include <gtest/gtest.h>
#include <Eigen/SVD>
#include <nsl/nsl_pipeline.hpp>
#include <nsl/simulation.hpp>
#include "test_support.hpp"

using namespace nsl;
using nsl::testing::gaussian_matrix;
using nsl::testing::gaussian_vector;

namespace {

struct Toy
{
    Vector y;
    Matrix X;
    Matrix W;
};

/// Two latent directions in W drive y alongside three predictors.
Toy toy_data(Index n, Index p, Index q, std::uint64_t seed)
{
    Toy t;
    t.X = gaussian_matrix(n, p, seed);
    const Matrix latent = gaussian_matrix(n, 2, seed + 1);
    t.W = 0.5 * gaussian_matrix(n, q, seed + 2);
    t.W.leftCols(q / 2) += latent.col(0) * Vector::Ones(q / 2).transpose();
    t.W.rightCols(q - q / 2) += latent.col(1) * Vector::Ones(q - q / 2).transpose();
    t.y = 1.2 * t.X.col(0) - 0.9 * t.X.col(2) + 0.7 * latent.col(0) + 0.2 * gaussian_vector(n, seed + 3);
    return t;
}

NslConfig toy_config(Index K = 2)
{
    NslConfig c;
    c.num_factors = K;
    c.penalty.family = PenaltyFamily::hard;
    c.grid_size = 40;
    return c;
}

/// Independent robust-spark enumerator over column bitmasks using a full SVD.
Index spark_by_bitmask(const Matrix& A, double c, Index cap)
{
    const Index n = A.rows();
    const Index p = A.cols();
    Index best = cap + 1;
    for (unsigned long mask = 1; mask < (1ul << p); ++mask) {
        const auto size = static_cast<Index>(std::bitset<32>(mask).count());
        if (size > cap || size >= best) continue;
        Matrix sub(n, size);
        Index k = 0;
        for (Index j = 0; j < p; ++j) {
            if (!(mask & (1ul << j))) continue;
            sub.col(k++) = A.col(j) * (std::sqrt(static_cast<double>(n)) / A.col(j).norm());
        }
        Eigen::JacobiSVD<Matrix> svd(sub / std::sqrt(static_cast<double>(n)));
        if (svd.singularValues().minCoeff() < c) best = size;
    }
    return best;
}

} // namespace

TEST(Clr, Examples)
{
    Matrix W(2, 4);
    W << 1, 1, 1, 1, 2, 2, 2, 2;
    EXPECT_LE(clr_transform(W).cwiseAbs().maxCoeff(), 1e-15);
    const double e = std::exp(1.0);
    Matrix V(1, 3);
    V << e, e, e * e;
    const Matrix out = clr_transform(V);
    EXPECT_NEAR(out(0, 0), -1.0 / 3.0, 1e-12);
    EXPECT_NEAR(out(0, 1), -1.0 / 3.0, 1e-12);
    EXPECT_NEAR(out(0, 2), 2.0 / 3.0, 1e-12);
}

TEST(Clr, RowSumsAndScaleInvariance)
{
    const Matrix W = gaussian_matrix(10, 7, 4).array().exp().matrix();
    const Matrix out = clr_transform(W);
    EXPECT_LE(out.rowwise().sum().cwiseAbs().maxCoeff(), 1e-10);
    Matrix scaled = W;
    for (Index i = 0; i < W.rows(); ++i) scaled.row(i) *= 0.1 + static_cast<double>(i);
    EXPECT_LE((clr_transform(scaled) - out).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Clr, RejectsNonPositive)
{
    Matrix W = Matrix::Ones(2, 2);
    W(1, 0) = 0.0;
    EXPECT_THROW(clr_transform(W), input_error);
    const Matrix fixed = replace_zeros(W, 0.5);
    EXPECT_EQ(fixed(1, 0), 0.5);
    W(1, 0) = -1.0;
    EXPECT_THROW(replace_zeros(W), input_error);
}

TEST(Pipeline, PredictOnTrainingReproducesFit)
{
    const auto t = toy_data(60, 10, 20, 1);
    auto cfg = toy_config();
    const auto f = fit(t.y, t.X, t.W, cfg);
    ASSERT_EQ(f.scores.count(), f.estimate.gamma.size());
    const Matrix Xt = detail::select_rows(t.X, f.train_rows);
    const Matrix Wt = detail::select_rows(t.W, f.train_rows);
    EXPECT_LE((predict(f, Xt, Wt) - f.fitted).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GE(f.sigma_hat, 0.0);

    cfg.center_W = true;
    const auto g = fit_with_validation(t.y, t.X, t.W, t.y, t.X, t.W, cfg);
    EXPECT_LE((predict(g, t.X, t.W) - g.fitted).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Pipeline, ZeroCoefficientsPredictZero)
{
    const auto t = toy_data(40, 6, 10, 2);
    auto f = fit(t.y, t.X, t.W, toy_config());
    f.estimate.beta.setZero();
    f.estimate.gamma.setZero();
    EXPECT_EQ(predict(f, t.X, t.W), Vector::Zero(40));
}

TEST(Pipeline, ClrCovariates)
{
    auto t = toy_data(50, 6, 12, 3);
    t.W = t.W.array().exp().matrix();
    auto cfg = toy_config();
    cfg.clr_W = true;
    const auto f = fit(t.y, t.X, t.W, cfg);
    const Matrix Xt = detail::select_rows(t.X, f.train_rows);
    const Matrix Wt = detail::select_rows(t.W, f.train_rows);
    EXPECT_LE((predict(f, Xt, Wt) - f.fitted).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Pipeline, PureNoiseAtLambdaMaxIsEmpty)
{
    const Matrix X = gaussian_matrix(50, 8, 5);
    const Matrix W = gaussian_matrix(50, 12, 6);
    const Vector y = gaussian_vector(50, 7);
    auto cfg = toy_config(2);
    cfg.grid_size = 1;
    for (auto fam : {PenaltyFamily::hard, PenaltyFamily::lasso, PenaltyFamily::scad}) {
        cfg.penalty.family = fam;
        EXPECT_TRUE(fit(y, X, W, cfg).estimate.support.empty()) << to_string(fam);
    }
}

TEST(Pipeline, ToyMatchesBruteForce)
{
    const auto t = toy_data(30, 8, 12, 9);
    const Index K = 1;
    const auto eig = pca::leading_components(t.W, K);
    const auto sc = pca::principal_scores(t.W, eig, K);
    const auto design = regression::AugmentedDesign::training(t.X, sc.scores);
    PenaltySpec s;
    s.family = PenaltyFamily::l0;
    s.support_cap_M = 13;
    const double lam = 0.3;
    const auto oracle = regression::brute_force_l0(t.y, design, s.with_lambda(lam), 9);
    std::vector<double> grid;
    const double top = regression::lambda_grid(t.y, design, 1).front();
    for (int i = 0; i < 20; ++i) grid.push_back(top * std::pow(lam / top, i / 19.0));
    grid.back() = lam;
    const auto path = regression::fit_path(t.y, design, s, grid);
    EXPECT_NEAR(path.back().objective_value, oracle.objective_value, 1e-6);
}

TEST(Pipeline, ExampleOneRecoversSupport)
{
    auto spec = sim::ExampleSpec::example(1);
    const sim::PopulationModel model(spec);
    for (std::uint64_t rep = 0; rep < 3; ++rep) {
        const auto data = sim::generate_dataset(model, rep, 0);
        const auto f = fit_with_validation(data.train.y, data.train.X, data.train.W(), data.validation.y,
                                           data.validation.X, data.validation.W(), toy_config(10));
        const auto bs = f.estimate.beta_support();
        for (Index j = 0; j < spec.p; ++j) {
            if (model.beta0(j) != 0.0) {
                EXPECT_NE(std::find(bs.begin(), bs.end(), j), bs.end()) << "rep " << rep;
            }
        }
        const auto gs = f.estimate.gamma_support();
        EXPECT_NE(std::find(gs.begin(), gs.end(), 0), gs.end());
    }
}

TEST(Pipeline, Deterministic)
{
    const auto t = toy_data(60, 10, 20, 11);
    auto cfg = toy_config();
    cfg.penalty.family = PenaltyFamily::scad;
    const auto a = fit(t.y, t.X, t.W, cfg);
    const auto b = fit(t.y, t.X, t.W, cfg);
    ASSERT_EQ(a.estimate.beta.size(), b.estimate.beta.size());
    EXPECT_EQ(std::memcmp(a.estimate.beta.data(), b.estimate.beta.data(), sizeof(double) * a.estimate.beta.size()), 0);
    EXPECT_EQ(std::memcmp(a.estimate.gamma.data(), b.estimate.gamma.data(), sizeof(double) * a.estimate.gamma.size()), 0);
    EXPECT_EQ(a.train_rows, b.train_rows);
}

TEST(Pipeline, Errors)
{
    const auto t = toy_data(30, 5, 8, 12);
    auto cfg = toy_config(30);
    EXPECT_THROW(fit(t.y, t.X, t.W, cfg), input_error);
    cfg = toy_config();
    EXPECT_THROW(fit(t.y, t.X.topRows(20), t.W, cfg), input_error);
    cfg.validation_fraction = 1.0;
    EXPECT_THROW(fit(t.y, t.X, t.W, cfg), input_error);
    const auto f = fit(t.y, t.X, t.W, toy_config());
    EXPECT_THROW(predict(f, t.X.leftCols(4), t.W), input_error);
    EXPECT_THROW(predict(f, t.X, t.W.leftCols(7)), input_error);
}

TEST(Pipeline, ZeroFactorsLeaveBetaUnchanged)
{
    const auto t = toy_data(50, 12, 10, 13);
    const auto plain = regression::AugmentedDesign::training(t.X, Matrix(50, 0));
    const auto padded = regression::AugmentedDesign::training(t.X, Matrix::Zero(50, 3));
    PenaltySpec s;
    s.family = PenaltyFamily::hard;
    s.support_cap_M = 21;
    const auto grid = regression::lambda_grid(t.y, plain, 30);
    const auto a = regression::fit_path(t.y, plain, s, grid);
    const auto b = regression::fit_path(t.y, padded, s, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_EQ(a[i].beta, b[i].beta);
        EXPECT_EQ(b[i].gamma, Vector::Zero(3));
    }
}

TEST(RobustSpark, DuplicateColumns)
{
    Matrix A = gaussian_matrix(20, 4, 1);
    A.col(3) = A.col(1);
    const auto r = robust_spark(A, 0.5, 4);
    EXPECT_EQ(r.tau, 2);
    EXPECT_FALSE(r.lower_bound_only);
}

TEST(RobustSpark, OrthogonalDesign)
{
    Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(25, 6, 2));
    const Matrix A = 5.0 * (qr.householderQ() * Matrix::Identity(25, 6));
    const auto r = robust_spark(A, 0.5, 6);
    EXPECT_TRUE(r.lower_bound_only);
    EXPECT_EQ(r.tau, 6);
}

TEST(RobustSpark, MatchesIndependentEnumeration)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Matrix A = gaussian_matrix(30, 8, seed + 40);
        A.col(5) += 0.8 * A.col(2) + 0.6 * A.col(6);  // some near-collinearity
        for (double c : {0.3, 0.5, 0.7, 0.9}) {
            const auto r = robust_spark(A, c, 8);
            const Index expected = spark_by_bitmask(A, c, 8);
            if (expected > 8) EXPECT_TRUE(r.lower_bound_only);
            else EXPECT_EQ(r.tau, expected) << "seed " << seed << " c " << c;
        }
    }
}

TEST(RobustSpark, MonotoneInBound)
{
    const Matrix A = gaussian_matrix(30, 8, 3);
    Index prev = 100;
    for (double c : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
        const auto r = robust_spark(A, c, 8);
        const Index tau = r.lower_bound_only ? 100 : r.tau;
        EXPECT_LE(tau, prev);
        prev = tau;
    }
}

TEST(RobustSpark, Guards)
{
    const Matrix A = gaussian_matrix(30, 20, 3);
    EXPECT_THROW(robust_spark(A, 0.5, 15), refusal_error);
    EXPECT_THROW(robust_spark(A, 1.5, 3), input_error);
}

TEST(ConditionDiagnostics, PerfectDirections)
{
    ConditionContext ctx;
    ctx.W = gaussian_matrix(50, 6, 1);
    ctx.population_directions = Matrix::Identity(6, 2);
    ctx.sample_directions = ctx.population_directions;
    ctx.p = 100;
    ctx.s = 3;
    ctx.b0 = 1.0;
    const auto d = condition_diagnostics(ctx);
    EXPECT_NEAR(d.at("cos_omega_1"), 1.0, 1e-12);
    EXPECT_NEAR(d.at("cos_omega_2"), 1.0, 1e-12);
    EXPECT_EQ(d.at("factor_angle_holds"), 1.0);
}

TEST(ConditionDiagnostics, HandArithmetic)
{
    ConditionContext ctx;
    ctx.W = gaussian_matrix(100, 4, 2);
    ctx.population_directions = Matrix::Identity(4, 1);
    ctx.sample_directions = ctx.population_directions;
    ctx.p = 1000;
    ctx.s = 7;
    ctx.c1 = 0.5;
    ctx.c2 = 1.2;
    ctx.L = 1.0;
    ctx.b0 = 0.6;
    const auto d = condition_diagnostics(ctx);
    // max(sqrt(2)/0.5, 1) = 2.828427..., times 1.2/0.5 = 2.4, times sqrt(15 * log(1000) / 100).
    const double rate = std::sqrt(15.0 * 6.907755278982137 / 100.0);
    EXPECT_NEAR(d.at("signal_threshold"), 2.8284271247461903 * 2.4 * rate, 1e-12);
    EXPECT_NEAR(d.at("signal_threshold"), 6.9097, 1e-3);
    EXPECT_EQ(d.at("signal_holds"), 0.0);
    EXPECT_NEAR(d.at("lambda_window_lower"), 2.4 * rate, 1e-12);
    EXPECT_NEAR(d.at("lambda_window_upper"), 0.6 * 0.5 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(d.at("factor_angle_bound"), 1.0 - 1.44 * std::log(100.0) / (8.0 * 1.0 * 2500.0 * 100.0), 1e-15);
    EXPECT_NEAR(d.at("spark_bound_surrogate"), 0.5 - 1.2 / 100.0 * std::sqrt(std::log(100.0) / 100.0), 1e-15);
}

TEST(ConditionDiagnostics, RefusesWithoutTruth)
{
    ConditionContext ctx;
    ctx.W = gaussian_matrix(10, 3, 1);
    ctx.sample_directions = Matrix::Identity(3, 1);
    EXPECT_THROW(condition_diagnostics(ctx), refusal_error);
}

TEST(ConditionDiagnostics, ExampleOneSpikedFactor)
{
    const auto spec = sim::ExampleSpec::example(1);
    const sim::PopulationModel model(spec);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        const Matrix W = model.sampler_x.draw(spec.n, rng);
        ConditionContext ctx;
        ctx.W = W;
        ctx.sample_directions = pca::leading_components(W, spec.K).vectors;
        ctx.population_directions = model.directions;
        ctx.p = spec.p;
        ctx.s = 7;
        ctx.b0 = 0.5;
        const auto d = condition_diagnostics(ctx);
        for (Index k = 1; k <= spec.K; ++k) EXPECT_TRUE(d.count("cos_omega_" + std::to_string(k)));
        EXPECT_GT(d.at("cos_omega_1"), 0.99) << "seed " << seed;
    }
}
