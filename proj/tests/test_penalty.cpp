#include <cmath>
#include <gtest/gtest.h>
#include <nsl/penalty.hpp>

using namespace nsl;

namespace {

PenaltySpec make(PenaltyFamily f, double lambda)
{
    PenaltySpec s;
    s.family = f;
    s.lambda = lambda;
    s.support_cap_M = 10;
    return s;
}

/// Grid minimizer of 1/2 (z - b)^2 + p(|b|) over b in [-3, 3].
double grid_argmin(const PenaltySpec& spec, double z)
{
    double best_b = 0.0;
    double best = univariate_objective(spec, z, 0.0);
    for (long i = -300000; i <= 300000; ++i) {
        const double b = static_cast<double>(i) * 1e-5;
        const double v = 0.5 * (z - b) * (z - b) + penalty_value(spec, std::abs(b));
        if (v < best) {
            best = v;
            best_b = b;
        }
    }
    return best_b;
}

} // namespace

TEST(PenaltyValue, Hard)
{
    const auto s = make(PenaltyFamily::hard, 1.0);
    EXPECT_EQ(penalty_value(s, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(penalty_value(s, 0.5), 0.375);
    EXPECT_DOUBLE_EQ(penalty_value(s, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(penalty_value(s, 7.0), 0.5);
}

TEST(PenaltyValue, L0)
{
    const auto s = make(PenaltyFamily::l0, 2.0);
    EXPECT_DOUBLE_EQ(penalty_value(s, 0.001), 2.0);
    EXPECT_EQ(penalty_value(s, 0.0), 0.0);
}

TEST(PenaltyValue, OtherFamilies)
{
    EXPECT_DOUBLE_EQ(penalty_value(make(PenaltyFamily::lasso, 0.5), 3.0), 1.5);
    auto scad = make(PenaltyFamily::scad, 1.0);
    EXPECT_DOUBLE_EQ(penalty_value(scad, 0.5), 0.5);
    EXPECT_DOUBLE_EQ(penalty_value(scad, 10.0), 0.5 * 4.7);
    auto enet = make(PenaltyFamily::elastic_net, 2.0);
    enet.enet_mix = 0.25;
    EXPECT_DOUBLE_EQ(penalty_value(enet, 1.0), 2.0 * (0.25 + 0.5 * 0.75));
}

TEST(PenaltyValue, RejectsNegative)
{
    EXPECT_THROW(penalty_value(make(PenaltyFamily::hard, 1.0), -0.1), input_error);
}

TEST(PenaltyValue, IncreasingInTAndLambda)
{
    for (auto f : {PenaltyFamily::hard, PenaltyFamily::l0, PenaltyFamily::lasso, PenaltyFamily::scad,
                   PenaltyFamily::elastic_net}) {
        for (double lam : {0.1, 0.7, 1.3}) {
            const auto s = make(f, lam);
            const auto s2 = make(f, lam * 1.5);
            EXPECT_EQ(penalty_value(s, 0.0), 0.0);
            double prev = 0.0;
            for (double t = 0.0; t <= 6.0; t += 0.01) {
                const double v = penalty_value(s, t);
                EXPECT_GE(v, prev - 1e-15);
                EXPECT_GE(penalty_value(s2, t), v - 1e-15);
                prev = v;
            }
        }
    }
}

TEST(ThresholdUpdate, HardAndLasso)
{
    const auto hard = make(PenaltyFamily::hard, 1.0);
    EXPECT_EQ(threshold_update(hard, 0.9), 0.0);
    EXPECT_EQ(threshold_update(hard, 1.5), 1.5);
    EXPECT_EQ(threshold_update(hard, 1.0), 0.0);
    EXPECT_EQ(threshold_update(hard, -1.0), 0.0);
    const auto lasso = make(PenaltyFamily::lasso, 1.0);
    EXPECT_DOUBLE_EQ(threshold_update(lasso, 1.5), 0.5);
    EXPECT_EQ(threshold_update(lasso, -0.4), 0.0);
    EXPECT_DOUBLE_EQ(threshold_update(lasso, -2.5), -1.5);
}

TEST(ThresholdUpdate, ScadMatchesGridSearch)
{
    const auto scad = make(PenaltyFamily::scad, 1.0);
    EXPECT_NEAR(threshold_update(scad, 1.8), grid_argmin(scad, 1.8), 1e-4);
    for (double z : {-2.9, -2.2, -0.7, 0.3, 1.1, 2.5, 2.95}) {
        EXPECT_NEAR(threshold_update(scad, z), grid_argmin(scad, z), 1e-4) << "z=" << z;
    }
}

TEST(ThresholdUpdate, MinimizesUnivariateObjective)
{
    // The closed forms agree with a grid minimizer for every family (hard: off the tie point).
    for (auto f : {PenaltyFamily::hard, PenaltyFamily::l0, PenaltyFamily::lasso, PenaltyFamily::elastic_net}) {
        const auto s = make(f, 0.8);
        for (double z : {-2.5, -1.1, -0.3, 0.5, 0.95, 1.7}) {
            const double b = threshold_update(s, z);
            EXPECT_LE(univariate_objective(s, z, b), univariate_objective(s, z, grid_argmin(s, z)) + 1e-9)
                << to_string(f) << " z=" << z;
        }
    }
}

TEST(ThresholdUpdate, ElasticNetShrinks)
{
    auto enet = make(PenaltyFamily::elastic_net, 1.0);
    enet.enet_mix = 0.5;
    EXPECT_DOUBLE_EQ(threshold_update(enet, 2.0), 1.5 / 1.5);
}

TEST(BoxedUpdate, RespectsBound)
{
    const auto hard = make(PenaltyFamily::hard, 0.1);
    EXPECT_DOUBLE_EQ(boxed_threshold_update(hard, 5.0, 2.0, 0.0), 2.0);
    EXPECT_DOUBLE_EQ(boxed_threshold_update(hard, -0.5, 2.0, 0.0), -0.5);
    const auto lasso = make(PenaltyFamily::lasso, 1.0);
    EXPECT_DOUBLE_EQ(boxed_threshold_update(lasso, 10.0, 3.0, 1.0), 3.0);
}

TEST(PenaltySpec, SupportCap)
{
    PenaltySpec s;
    s.support_cap_M = 21;
    EXPECT_EQ(s.max_support(), 10);
    s.support_cap_M = 20;
    EXPECT_EQ(s.max_support(), 9);
    EXPECT_EQ(default_support_cap(100, 1000, 1.0), 14);
    EXPECT_EQ(default_support_cap(100, 1000, 1.5), 21);
}

TEST(PenaltySpec, Validation)
{
    PenaltySpec s = make(PenaltyFamily::scad, 1.0);
    s.scad_a = 2.0;
    EXPECT_THROW(s.validate(), input_error);
    s = make(PenaltyFamily::hard, -1.0);
    EXPECT_THROW(s.validate(), input_error);
    EXPECT_EQ(parse_penalty_family("enet"), PenaltyFamily::elastic_net);
    EXPECT_THROW(parse_penalty_family("mcp"), input_error);
}
