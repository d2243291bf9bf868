#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>
#include <nsl/penalized_regression.hpp>
#include "test_support.hpp"

namespace nsl::testing {

struct OracleInstance
{
    Vector y;
    regression::AugmentedDesign design;
    double lambda = 0.0;
};

/// n = 30, p <= 10, K <= 2, a few strong coefficients and moderate noise.
inline OracleInstance make_oracle_instance(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Index> p_dist(4, 10), k_dist(0, 2), s_dist(1, 3);
    std::uniform_real_distribution<double> mag(1.0, 2.0), scale(0.5, 3.0);
    std::bernoulli_distribution sign;
    const Index n = 30;
    const Index p = p_dist(rng);
    const Index K = k_dist(rng);
    Matrix X = gaussian_matrix(n, p, seed * 7919 + 1);
    for (Index j = 0; j < p; ++j) X.col(j) *= scale(rng);
    const Matrix F = K > 0 ? normalized_columns(gaussian_matrix(n, K, seed * 7919 + 2)) : Matrix(n, 0);
    auto design = regression::AugmentedDesign::training(X, F);

    Vector b = Vector::Zero(p + K);
    const Index s = std::min<Index>(s_dist(rng), p + K);
    std::vector<Index> idx(static_cast<std::size_t>(p + K));
    for (Index j = 0; j < p + K; ++j) idx[j] = j;
    std::shuffle(idx.begin(), idx.end(), rng);
    for (Index k = 0; k < s; ++k) b(idx[k]) = (sign(rng) ? 1.0 : -1.0) * mag(rng);

    Vector beta = b.head(p).cwiseQuotient(design.col_norms);
    Vector y = X * beta + 0.5 * gaussian_vector(n, seed * 7919 + 3);
    if (K > 0) y += F * b.tail(K);
    return {y, std::move(design), 0.3};
}

/// Log-spaced grid from lambda_max down to `target`.
inline std::vector<double> grid_to(const Vector& y, const regression::AugmentedDesign& d, double target, int size = 20)
{
    const double top = regression::lambda_grid(y, d, 1).front();
    std::vector<double> g;
    if (!(top > target)) return {target};
    for (int i = 0; i < size; ++i) {
        const double frac = static_cast<double>(i) / (size - 1);
        g.push_back(std::exp(std::log(top) + frac * (std::log(target) - std::log(top))));
    }
    g.back() = target;
    return g;
}

} // namespace nsl::testing
