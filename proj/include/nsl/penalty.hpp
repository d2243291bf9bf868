#pragma once
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <nsl/errors.hpp>

namespace nsl {

enum class PenaltyFamily { hard, l0, lasso, scad, elastic_net };

inline std::string_view to_string(PenaltyFamily f)
{
    switch (f) {
        case PenaltyFamily::hard: return "hard";
        case PenaltyFamily::l0: return "l0";
        case PenaltyFamily::lasso: return "lasso";
        case PenaltyFamily::scad: return "scad";
        case PenaltyFamily::elastic_net: return "elastic_net";
    }
    return "unknown";
}

inline PenaltyFamily parse_penalty_family(std::string_view name)
{
    if (name == "hard") return PenaltyFamily::hard;
    if (name == "l0") return PenaltyFamily::l0;
    if (name == "lasso") return PenaltyFamily::lasso;
    if (name == "scad") return PenaltyFamily::scad;
    if (name == "elastic_net" || name == "enet") return PenaltyFamily::elastic_net;
    throw input_error("unknown penalty family: " + std::string(name));
}

/// Families whose penalized objective is nonconvex; these get multi-start fits.
inline bool is_nonconvex(PenaltyFamily f)
{
    return f == PenaltyFamily::hard || f == PenaltyFamily::l0 || f == PenaltyFamily::scad;
}

/**
 * Penalty family and its parameters.
 *
 * `support_cap_M` is the M of the constraint set |supp| < M/2; the usable
 * support size is therefore the largest integer strictly below M/2.
 */
struct PenaltySpec
{
    PenaltyFamily family = PenaltyFamily::hard;
    double lambda = 0.0;
    double scad_a = 3.7;
    double enet_mix = 0.5;
    double gamma_box_T = 50.0;
    long support_cap_M = 0;

    void validate() const
    {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw input_error("penalty: lambda must be >= 0");
        if (!(scad_a > 2.0)) throw input_error("penalty: scad_a must exceed 2");
        if (!(enet_mix >= 0.0 && enet_mix <= 1.0)) throw input_error("penalty: enet_mix must lie in [0,1]");
        if (!(gamma_box_T > 0.0)) throw input_error("penalty: gamma box bound T must be positive");
        if (support_cap_M < 1) throw input_error("penalty: support cap M must be positive");
    }

    PenaltySpec with_lambda(double l) const
    {
        PenaltySpec s = *this;
        s.lambda = l;
        return s;
    }

    /// Largest admissible support size (|supp| < M/2).
    long max_support() const { return (support_cap_M + 1) / 2 - 1; }
};

/// M = floor(c_tilde * n / log p), floored at 3 so one coefficient stays admissible.
inline long default_support_cap(long n, long p, double c_tilde = 1.5)
{
    const double logp = std::log(static_cast<double>(std::max<long>(p, 3)));
    return std::max<long>(3, static_cast<long>(std::floor(c_tilde * static_cast<double>(n) / logp)));
}

/// p_lambda(t) for t >= 0.
inline double penalty_value(const PenaltySpec& spec, double t)
{
    if (!(t >= 0.0)) throw input_error("penalty_value: t must be nonnegative");
    const double lam = spec.lambda;
    switch (spec.family) {
        case PenaltyFamily::hard: {
            const double gap = std::max(lam - t, 0.0);
            return 0.5 * (lam * lam - gap * gap);
        }
        case PenaltyFamily::l0:
            return t != 0.0 ? 0.5 * lam * lam : 0.0;
        case PenaltyFamily::lasso:
            return lam * t;
        case PenaltyFamily::scad: {
            const double a = spec.scad_a;
            if (t <= lam) return lam * t;
            if (t <= a * lam) return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0));
            return 0.5 * (a + 1.0) * lam * lam;
        }
        case PenaltyFamily::elastic_net:
            return lam * (spec.enet_mix * t + 0.5 * (1.0 - spec.enet_mix) * t * t);
    }
    return 0.0;
}

inline double soft_threshold(double z, double level)
{
    if (z > level) return z - level;
    if (z < -level) return z + level;
    return 0.0;
}

/// argmin_b 1/2 (z - b)^2 + p_lambda(|b|) for a unit-scale coordinate.
inline double threshold_update(const PenaltySpec& spec, double z)
{
    const double lam = spec.lambda;
    const double az = std::abs(z);
    switch (spec.family) {
        case PenaltyFamily::hard:
        case PenaltyFamily::l0:
            return az > lam ? z : 0.0;
        case PenaltyFamily::lasso:
            return soft_threshold(z, lam);
        case PenaltyFamily::scad: {
            const double a = spec.scad_a;
            if (az <= 2.0 * lam) return soft_threshold(z, lam);
            if (az <= a * lam) {
                return ((a - 1.0) * z - std::copysign(a * lam, z)) / (a - 2.0);
            }
            return z;
        }
        case PenaltyFamily::elastic_net:
            return soft_threshold(z, lam * spec.enet_mix) / (1.0 + lam * (1.0 - spec.enet_mix));
    }
    return 0.0;
}

/// Univariate objective 1/2 (z - b)^2 + p_lambda(|b|).
inline double univariate_objective(const PenaltySpec& spec, double z, double b)
{
    return 0.5 * (z - b) * (z - b) + penalty_value(spec, std::abs(b));
}

/**
 * Minimizer over |b| <= bound. For the convex-in-b families the clipped
 * unconstrained minimizer is exact; for hard/L0 the candidates {0, clip} cover
 * the piecewise-linear/quadratic shape. `current` is kept when no candidate is
 * strictly better, so the update never increases the objective.
 */
inline double boxed_threshold_update(const PenaltySpec& spec, double z, double bound, double current)
{
    const double unconstrained = threshold_update(spec, z);
    if (std::abs(unconstrained) <= bound) return unconstrained;
    const double clipped = std::clamp(unconstrained, -bound, bound);
    double best = std::clamp(current, -bound, bound);
    double best_val = univariate_objective(spec, z, best);
    for (double cand : {clipped, 0.0}) {
        const double v = univariate_objective(spec, z, cand);
        if (v < best_val) {
            best_val = v;
            best = cand;
        }
    }
    return best;
}

} // namespace nsl
