#pragma once

#include <ame/core.hpp>
#include <ame/lasso.hpp>
#include <ame/oracle.hpp>
#include <ame/rng.hpp>
#include <ame/sampling.hpp>

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ame {

enum class ShapleyMethod { ExactEnum, PermutationMC, AmeTruncUniform, AmeBeta, BetaShapley };

inline std::string to_string(ShapleyMethod m)
{
    switch (m) {
        case ShapleyMethod::ExactEnum: return "exact";
        case ShapleyMethod::PermutationMC: return "permutation_mc";
        case ShapleyMethod::AmeTruncUniform: return "ame_truncated_uniform";
        case ShapleyMethod::AmeBeta: return "ame_beta";
        case ShapleyMethod::BetaShapley: return "beta_shapley";
    }
    return "unknown";
}

struct ShapleyVector
{
    std::vector<double> values;
    ShapleyMethod method = ShapleyMethod::ExactEnum;
    double alpha = 0.0;  // BetaShapley only
    double beta = 0.0;
};

constexpr std::size_t max_exact_sources = 16;

/// U(S) for every S ⊆ [N], indexed by the subset's bit pattern.
inline std::vector<double> utility_table(const UtilityOracle& oracle, const Query& query = {}, std::uint64_t seed = 0)
{
    const std::size_t n = oracle.n_sources();
    if (n > max_exact_sources) {
        throw Error(ErrorCode::TooLarge, "exact enumeration needs N <= " + std::to_string(max_exact_sources));
    }
    std::vector<double> table(std::size_t{1} << n);
    parallel_for(table.size(), [&](std::size_t s) {
        SubsetMask mask(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (s >> i & 1U) mask.set(i);
        }
        table[s] = oracle.evaluate(mask, query, seed);
    });
    return table;
}

/// value_n = sum over S not containing n of weight[|S|] * (U(S+n) - U(S)).
inline std::vector<double> semivalue(std::span<const double> table, std::size_t n_sources,
                                     std::span<const double> size_weights)
{
    std::vector<double> values(n_sources, 0.0);
    for (std::size_t s = 0; s < table.size(); ++s) {
        const auto size = static_cast<std::size_t>(std::popcount(s));
        for (std::size_t i = 0; i < n_sources; ++i) {
            if (s >> i & 1U) continue;
            values[i] += size_weights[size] * (table[s | (std::size_t{1} << i)] - table[s]);
        }
    }
    return values;
}

/// 1 / (N * C(N-1, j)): the Shapley weight of one subset of size j.
inline std::vector<double> shapley_size_weights(std::size_t n)
{
    std::vector<double> w(n);
    for (std::size_t j = 0; j < n; ++j) {
        double binom = 1.0;
        for (std::size_t i = 1; i <= j; ++i) binom = binom * static_cast<double>(n - 1 - j + i) / static_cast<double>(i);
        w[j] = 1.0 / (static_cast<double>(n) * binom);
    }
    return w;
}

/// E_{p~P}[p^j (1-p)^(N-1-j)]: the probability of one particular subset of
/// size j among the other N-1 sources.
inline std::vector<double> ame_size_weights(const PDistribution& dist, std::size_t n)
{
    validate(dist);
    std::vector<double> w(n, 0.0);
    std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            for (std::size_t j = 0; j < n; ++j) {
                const double a = static_cast<double>(j) + 1.0;
                const double b = static_cast<double>(n - j);
                if constexpr (std::is_same_v<T, DiscreteGrid>) {
                    double s = 0.0;
                    for (double p : x.values) s += std::pow(p, a - 1.0) * std::pow(1.0 - p, b - 1.0);
                    w[j] = s / static_cast<double>(x.values.size());
                } else if constexpr (std::is_same_v<T, TruncatedUniform>) {
                    const double e = x.epsilon;
                    const double mass = boost::math::beta(a, b, 1.0 - e) - boost::math::beta(a, b, e);
                    w[j] = mass / (1.0 - 2.0 * e);
                } else if constexpr (std::is_same_v<T, BetaLaw>) {
                    w[j] = std::exp(std::lgamma(x.alpha + a - 1.0) + std::lgamma(x.beta + b - 1.0) -
                                    std::lgamma(x.alpha + x.beta + static_cast<double>(n) - 1.0) -
                                    (std::lgamma(x.alpha) + std::lgamma(x.beta) - std::lgamma(x.alpha + x.beta)));
                } else {
                    throw Error(ErrorCode::UnsupportedDistribution, "AME is defined under a base law, not a reweighted one");
                }
            }
        },
        dist.kind);
    return w;
}

inline ShapleyVector exact_sv(const UtilityOracle& oracle)
{
    const auto table = utility_table(oracle);
    const auto n = oracle.n_sources();
    return {semivalue(table, n, shapley_size_weights(n)), ShapleyMethod::ExactEnum};
}

/// Exact AME under `dist` by subset enumeration with analytic size weights.
inline std::vector<double> exact_ame(const UtilityOracle& oracle, const PDistribution& dist)
{
    const auto table = utility_table(oracle);
    const auto n = oracle.n_sources();
    return semivalue(table, n, ame_size_weights(dist, n));
}

/// Average marginal contribution over uniformly random permutations. Each
/// permutation costs N+1 utility evaluations.
inline ShapleyVector permutation_mc_sv(const UtilityOracle& oracle, std::size_t n_permutations, std::uint64_t seed)
{
    const std::size_t n = oracle.n_sources();
    std::vector<std::vector<double>> per_perm(n_permutations, std::vector<double>(n, 0.0));
    const CounterRng rng(seed, Stream::Permutation);
    parallel_for(n_permutations, [&](std::size_t t) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        auto eng = rng.engine(t);
        std::shuffle(order.begin(), order.end(), eng);
        SubsetMask mask(n);
        double prev = oracle.evaluate(mask, Query{}, seed);
        for (auto i : order) {
            mask.set(i);
            const double cur = oracle.evaluate(mask, Query{}, seed);
            per_perm[t][i] = cur - prev;
            prev = cur;
        }
    });
    ShapleyVector out{std::vector<double>(n, 0.0), ShapleyMethod::PermutationMC};
    for (const auto& row : per_perm) {
        for (std::size_t i = 0; i < n; ++i) out.values[i] += row[i];
    }
    for (auto& v : out.values) v /= static_cast<double>(std::max<std::size_t>(1, n_permutations));
    return out;
}

/// Permutation average over all N! orderings.
inline ShapleyVector permutation_exhaustive_sv(const UtilityOracle& oracle)
{
    const std::size_t n = oracle.n_sources();
    if (n > 10) throw Error(ErrorCode::TooLarge, "exhaustive permutations need N <= 10");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> sum(n, 0.0);
    std::size_t count = 0;
    do {
        SubsetMask mask(n);
        double prev = oracle.evaluate(mask, Query{}, 0);
        for (auto i : order) {
            mask.set(i);
            const double cur = oracle.evaluate(mask, Query{}, 0);
            sum[i] += cur - prev;
            prev = cur;
        }
        ++count;
    } while (std::next_permutation(order.begin(), order.end()));
    for (auto& v : sum) v /= static_cast<double>(count);
    return {sum, ShapleyMethod::PermutationMC};
}

/// sqrt(v) * lasso coefficients on a plain (no knockoff, no dummy) design.
/// The law must be TruncatedUniform or Beta with alpha, beta > 1.
inline ShapleyVector sv_via_ame(std::span<const Observation> observations, const Featurization& feat,
                                const PDistribution& dist, const LambdaRule& rule = LambdaRule::min(),
                                const CvOptions& cv = {})
{
    ShapleyVector out;
    if (auto b = std::get_if<BetaLaw>(&dist.kind)) {
        if (!(b->alpha > 1.0 && b->beta > 1.0)) {
            throw Error(ErrorCode::UnsupportedDistribution, "Beta-Shapley estimation needs alpha > 1 and beta > 1");
        }
        out.method = b->alpha == b->beta ? ShapleyMethod::AmeBeta : ShapleyMethod::BetaShapley;
        out.alpha = b->alpha;
        out.beta = b->beta;
    } else if (std::holds_alternative<TruncatedUniform>(dist.kind)) {
        out.method = ShapleyMethod::AmeTruncUniform;
    } else {
        throw Error(ErrorCode::UnsupportedDistribution, "SV estimation needs a truncated uniform or Beta law");
    }
    const auto design = build_design(observations, feat);
    const auto res = fit_with_rule(design, rule, cv);
    out.values = estimate_ame(res.fit, feat, design.n_sources);
    return out;
}

struct BoundReport
{
    double epsilon = 0.0;
    double l2_bound = 0.0;
    double linf_bound = 0.0;
    double delta_cap = 0.0;
};

/// Closed-form AME-vs-SV bounds. Truncated uniform: Delta <= 4 eps.
/// Beta(1+eps, 1+eps): Delta <= (1 + 1/eps)^(2 eps) - 1. Then
/// ||AME - SV||_inf <= 2 Delta and, for monotone utilities,
/// ||AME - SV||_2 <= Delta + sqrt(2 Delta).
inline BoundReport bound_report(const PDistribution& dist)
{
    validate(dist);
    BoundReport r;
    if (auto t = std::get_if<TruncatedUniform>(&dist.kind)) {
        r.epsilon = t->epsilon;
        r.delta_cap = 4.0 * r.epsilon;
        r.l2_bound = 4.0 * r.epsilon + 2.0 * std::sqrt(2.0 * r.epsilon);
        r.linf_bound = 8.0 * r.epsilon;
        return r;
    }
    if (auto b = std::get_if<BetaLaw>(&dist.kind)) {
        if (b->alpha != b->beta || !(b->alpha > 1.0)) {
            throw Error(ErrorCode::UnsupportedDistribution, "bounds exist for Beta(1+eps, 1+eps) only");
        }
        r.epsilon = b->alpha - 1.0;
        r.delta_cap = std::pow(1.0 + 1.0 / r.epsilon, 2.0 * r.epsilon) - 1.0;
        r.l2_bound = r.delta_cap + std::sqrt(2.0 * r.delta_cap);
        r.linf_bound = 2.0 * r.delta_cap;
        return r;
    }
    throw Error(ErrorCode::UnsupportedDistribution, "bounds exist for truncated uniform and symmetric Beta laws");
}

} // namespace ame
