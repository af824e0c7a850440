#pragma once

#include <ame/core.hpp>
#include <ame/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace ame {

// ---------------------------------------------------------------------------
// Normalizer v = E_{p~P}[1/(p(1-p))]
// ---------------------------------------------------------------------------

/// Closed-form normalizer of a base law. Throws UnsupportedDistribution when
/// the expectation diverges (Beta with alpha <= 1 or beta <= 1) or when asked
/// for a reweighted law, whose normalizer is always taken under its base.
inline double normalizer(const PDistribution& dist)
{
    validate(dist);
    return std::visit(
        [](const auto& x) -> double {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, DiscreteGrid>) {
                double s = 0.0;
                for (double p : x.values) s += 1.0 / (p * (1.0 - p));
                return s / static_cast<double>(x.values.size());
            } else if constexpr (std::is_same_v<T, TruncatedUniform>) {
                const double e = x.epsilon;
                return 2.0 * std::log((1.0 - e) / e) / (1.0 - 2.0 * e);
            } else if constexpr (std::is_same_v<T, BetaLaw>) {
                if (!(x.alpha > 1.0 && x.beta > 1.0)) {
                    throw Error(ErrorCode::UnsupportedDistribution,
                                "E[1/(p(1-p))] diverges for Beta with alpha <= 1 or beta <= 1");
                }
                const double s = x.alpha + x.beta;
                return (s - 2.0) * (s - 1.0) / ((x.alpha - 1.0) * (x.beta - 1.0));
            } else {
                throw Error(ErrorCode::UnsupportedDistribution,
                            "normalizer is defined under the base law, not the reweighted one");
            }
        },
        dist.kind);
}

struct Featurization
{
    FeaturizationScheme scheme = FeaturizationScheme::InverseP;
    double v = 1.0;

    double sqrt_v() const { return std::sqrt(v); }

    /// Feature value for a source that is in (or out of) a subset drawn with p.
    double value(bool included, double p) const
    {
        const double s = std::sqrt(v);
        if (scheme == FeaturizationScheme::InverseP) {
            return included ? 1.0 / (s * p) : -1.0 / (s * (1.0 - p));
        }
        return included ? s * (1.0 - p) : -s * p;
    }
};

/// Featurization for estimating AME under `base`. v is always computed under
/// the base law; use sampling_law() for the law p must actually be drawn from.
inline Featurization make_featurization(const PDistribution& base, FeaturizationScheme scheme)
{
    if (base.is_reweighted()) {
        throw Error(ErrorCode::InvalidDistribution, "featurization must be built from the base law");
    }
    return Featurization{scheme, normalizer(base)};
}

/// InverseP draws p from the base law; PFeat draws from the 1/(p(1-p))-reweighted law.
inline PDistribution sampling_law(const PDistribution& base, FeaturizationScheme scheme)
{
    if (scheme == FeaturizationScheme::PFeat) return PDistribution::reweighted(base);
    return base;
}

/// Probability mass of each grid level (uniform for a grid, proportional to
/// 1/(p(1-p)) for a reweighted grid). Empty for continuous laws.
inline std::vector<double> level_probabilities(const PDistribution& dist)
{
    std::vector<double> probs;
    if (auto g = std::get_if<DiscreteGrid>(&dist.kind)) {
        probs.assign(g->values.size(), 1.0 / static_cast<double>(g->values.size()));
    } else if (auto w = std::get_if<ReweightedW>(&dist.kind)) {
        if (auto gb = std::get_if<DiscreteGrid>(&w->base)) {
            double total = 0.0;
            for (double p : gb->values) {
                probs.push_back(1.0 / (p * (1.0 - p)));
                total += probs.back();
            }
            for (auto& x : probs) x /= total;
        }
    }
    return probs;
}

namespace detail {

inline double draw_beta(double a, double b, std::mt19937_64& eng)
{
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(eng);
    const double y = gb(eng);
    return x / (x + y);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double draw_from_grid(const std::vector<double>& values, const std::vector<double>& probs, double u)
{
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < values.size(); ++i) {
        acc += probs[i];
        if (u < acc) return values[i];
    }
    return values.back();
}

} // namespace detail

/// Draws p for row `row` from `dist`, keyed on (seed, row).
inline double draw_p(const PDistribution& dist, std::uint64_t seed, std::uint64_t row)
{
    const CounterRng rng(seed, Stream::PDraw);
    const double u = rng.uniform(row);
    return std::visit(
        [&](const auto& x) -> double {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, DiscreteGrid>) {
                return detail::draw_from_grid(x.values, level_probabilities(dist), u);
            } else if constexpr (std::is_same_v<T, TruncatedUniform>) {
                return x.epsilon + (1.0 - 2.0 * x.epsilon) * u;
            } else if constexpr (std::is_same_v<T, BetaLaw>) {
                auto eng = rng.engine(row);
                return detail::draw_beta(x.alpha, x.beta, eng);
            } else {
                return std::visit(
                    [&](const auto& b) -> double {
                        using B = std::decay_t<decltype(b)>;
                        if constexpr (std::is_same_v<B, DiscreteGrid>) {
                            return detail::draw_from_grid(b.values, level_probabilities(dist), u);
                        } else if constexpr (std::is_same_v<B, TruncatedUniform>) {
                            // density proportional to 1/(p(1-p)) on [eps, 1-eps]: uniform in logit space
                            const double lo = detail::logit(b.epsilon);
                            const double hi = detail::logit(1.0 - b.epsilon);
                            return detail::logistic(lo + (hi - lo) * rng.open_uniform(row));
                        } else {
                            // Beta(a,b) reweighted by 1/(p(1-p)) is Beta(a-1, b-1)
                            if (!(b.alpha > 1.0 && b.beta > 1.0)) {
                                throw Error(ErrorCode::UnsupportedDistribution,
                                            "reweighted Beta needs alpha > 1 and beta > 1");
                            }
                            auto eng = rng.engine(row);
                            return detail::draw_beta(b.alpha - 1.0, b.beta - 1.0, eng);
                        }
                    },
                    x.base);
            }
        },
        dist.kind);
}

/// Includes each source independently with probability p, keyed on (seed, row, source).
inline SubsetMask sample_subset(std::size_t n_sources, double p, std::uint64_t seed, std::uint64_t row,
                                Stream stream = Stream::Mask)
{
    const CounterRng rng(seed, stream);
    SubsetMask mask(n_sources);
    for (std::size_t n = 0; n < n_sources; ++n) {
        if (rng.uniform(row, n) < p) mask.set(n);
    }
    return mask;
}

inline std::vector<double> featurize_row(const SubsetMask& mask, double p, const Featurization& feat)
{
    std::vector<double> row(mask.size());
    const double in = feat.value(true, p);
    const double out = feat.value(false, p);
    for (std::size_t n = 0; n < mask.size(); ++n) row[n] = mask.test(n) ? in : out;
    return row;
}

/// The sampled half of an observation, before the utility is evaluated.
struct SampledRow
{
    SubsetMask mask;
    double p = 0.5;
    std::optional<SubsetMask> knockoff_mask;
};

/// Offline sampling of rows [first_row, first_row + count) for a given p-law.
inline std::vector<SampledRow> sample_rows(std::size_t n_sources, const PDistribution& law, std::size_t count,
                                           std::uint64_t seed, bool with_knockoffs, std::uint64_t first_row = 0)
{
    std::vector<SampledRow> rows;
    rows.reserve(count);
    for (std::uint64_t r = first_row; r < first_row + count; ++r) {
        SampledRow row;
        row.p = draw_p(law, seed, r);
        row.mask = sample_subset(n_sources, row.p, seed, r);
        if (with_knockoffs) row.knockoff_mask = sample_subset(n_sources, row.p, seed, r, Stream::KnockoffMask);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Design matrix
// ---------------------------------------------------------------------------

/// Column layout: [sources | knockoffs | p-level dummies].
struct DesignMatrix
{
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::size_t n_sources = 0;
    std::size_t knockoff_cols = 0;
    std::size_t dummy_cols = 0;
    std::vector<double> levels;

    std::size_t rows() const { return static_cast<std::size_t>(x.rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(x.cols()); }
    std::size_t knockoff_offset() const { return n_sources; }
    std::size_t dummy_offset() const { return n_sources + knockoff_cols; }

    /// Sources and knockoffs carry the L1 penalty; dummies act as per-level intercepts.
    std::vector<bool> penalized_mask() const
    {
        std::vector<bool> pen(cols(), true);
        for (std::size_t j = dummy_offset(); j < cols(); ++j) pen[j] = false;
        return pen;
    }
};

struct DesignOptions
{
    bool with_knockoffs = false;
    bool with_dummies = false;
    /// Declared p levels for the dummy basis. When empty the distinct observed
    /// p values (sorted) are used.
    std::vector<double> levels;
};

inline DesignMatrix build_design(std::span<const Observation> observations, const Featurization& feat,
                                 const DesignOptions& opts = {})
{
    if (observations.empty()) throw Error(ErrorCode::TooFewRows, "no observations");
    const std::size_t n = observations.front().mask.size();
    DesignMatrix d;
    d.n_sources = n;
    d.knockoff_cols = opts.with_knockoffs ? n : 0;

    if (opts.with_dummies) {
        d.levels = opts.levels;
        if (d.levels.empty()) {
            for (const auto& o : observations) d.levels.push_back(o.p);
            std::sort(d.levels.begin(), d.levels.end());
            d.levels.erase(std::unique(d.levels.begin(), d.levels.end()), d.levels.end());
        }
        d.dummy_cols = d.levels.size();
    }

    const auto m = static_cast<Eigen::Index>(observations.size());
    d.x.setZero(m, static_cast<Eigen::Index>(n + d.knockoff_cols + d.dummy_cols));
    d.y.resize(m);

    for (Eigen::Index r = 0; r < m; ++r) {
        const auto& o = observations[static_cast<std::size_t>(r)];
        if (o.mask.size() != n) throw Error(ErrorCode::InconsistentN, "observations disagree on N");
        const double in = feat.value(true, o.p);
        const double out = feat.value(false, o.p);
        for (std::size_t c = 0; c < n; ++c) d.x(r, static_cast<Eigen::Index>(c)) = o.mask.test(c) ? in : out;
        if (opts.with_knockoffs) {
            if (!o.knockoff_mask) {
                throw Error(ErrorCode::MissingKnockoffMask, "row " + std::to_string(r) + " has no knockoff mask");
            }
            if (o.knockoff_mask->size() != n) throw Error(ErrorCode::InconsistentN, "knockoff mask length");
            for (std::size_t c = 0; c < n; ++c) {
                d.x(r, static_cast<Eigen::Index>(n + c)) = o.knockoff_mask->test(c) ? in : out;
            }
        }
        if (opts.with_dummies) {
            auto it = std::find(d.levels.begin(), d.levels.end(), o.p);
            if (it == d.levels.end()) {
                throw Error(ErrorCode::InconsistentPLevel,
                            "row " + std::to_string(r) + " has p outside the declared level set");
            }
            d.x(r, static_cast<Eigen::Index>(d.dummy_offset() + static_cast<std::size_t>(it - d.levels.begin()))) = 1.0;
        }
        d.y(r) = o.y;
    }
    return d;
}

inline void dump_design_csv(const DesignMatrix& d, std::ostream& out)
{
    for (std::size_t c = 0; c < d.n_sources; ++c) out << "x" << c << ',';
    for (std::size_t c = 0; c < d.knockoff_cols; ++c) out << "k" << c << ',';
    for (std::size_t c = 0; c < d.dummy_cols; ++c) out << "d" << c << ',';
    out << "y\n";
    out.precision(17);
    for (Eigen::Index r = 0; r < d.x.rows(); ++r) {
        for (Eigen::Index c = 0; c < d.x.cols(); ++c) out << d.x(r, c) << ',';
        out << d.y(r) << '\n';
    }
}

} // namespace ame
