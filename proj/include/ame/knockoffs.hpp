#pragma once

#include <ame/core.hpp>
#include <ame/lasso.hpp>
#include <ame/sampling.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <vector>

namespace ame {

struct Selection
{
    std::vector<double> w;
    double tau = std::numeric_limits<double>::infinity();
    double q = 0.1;
    std::vector<std::size_t> selected;
};

/// W_n = max(b_n, 0) - max(b'_n, 0): positive when a source beats its knockoff.
inline std::vector<double> w_statistics(std::span<const double> coefficients, std::span<const double> knockoff_coefficients)
{
    if (coefficients.size() != knockoff_coefficients.size()) {
        throw Error(ErrorCode::MissingKnockoffs, "coefficient and knockoff vectors differ in length");
    }
    std::vector<double> w(coefficients.size());
    for (std::size_t n = 0; n < w.size(); ++n) {
        w[n] = std::max(coefficients[n], 0.0) - std::max(knockoff_coefficients[n], 0.0);
    }
    return w;
}

/// W statistics from a fit over a [sources | knockoffs | ...] design.
inline std::vector<double> w_statistics(const LassoFit& fit, std::size_t n_sources, std::size_t knockoff_offset)
{
    if (static_cast<std::size_t>(fit.beta.size()) < knockoff_offset + n_sources || knockoff_offset < n_sources) {
        throw Error(ErrorCode::MissingKnockoffs, "fit has no knockoff coefficients");
    }
    const double* b = fit.beta.data();
    return w_statistics(std::span<const double>(b, n_sources), std::span<const double>(b + knockoff_offset, n_sources));
}

/// Smallest t among the positive |w_n| with #{w <= -t} / #{w >= t} <= q, or
/// +inf when no such t exists. Zero-valued w never enter either count.
inline double knockoff_threshold(std::span<const double> w, double q)
{
    if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::InvalidConfig, "q must lie in [0, 1]");
    std::vector<double> pos, neg, candidates;
    for (double x : w) {
        if (x > 0.0) pos.push_back(x);
        else if (x < 0.0) neg.push_back(-x);
        if (x != 0.0) candidates.push_back(std::abs(x));
    }
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    for (double t : candidates) {
        const auto n_pos = static_cast<double>(pos.end() - std::lower_bound(pos.begin(), pos.end(), t));
        const auto n_neg = static_cast<double>(neg.end() - std::lower_bound(neg.begin(), neg.end(), t));
        if (n_pos > 0.0 && n_neg / n_pos <= q) return t;
    }
    return std::numeric_limits<double>::infinity();
}

inline Selection make_selection(std::vector<double> w, double q)
{
    Selection s;
    s.q = q;
    s.tau = knockoff_threshold(w, q);
    for (std::size_t n = 0; n < w.size(); ++n) {
        if (w[n] >= s.tau) s.selected.push_back(n);
    }
    s.w = std::move(w);
    return s;
}

struct FdrSelection
{
    Selection selection;
    RuleFit fit;
};

/// Fit on a design with knockoff (and dummy) columns, then threshold the W statistics.
inline FdrSelection select_with_fdr(const DesignMatrix& design, double q, const LambdaRule& rule,
                                    const CvOptions& cv = {})
{
    if (design.knockoff_cols != design.n_sources) {
        throw Error(ErrorCode::MissingKnockoffs, "design was built without knockoff columns");
    }
    FdrSelection out;
    out.fit = fit_with_rule(design, rule, cv);
    out.selection = make_selection(w_statistics(out.fit.fit, design.n_sources, design.knockoff_offset()), q);
    return out;
}

struct AuditTrial
{
    Selection selection;
    std::set<std::size_t> truth;
};

/// Sample mean of |selected \ truth| / (|selected| + 1/q).
inline double mfdr_audit(std::span<const AuditTrial> trials)
{
    if (trials.empty()) return 0.0;
    double total = 0.0;
    for (const auto& t : trials) {
        std::size_t false_sel = 0;
        for (auto n : t.selection.selected) false_sel += t.truth.count(n) ? 0 : 1;
        const double denom = static_cast<double>(t.selection.selected.size()) + 1.0 / t.selection.q;
        total += static_cast<double>(false_sel) / denom;
    }
    return total / static_cast<double>(trials.size());
}

} // namespace ame
