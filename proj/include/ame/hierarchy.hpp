#pragma once

#include <ame/core.hpp>
#include <ame/knockoffs.hpp>
#include <ame/lasso.hpp>
#include <ame/oracle.hpp>
#include <ame/sampling.hpp>
#include <ame/serialize.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace ame {

/// Two-level grouping: top-level source t owns children[t], a block of
/// second-level source ids. parent[n] maps a second-level source back to its top.
class SourceTree
{
public:
    SourceTree() = default;

    explicit SourceTree(std::vector<std::vector<std::size_t>> children) : children_(std::move(children))
    {
        std::size_t n2 = 0;
        for (const auto& c : children_) n2 += c.size();
        parent_.assign(n2, SIZE_MAX);
        for (std::size_t t = 0; t < children_.size(); ++t) {
            for (auto n : children_[t]) {
                if (n >= n2) throw Error(ErrorCode::InvalidTree, "child id " + std::to_string(n) + " out of range");
                if (parent_[n] != SIZE_MAX) {
                    throw Error(ErrorCode::InvalidTree, "child " + std::to_string(n) + " has two parents");
                }
                parent_[n] = t;
            }
        }
        if (children_.empty()) throw Error(ErrorCode::EmptySources, "tree has no top-level sources");
    }

    /// n_top tops with `per_top` consecutive children each.
    static SourceTree balanced(std::size_t n_top, std::size_t per_top)
    {
        std::vector<std::vector<std::size_t>> ch(n_top);
        for (std::size_t t = 0; t < n_top; ++t) {
            for (std::size_t i = 0; i < per_top; ++i) ch[t].push_back(t * per_top + i);
        }
        return SourceTree(std::move(ch));
    }

    std::size_t n_top() const noexcept { return children_.size(); }
    std::size_t n_second() const noexcept { return parent_.size(); }
    const std::vector<std::size_t>& children(std::size_t top) const { return children_[top]; }
    std::size_t parent(std::size_t second) const { return parent_[second]; }

    json to_json() const { return json{{"children", children_}}; }

    /// Accepts {"children": [[...], ...]}; deeper nesting is rejected.
    static SourceTree from_json(const json& j)
    {
        if (!j.is_object() || !j.contains("children") || !j["children"].is_array()) {
            throw Error(ErrorCode::InvalidTree, "tree file needs a 'children' array");
        }
        std::vector<std::vector<std::size_t>> ch;
        for (const auto& top : j["children"]) {
            if (!top.is_array()) throw Error(ErrorCode::InvalidTree, "each top-level entry must be an array");
            std::vector<std::size_t> kids;
            for (const auto& k : top) {
                if (k.is_array()) throw Error(ErrorCode::InvalidTree, "trees deeper than two levels are not supported");
                if (!k.is_number_unsigned()) throw Error(ErrorCode::InvalidTree, "child ids must be non-negative integers");
                kids.push_back(k.get<std::size_t>());
            }
            ch.push_back(std::move(kids));
        }
        return SourceTree(std::move(ch));
    }

private:
    std::vector<std::vector<std::size_t>> children_;
    std::vector<std::size_t> parent_;
};

struct HierObservation
{
    SubsetMask top_mask;     // length N1
    SubsetMask second_mask;  // length N2
    double p1 = 0.5;
    double p2 = 0.5;
    double y = 0.0;
    std::optional<SubsetMask> top_knockoff_mask;
    std::optional<SubsetMask> second_knockoff_mask;

    friend bool operator==(const HierObservation&, const HierObservation&) = default;
};

/// Children of excluded tops must be excluded.
inline bool satisfies_containment(const HierObservation& o, const SourceTree& tree)
{
    for (auto n : o.second_mask.indices()) {
        if (!o.top_mask.test(tree.parent(n))) return false;
    }
    if (o.second_knockoff_mask) {
        for (auto n : o.second_knockoff_mask->indices()) {
            if (!o.top_mask.test(tree.parent(n))) return false;
        }
    }
    return true;
}

/// Masks for one row at fixed (p1, p2): tops ~ Bernoulli(p1), children of
/// included tops ~ Bernoulli(p2). Knockoffs follow the same conditional law.
inline HierObservation sample_hier_masks(const SourceTree& tree, double p1, double p2, std::uint64_t seed,
                                         std::uint64_t row, bool with_knockoffs = false)
{
    HierObservation o;
    o.p1 = p1;
    o.p2 = p2;
    o.top_mask = sample_subset(tree.n_top(), p1, seed, row, Stream::TopMask);
    o.second_mask = SubsetMask(tree.n_second());
    const CounterRng child_rng(seed, Stream::Mask);
    const CounterRng knock_rng(seed, Stream::KnockoffMask);
    if (with_knockoffs) {
        o.top_knockoff_mask = sample_subset(tree.n_top(), p1, seed, row, Stream::TopKnockoffMask);
        o.second_knockoff_mask = SubsetMask(tree.n_second());
    }
    for (std::size_t t = 0; t < tree.n_top(); ++t) {
        if (!o.top_mask.test(t)) continue;
        for (auto n : tree.children(t)) {
            if (child_rng.uniform(row, n) < p2) o.second_mask.set(n);
            if (with_knockoffs && knock_rng.uniform(row, n) < p2) o.second_knockoff_mask->set(n);
        }
    }
    return o;
}

inline HierObservation sample_hier(const SourceTree& tree, const PDistribution& p1_dist, const PDistribution& p2_dist,
                                   std::uint64_t seed, std::uint64_t row, bool with_knockoffs = true)
{
    const double p1 = draw_p(p1_dist, seed, row);
    const double p2 = draw_p(p2_dist, hash_combine(seed, 2), row);
    return sample_hier_masks(tree, p1, p2, seed, row, with_knockoffs);
}

/// Second-level feature for source n: 1/(p1 p2) if its parent is in Prop1 ∩ S1
/// and n ∈ S2, -1/(p1 (1-p2)) if the parent is in Prop1 ∩ S1 and n ∉ S2, else 0.
inline double second_level_value(bool parent_in, bool child_in, double p1, double p2)
{
    if (!parent_in) return 0.0;
    return child_in ? 1.0 / (p1 * p2) : -1.0 / (p1 * (1.0 - p2));
}

/// Second-level sources under the stage-one proponents, in (top, child) order.
inline std::vector<std::size_t> second_level_columns(std::span<const std::size_t> prop1, const SourceTree& tree)
{
    std::vector<std::size_t> tops(prop1.begin(), prop1.end());
    std::sort(tops.begin(), tops.end());
    std::vector<std::size_t> cols;
    for (auto t : tops) {
        for (auto n : tree.children(t)) cols.push_back(n);
    }
    return cols;
}

inline std::vector<double> featurize_second_level(const HierObservation& obs, std::span<const std::size_t> prop1,
                                                  const SourceTree& tree)
{
    const auto cols = second_level_columns(prop1, tree);
    std::vector<double> out(cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto n = cols[c];
        out[c] = second_level_value(obs.top_mask.test(tree.parent(n)), obs.second_mask.test(n), obs.p1, obs.p2);
    }
    return out;
}

inline std::uint64_t observations_fingerprint(std::span<const HierObservation> obs)
{
    std::uint64_t h = splitmix64(obs.size());
    for (const auto& o : obs) {
        h = hash_combine(h, o.top_mask.hash());
        h = hash_combine(h, o.second_mask.hash());
        h = hash_combine(h, std::bit_cast<std::uint64_t>(o.p1));
        h = hash_combine(h, std::bit_cast<std::uint64_t>(o.p2));
        h = hash_combine(h, std::bit_cast<std::uint64_t>(o.y));
    }
    return h;
}

struct HierResult
{
    Selection top;
    Selection second;  // w indexed by second_columns; selected holds second-level ids
    std::vector<std::size_t> second_columns;
    bool stage_two_ran = false;
    std::uint64_t stage_one_fingerprint = 0;
    std::uint64_t stage_two_fingerprint = 0;
    double lambda_top = 0.0;
    double lambda_second = 0.0;
};

/// Stage one: flat design over the N1 tops with p = p1, InverseP featurization,
/// its own knockoffs and p1 dummies. Stage two: all top variables plus the
/// children of stage-one proponents, second-level knockoffs and (p1, p2) dummies.
inline HierResult two_stage_estimate(std::span<const HierObservation> observations, const SourceTree& tree,
                                     const Featurization& top_feat, double q, const LambdaRule& rule,
                                     const CvOptions& cv = {})
{
    if (observations.empty()) throw Error(ErrorCode::TooFewRows, "no observations");
    for (const auto& o : observations) {
        if (o.top_mask.size() != tree.n_top() || o.second_mask.size() != tree.n_second()) {
            throw Error(ErrorCode::InconsistentN, "observation does not match the tree");
        }
        if (!o.top_knockoff_mask || !o.second_knockoff_mask) {
            throw Error(ErrorCode::MissingKnockoffMask, "hierarchical observations need knockoff masks");
        }
    }
    HierResult out;

    // stage one
    out.stage_one_fingerprint = observations_fingerprint(observations);
    std::vector<Observation> flat;
    flat.reserve(observations.size());
    for (const auto& o : observations) flat.push_back({o.top_mask, o.p1, o.y, o.top_knockoff_mask});
    const auto top_design = build_design(flat, top_feat, {.with_knockoffs = true, .with_dummies = true, .levels = {}});
    auto s1 = select_with_fdr(top_design, q, rule, cv);
    out.top = std::move(s1.selection);
    out.lambda_top = s1.fit.fit.lambda;

    out.second.q = q;
    if (out.top.selected.empty()) return out;

    // stage two
    out.stage_two_fingerprint = observations_fingerprint(observations);
    out.second_columns = second_level_columns(out.top.selected, tree);
    const std::size_t n1 = tree.n_top();
    const std::size_t k = out.second_columns.size();

    std::vector<std::pair<double, double>> tuples;
    for (const auto& o : observations) tuples.emplace_back(o.p1, o.p2);
    std::sort(tuples.begin(), tuples.end());
    tuples.erase(std::unique(tuples.begin(), tuples.end()), tuples.end());

    const auto m = static_cast<Eigen::Index>(observations.size());
    const std::size_t p = n1 + 2 * k + tuples.size();
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(m, static_cast<Eigen::Index>(p));
    Eigen::VectorXd y(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        const auto& o = observations[static_cast<std::size_t>(r)];
        for (std::size_t t = 0; t < n1; ++t) x(r, static_cast<Eigen::Index>(t)) = top_feat.value(o.top_mask.test(t), o.p1);
        for (std::size_t c = 0; c < k; ++c) {
            const auto n = out.second_columns[c];
            const bool parent_in = o.top_mask.test(tree.parent(n));
            x(r, static_cast<Eigen::Index>(n1 + c)) = second_level_value(parent_in, o.second_mask.test(n), o.p1, o.p2);
            x(r, static_cast<Eigen::Index>(n1 + k + c)) =
                second_level_value(parent_in, o.second_knockoff_mask->test(n), o.p1, o.p2);
        }
        const auto it = std::lower_bound(tuples.begin(), tuples.end(), std::make_pair(o.p1, o.p2));
        x(r, static_cast<Eigen::Index>(n1 + 2 * k + static_cast<std::size_t>(it - tuples.begin()))) = 1.0;
        y[r] = o.y;
    }
    std::vector<bool> pen(p, true);
    for (std::size_t j = n1 + 2 * k; j < p; ++j) pen[j] = false;

    const auto res = fit_with_rule(x, y, pen, rule, cv);
    out.lambda_second = res.fit.lambda;
    const double* b = res.fit.beta.data();
    auto w = w_statistics(std::span<const double>(b + n1, k), std::span<const double>(b + n1 + k, k));
    auto sel = make_selection(std::move(w), q);
    for (auto& idx : sel.selected) idx = out.second_columns[idx];
    out.second = std::move(sel);
    out.stage_two_ran = true;
    return out;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

inline json hier_observation_to_json(const HierObservation& o)
{
    json j{{"top_mask_hex", o.top_mask.to_hex()},
           {"mask_hex", o.second_mask.to_hex()},
           {"p1", o.p1},
           {"p2", o.p2},
           {"y", o.y}};
    if (o.top_knockoff_mask) j["top_knockoff_mask_hex"] = o.top_knockoff_mask->to_hex();
    if (o.second_knockoff_mask) j["knockoff_mask_hex"] = o.second_knockoff_mask->to_hex();
    return j;
}

/// Parses and validates one record, including the containment invariant.
inline HierObservation hier_observation_from_json(const json& j, const SourceTree& tree)
{
    HierObservation o;
    o.top_mask = SubsetMask::from_hex(tree.n_top(), detail::string_field(j, "top_mask_hex"));
    o.second_mask = SubsetMask::from_hex(tree.n_second(), detail::string_field(j, "mask_hex"));
    o.p1 = detail::number_field(j, "p1");
    o.p2 = detail::number_field(j, "p2");
    o.y = detail::number_field(j, "y");
    if (j.contains("top_knockoff_mask_hex")) {
        o.top_knockoff_mask = SubsetMask::from_hex(tree.n_top(), detail::string_field(j, "top_knockoff_mask_hex"));
    }
    if (j.contains("knockoff_mask_hex")) {
        o.second_knockoff_mask = SubsetMask::from_hex(tree.n_second(), detail::string_field(j, "knockoff_mask_hex"));
    }
    if (!(o.y >= 0.0 && o.y <= 1.0)) throw Error(ErrorCode::MalformedRecord, "y outside [0,1]");
    if (!(o.p1 > 0.0 && o.p1 < 1.0 && o.p2 > 0.0 && o.p2 < 1.0)) {
        throw Error(ErrorCode::MalformedRecord, "p1/p2 outside (0,1)");
    }
    if (!satisfies_containment(o, tree)) {
        throw Error(ErrorCode::MalformedRecord, "second-level source included under an excluded top-level source");
    }
    return o;
}

} // namespace ame
